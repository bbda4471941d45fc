#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>

#include "fovea/analysis.hpp"
#include "fovea/calibrate.hpp"
#include "fovea/control.hpp"
#include "fovea/fusion.hpp"
#include "fovea/image.hpp"
#include "fovea/imaging.hpp"
#include "fovea/optics.hpp"
#include "fovea/optimize.hpp"
#include "fovea/parallel.hpp"

namespace fovea::cli {

namespace fs = std::filesystem;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

/// State shared by one command run.
class Run {
public:
    Run(std::string name, RunConfig& rc)
        : name_(std::move(name)), rc_(rc), issues_(rc.issues), root_(&rc.document, &rc.resolved, "", &issues_) {
        root_.allow({"seed", "out", "threads"});
    }

    Section& root() { return root_; }
    Issues& issues() { return issues_; }
    const RunConfig& config() const { return rc_; }
    std::uint64_t seed() const { return rc_.seed; }
    fs::path resolve(const std::string& p) const { return rc_.resolve(p); }

    /// Call once every section has been read.
    void validated() {
        issues_.throw_if_any();
        fs::create_directories(rc_.out_dir);
    }

    fs::path output(const std::string& name) {
        outputs_.push_back(name);
        return rc_.out_dir / name;
    }

    void write_json(const std::string& name, const json& j) {
        std::ofstream out(output(name));
        if (!out) throw IoError("cannot write " + (rc_.out_dir / name).string());
        out << j.dump(2) << '\n';
    }

    void write_csv(const std::string& name, const std::vector<std::string>& header,
                   const std::vector<std::vector<double>>& rows) {
        std::ofstream out(output(name));
        if (!out) throw IoError("cannot write " + (rc_.out_dir / name).string());
        for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
        out << '\n';
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << num(r[i]);
            out << '\n';
        }
    }

    void write_image(const std::string& name, const Image& img) { fovea::write_image(output(name), img); }

    void finish(json summary = json::object()) {
        json m;
        m["command"] = name_;
        m["config_file"] = rc_.config_path.string();
        m["seed"] = rc_.seed;
        m["threads"] = rc_.threads;
        m["config"] = rc_.resolved;
        m["outputs"] = outputs_;
        m["summary"] = std::move(summary);
        std::ofstream out(rc_.out_dir / "manifest.json");
        if (!out) throw IoError("cannot write manifest");
        out << m.dump(2) << '\n';
    }

private:
    std::string name_;
    RunConfig& rc_;
    Issues& issues_;
    Section root_;
    std::vector<std::string> outputs_;
};

// ---------------------------------------------------------------- shared sections

optics::SystemConfig read_system(Run& run) {
    const std::string path = run.root().required_string("system");
    if (path.empty()) return {};
    const fs::path p = run.resolve(path);
    if (!fs::exists(p)) {
        run.issues().add("/system", "file not found: " + p.string());
        return {};
    }
    return optics::SystemConfig::load(p);
}

optimize::Schedule read_schedule(Section s) {
    optimize::Schedule out;
    out.base_rate = s.number("base_rate", out.base_rate, 0.0);
    out.order_decay = s.number("order_decay", out.order_decay, 1.0);
    out.max_iterations = s.integer("max_iterations", out.max_iterations, 1);
    out.tolerance = s.number("tolerance", out.tolerance, 0.0);
    out.window = s.integer("window", out.window, 1);
    s.finish();
    return out;
}

optimize::GridSpec read_grid(Section s) {
    optimize::GridSpec g;
    g.rows = s.integer("rows", g.rows, 1, 512);
    g.cols = s.integer("cols", g.cols, 1, 512);
    g.depth_mm = s.number("depth_mm", g.depth_mm, 0.0);
    s.finish();
    return g;
}

/// Deltas added to the nominal assembly.
optics::Assembly read_assembly_offset(Section s, const optics::Assembly& base) {
    optics::Assembly a = base;
    a.d_dpp_mm += s.number("d_dpp_mm", 0.0);
    a.d_sensor_mm += s.number("d_sensor_mm", 0.0);
    a.d_img_mm += s.number("d_img_mm", 0.0);
    const auto c = s.numbers("c_img_mm", {0.0, 0.0}, 2);
    a.c_img_mm += optics::Vec2(c[0], c[1]);
    s.finish();
    return a;
}

struct SceneSpec {
    std::string texture;
    int size = 512;
    std::uint64_t texture_seed = 0;
    int count = 16;
    std::vector<double> extent{170.0, 170.0};
    double depth_mm = 0.0;
    std::string path, sidecar;
};

SceneSpec read_scene(Section s, Run& run) {
    SceneSpec sc;
    sc.texture = s.string("texture", "natural", {"natural", "checkerboard", "dot_grid", "file"});
    if (sc.texture == "file") {
        sc.path = s.required_string("path");
        sc.sidecar = s.required_string("sidecar");
        for (const auto* key : {"path", "sidecar"}) {
            const std::string& v = std::string(key) == "path" ? sc.path : sc.sidecar;
            if (!v.empty() && !fs::exists(run.resolve(v)))
                run.issues().add(s.path_of(key), "file not found: " + run.resolve(v).string());
        }
    } else {
        sc.size = s.integer("size", sc.size, 8, 8192);
        if (sc.texture == "natural")
            sc.texture_seed = s.seed("texture_seed", 0);
        else
            sc.count = s.integer("count", sc.count, 1, 1024);
        sc.extent = s.numbers("extent_mm", sc.extent, 2);
        sc.depth_mm = s.number("depth_mm", 0.0, 0.0);
        if (sc.extent[0] <= 0 || sc.extent[1] <= 0) run.issues().add(s.path_of("extent_mm"), "must be positive");
    }
    s.finish();
    return sc;
}

imaging::Scene build_scene(const SceneSpec& sc, Run& run) {
    if (sc.texture == "file") return imaging::Scene::load(run.resolve(sc.path), run.resolve(sc.sidecar));
    imaging::Scene scene;
    if (sc.texture == "natural")
        scene.texture = imaging::natural_texture(sc.size, sc.size, sc.texture_seed);
    else if (sc.texture == "checkerboard")
        scene.texture = imaging::checkerboard_texture(sc.size, sc.size, sc.count);
    else
        scene.texture = imaging::dot_grid_texture(sc.size, sc.size, sc.count);
    scene.extent_x_mm = sc.extent[0];
    scene.extent_y_mm = sc.extent[1];
    scene.depth_mm = sc.depth_mm;
    return scene;
}

imaging::RenderOptions read_render_options(Section& s) {
    imaging::RenderOptions ro;
    ro.width_px = s.integer("width_px", ro.width_px, 8, 8192);
    ro.height_px = s.integer("height_px", ro.height_px, 8, 8192);
    ro.psf_grid = s.integer("psf_grid", ro.psf_grid, 2, 64);
    ro.psf_rays = s.integer("psf_rays", ro.psf_rays, 7);
    ro.max_kernel_radius_px = s.integer("max_kernel_radius_px", ro.max_kernel_radius_px, 1, 256);
    ro.noise_sigma = s.number("noise_sigma", ro.noise_sigma, 0.0);
    return ro;
}

std::string image_ext(Section& s) { return s.string("format", "exr", {"exr", "png"}); }

optimize::PatternSet load_patterns(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open pattern set " + p.string());
    return json::parse(in).get<optimize::PatternSet>();
}

/// Optional "patterns" file entry; records a missing-file issue.
std::optional<fs::path> read_pattern_path(Section& s, Run& run) {
    if (!s.has("patterns")) {
        s.allow({"patterns"});
        return std::nullopt;
    }
    const std::string p = s.string("patterns", "");
    if (!fs::exists(run.resolve(p))) {
        run.issues().add(s.path_of("patterns"), "file not found: " + run.resolve(p).string());
        return std::nullopt;
    }
    return run.resolve(p);
}

json mask_json(const optimize::SpotGridStack& st) {
    json r = json::array();
    for (int i = 0; i < st.rows; ++i) {
        json row = json::array();
        for (int j = 0; j < st.cols; ++j) row.push_back(st.r_min(i, j));
        r.push_back(row);
    }
    return {{"rows", st.rows}, {"cols", st.cols}, {"patterns", st.patterns}, {"n_star", st.n_star},
            {"mean_r_min_um", st.mean_r_min()}, {"r_min_um", r}};
}

double depth_or_default(const optics::OpticalSystem& sys, double d) { return d > 0.0 ? d : sys.object_distance_mm(); }

// ---------------------------------------------------------------- optimize

struct OptimizeSection {
    optimize::Schedule schedule;
    optimize::GridSpec grid;
    int max_order = 4;
    int rings = analysis::kDefaultRings;
    int budget = 5;
    int tiles = 2;
    double init_sigma_um = 0.01;
    double rho = 0.5, theta_deg = 0.0, depth_mm = 0.0;
    bool defocus_only = false;
};

enum OptimizeUse { kSingle = 1, kJoint = 2, kTiling = 4, kGrid = 8 };

OptimizeSection read_optimize(Run& run, int use) {
    Section s = run.root().child("optimize");
    OptimizeSection o;
    o.schedule = read_schedule(s.child("schedule"));
    o.max_order = s.integer("max_order", o.max_order, 2, 10);
    o.rings = s.integer("rings", o.rings, 1, 40);
    if (use & (kJoint | kTiling | kGrid)) o.grid = read_grid(s.child("grid"));
    if (use & kSingle) {
        Section f = s.child("field");
        o.rho = f.number("rho", o.rho, 0.0, 1.5);
        o.theta_deg = f.number("theta_deg", o.theta_deg);
        o.depth_mm = f.number("depth_mm", o.depth_mm, 0.0);
        f.finish();
        o.defocus_only = s.boolean("defocus_only", false);
    }
    if (use & kJoint) {
        o.budget = s.integer("budget", o.budget, 1, 64);
        o.init_sigma_um = s.number("init_sigma_um", o.init_sigma_um, 0.0);
    }
    if (use & kTiling) o.tiles = s.integer("tiles", o.tiles, 1, 16);
    s.allow({"field", "defocus_only", "budget", "init_sigma_um", "tiles", "grid"});
    s.finish();
    return o;
}

optimize::JointOptions joint_options(const OptimizeSection& o) {
    optimize::JointOptions jo;
    jo.max_order = o.max_order;
    jo.rings = o.rings;
    jo.init_sigma_um = o.init_sigma_um;
    return jo;
}

void cmd_optimize_single(Run& run) {
    const auto cfg = read_system(run);
    const auto o = read_optimize(run, kSingle);
    run.validated();
    const optics::OpticalSystem sys(cfg);
    const auto p = optics::field_point(sys, o.rho, o.theta_deg * kDeg, depth_or_default(sys, o.depth_mm));
    optimize::SingleOptions so;
    so.max_order = o.max_order;
    so.rings = o.rings;
    const auto r = o.defocus_only ? optimize::optimize_defocus_only(sys, std::span(&p, 1), o.schedule, o.max_order)
                                  : optimize::optimize_single(sys, std::span(&p, 1), o.schedule, so);
    optimize::PatternSet set;
    set.patterns = {r.expansion};
    set.depth_mm = depth_or_default(sys, o.depth_mm);
    set.provenance = optimize::Provenance::Single;
    set.seed = run.seed();
    run.write_json("patterns.json", set);
    std::vector<std::vector<double>> hist;
    for (std::size_t i = 0; i < r.history.size(); ++i) hist.push_back({double(i), r.history[i]});
    run.write_csv("history.csv", {"iteration", "spot_um"}, hist);
    run.finish({{"initial_spot_um", r.initial_loss}, {"final_spot_um", r.final_loss}, {"iterations", r.iterations}});
}

void cmd_optimize_joint(Run& run) {
    const auto cfg = read_system(run);
    const auto o = read_optimize(run, kJoint);
    run.validated();
    const optics::OpticalSystem sys(cfg);
    const auto r = optimize::optimize_joint(sys, o.budget, o.grid, o.schedule, run.seed(), joint_options(o));
    run.write_json("patterns.json", r.set);
    run.write_json("mask.json", mask_json(r.stack));
    std::vector<std::vector<double>> rows;
    for (const auto& t : r.trace) rows.push_back({double(t.iteration), t.gs, t.hr, t.joint});
    run.write_csv("trace.csv", {"iteration", "l_gs", "l_hr", "joint"}, rows);
    run.finish({{"mean_r_min_um", r.stack.mean_r_min()}, {"iterations", r.trace.size()}, {"warnings", r.warnings}});
}

void cmd_optimize_tiling(Run& run) {
    const auto cfg = read_system(run);
    const auto o = read_optimize(run, kTiling);
    run.validated();
    const optics::OpticalSystem sys(cfg);
    optimize::SingleOptions so;
    so.max_order = o.max_order;
    so.rings = o.rings;
    auto set = optimize::optimize_roi_tiling(sys, o.tiles, o.grid, o.schedule, so);
    set.seed = run.seed();
    const auto st = optimize::evaluate_stack(sys, set.patterns, o.grid, o.rings);
    run.write_json("patterns.json", set);
    run.write_json("mask.json", mask_json(st));
    run.finish({{"mean_r_min_um", st.mean_r_min()}, {"patterns", set.budget()}});
}

// ---------------------------------------------------------------- analyze

analysis::PsfOptions read_psf(Section s, analysis::PsfOptions p) {
    p.rays = s.integer("rays", p.rays, 7);
    p.pixel_pitch_um = s.number("pixel_pitch_um", p.pixel_pitch_um, 1e-3);
    p.support = s.integer("support", p.support, 8, 1024);
    p.frame = s.string("frame", p.frame == analysis::PsfFrame::Radial ? "radial" : "sensor", {"radial", "sensor"}) ==
                      "radial"
                  ? analysis::PsfFrame::Radial
                  : analysis::PsfFrame::Sensor;
    s.finish();
    return p;
}

zernike::Expansion pick_pattern(const std::optional<fs::path>& path, int index, const optics::SystemConfig& cfg,
                                Run& run, const std::string& where) {
    if (!path) return zernike::Expansion(4, cfg.plate_aperture_radius_mm);
    const auto set = load_patterns(*path);
    if (index >= set.budget())
        throw ConfigError(std::vector<ConfigIssue>{{where, "pattern_index " + std::to_string(index) + " out of range (set holds " +
                                       std::to_string(set.budget()) + ")"}});
    (void)run;
    return set.patterns[static_cast<std::size_t>(index)];
}

void cmd_analyze_mtf(Run& run) {
    const auto cfg = read_system(run);
    Section s = run.root().child("analyze");
    const auto ppath = read_pattern_path(s, run);
    const int index = s.integer("pattern_index", 0, 0);
    const auto rhos = s.numbers("rho", {0.0, 0.5, 0.9});
    const double theta = s.number("theta_deg", 0.0);
    const double depth = s.number("depth_mm", 0.0, 0.0);
    const auto psf = read_psf(s.child("psf"), {});
    s.allow({"coverage", "budgets", "warm_start"});
    s.finish();
    for (std::size_t i = 0; i < rhos.size(); ++i)
        if (rhos[i] < 0.0 || rhos[i] > 1.5) run.issues().add(s.path_of("rho") + "/" + std::to_string(i), "must be in [0, 1.5]");
    run.validated();
    const optics::OpticalSystem sys(cfg);
    const auto plate = pick_pattern(ppath, index, cfg, run, "/analyze/pattern_index");
    std::vector<std::vector<double>> rows;
    json fields = json::array();
    for (double rho : rhos) {
        const auto p = optics::field_point(sys, rho, theta * kDeg, depth_or_default(sys, depth));
        const auto curve = analysis::mtf_from_psf(analysis::psf_render(sys, plate, p, psf));
        const auto m = analysis::mtf50(curve);
        for (std::size_t k = 0; k < curve.frequencies_lpmm.size(); ++k)
            rows.push_back({rho, theta, curve.frequencies_lpmm[k], curve.sagittal[k], curve.tangential[k], curve.mean[k]});
        fields.push_back({{"rho", rho},
                          {"theta_deg", theta},
                          {"field_angle_deg", curve.field_angle_deg},
                          {"mtf50_lpmm", m.lpmm},
                          {"saturated", m.saturated}});
    }
    run.write_csv("mtf.csv", {"rho", "theta_deg", "frequency_lpmm", "sagittal", "tangential", "mean"}, rows);
    run.write_json("mtf50.json", fields);
    run.finish({{"fields", fields}});
}

void cmd_analyze_coverage(Run& run) {
    const auto cfg = read_system(run);
    const auto o = read_optimize(run, 0);
    Section s = run.root().child("analyze");
    Section c = s.child("coverage");
    analysis::CoverageOptions co;
    const auto radii = c.numbers("radii", {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0});
    co.threshold_lpmm = c.number("threshold_lpmm", co.threshold_lpmm, 0.0);
    co.grid.rho_nodes = c.integer("rho_nodes", co.grid.rho_nodes, 2, 200);
    co.grid.theta_nodes = c.integer("theta_nodes", co.grid.theta_nodes, 4, 720);
    co.depth_mm = c.number("depth_mm", 0.0, 0.0);
    co.psf = read_psf(c.child("psf"), co.psf);
    analysis::BudgetOptions bo;
    bo.lattice = c.integer("lattice", bo.lattice, 1, 256);
    bo.rotations = c.integer("rotations", bo.rotations, 1, 3600);
    c.finish();
    s.allow({"patterns", "pattern_index", "rho", "theta_deg", "depth_mm", "psf", "budgets", "warm_start"});
    s.finish();
    for (std::size_t i = 0; i < radii.size(); ++i)
        if (radii[i] < 0.0 || radii[i] > 1.0) run.issues().add(c.path_of("radii") + "/" + std::to_string(i), "must be in [0, 1]");
    if (radii.empty()) run.issues().add(c.path_of("radii"), "must not be empty");
    run.validated();
    const optics::OpticalSystem sys(cfg);
    optimize::SingleOptions so;
    so.max_order = o.max_order;
    so.rings = o.rings;
    const auto lib = optimize::make_coverage_library(sys, radii, co, o.schedule, so);
    json entries = json::array();
    std::vector<std::vector<double>> rows;
    for (const auto& e : lib) {
        const auto reg = analysis::threshold_region(e.map, co.threshold_lpmm, std::make_pair(e.rho, 0.0));
        entries.push_back({{"rho", e.rho},
                           {"pattern", e.pattern},
                           {"region", {{"found", reg.found}, {"area", reg.area}, {"rho_min", reg.rho_min},
                                       {"rho_max", reg.rho_max}, {"theta_extent", reg.theta_extent}}}});
        for (int i = 0; i < e.map.grid.rho_nodes; ++i)
            for (int j = 0; j < e.map.grid.theta_nodes; ++j)
                rows.push_back({e.rho, e.map.grid.rho(i), e.map.grid.theta(j), e.map.at(i, j)});
    }
    const auto need = analysis::images_needed(sys, co.threshold_lpmm, lib, bo);
    json chosen = json::array();
    for (const auto& [idx, angle] : need.chosen) chosen.push_back({{"library_index", idx}, {"rotation_rad", angle}});
    run.write_csv("coverage_maps.csv", {"library_rho", "rho", "theta_rad", "mtf50_lpmm"}, rows);
    run.write_json("library.json", entries);
    json summary = {{"threshold_lpmm", co.threshold_lpmm}, {"images_needed", need.count}, {"cells", need.cells},
                    {"uncoverable", need.uncoverable}, {"chosen", chosen}};
    run.write_json("images_needed.json", summary);
    summary.erase("chosen");
    run.finish(summary);
}

void cmd_analyze_budget_curve(Run& run) {
    const auto cfg = read_system(run);
    const auto o = read_optimize(run, kGrid);
    Section s = run.root().child("analyze");
    const auto budgets = s.integers("budgets", {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 1);
    const bool warm = s.boolean("warm_start", true);
    s.allow({"patterns", "pattern_index", "rho", "theta_deg", "depth_mm", "psf", "coverage"});
    s.finish();
    for (std::size_t i = 1; i < budgets.size(); ++i)
        if (budgets[i] <= budgets[i - 1]) run.issues().add(s.path_of("budgets"), "must be strictly increasing");
    if (budgets.empty()) run.issues().add(s.path_of("budgets"), "must not be empty");
    run.validated();
    const optics::OpticalSystem sys(cfg);
    optimize::BudgetCurveOptions bo;
    bo.warm_start = warm;
    bo.joint = joint_options(o);
    const auto curve = optimize::budget_curve(sys, budgets, o.grid, o.schedule, run.seed(), bo);
    std::vector<std::vector<double>> rows;
    json sets = json::array();
    json summary = json::array();
    for (const auto& p : curve) {
        rows.push_back({double(p.budget), p.mean_r_min, double(p.iterations)});
        sets.push_back({{"budget", p.budget}, {"set", p.set}, {"warnings", p.warnings}});
        summary.push_back({{"budget", p.budget}, {"mean_r_min_um", p.mean_r_min}});
    }
    run.write_csv("budget_curve.csv", {"budget", "mean_r_min_um", "iterations"}, rows);
    run.write_json("pattern_sets.json", sets);
    run.finish({{"curve", summary}});
}

// ---------------------------------------------------------------- render / fuse

void cmd_render_stack(Run& run) {
    const auto cfg = read_system(run);
    Section s = run.root().child("render");
    const auto ppath = read_pattern_path(s, run);
    const auto scene_spec = read_scene(s.child("scene"), run);
    auto ro = read_render_options(s);
    ro.noise_seed = run.seed();
    const std::string ext = image_ext(s);
    const auto actual = read_assembly_offset(s.child("assembly_offset"), cfg.assembly);
    s.finish();
    std::optional<OptimizeSection> o;
    if (!ppath) o = read_optimize(run, kJoint);
    run.validated();

    const optics::OpticalSystem sys(cfg);
    optimize::PatternSet set;
    if (ppath) {
        set = load_patterns(*ppath);
    } else {
        set = optimize::optimize_joint(sys, o->budget, o->grid, o->schedule, run.seed(), joint_options(*o)).set;
    }
    const auto scene = build_scene(scene_spec, run);
    const auto render_sys = sys.with_assembly(actual);
    const auto stack = imaging::render_stack(scene, render_sys, set, ro);
    // the mask is what the nominal model predicts, whatever the true assembly
    const auto mask = optimize::evaluate_stack(sys, set.patterns, set.grid);
    for (std::size_t i = 0; i < stack.images.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "image_%02zu.%s", i, ext.c_str());
        run.write_image(name, stack.images[i]);
    }
    auto ref_opts = ro;
    ref_opts.noise_sigma = 0.0;
    const auto reference =
        imaging::render_warp(scene, render_sys, zernike::Expansion(set.patterns.front().max_order(),
                                                                   cfg.plate_aperture_radius_mm),
                             ref_opts);
    run.write_image("reference." + ext, reference);
    run.write_json("patterns.json", set);
    run.write_json("mask.json", mask_json(mask));
    json psnrs = json::array();
    for (const auto& img : stack.images) psnrs.push_back(fusion::psnr(img, reference));
    run.finish({{"images", stack.images.size()}, {"psnr_vs_reference_db", psnrs}});
}

struct FuseInputs {
    std::vector<fs::path> inputs;
    std::optional<fs::path> reference;
    std::string ext;
};

FuseInputs read_fuse_inputs(Section& s, Run& run) {
    FuseInputs f;
    const auto inputs = s.strings("inputs", {});
    if (inputs.size() < 2) run.issues().add(s.path_of("inputs"), "needs at least two images");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto p = run.resolve(inputs[i]);
        if (!fs::exists(p))
            run.issues().add(s.path_of("inputs") + "/" + std::to_string(i), "file not found: " + p.string());
        f.inputs.push_back(p);
    }
    if (s.has("reference")) {
        const auto p = run.resolve(s.string("reference", ""));
        if (!fs::exists(p))
            run.issues().add(s.path_of("reference"), "file not found: " + p.string());
        f.reference = p;
    } else {
        s.allow({"reference"});
    }
    f.ext = image_ext(s);
    return f;
}

std::vector<Image> read_stack(const FuseInputs& f) {
    std::vector<Image> stack;
    for (const auto& p : f.inputs) stack.push_back(read_image(p));
    for (const auto& img : stack)
        if (!img.same_shape(stack.front())) throw InvalidArgument("fuse: input images differ in shape");
    return stack;
}

json fuse_metrics(const FuseInputs& f, const std::vector<Image>& stack, const Image& fused) {
    if (!f.reference) return json::object();
    const Image ref = read_image(*f.reference);
    json inputs = json::array();
    double best = -1e300;
    for (const auto& img : stack) {
        const auto m = fusion::metrics(img, ref);
        best = std::max(best, m.psnr_db);
        inputs.push_back({{"psnr_db", m.psnr_db}, {"ssim", m.ssim}});
    }
    const auto m = fusion::metrics(fused, ref);
    return {{"inputs", inputs},
            {"fused", {{"psnr_db", m.psnr_db}, {"ssim", m.ssim}}},
            {"gain_over_best_input_db", m.psnr_db - best}};
}

void cmd_fuse(Run& run, const std::string& method) {
    Section s = run.root().child("fuse");
    const auto f = read_fuse_inputs(s, run);
    const double blur = s.number("blur_radius", 15.0, 0.0);
    const int scale = s.integer("laplacian_scale", 1, 1, 64);
    const int levels = s.integer("levels", 5, 1, 16);
    std::optional<fs::path> mask_path;
    if (method == "mask") {
        const auto m = s.required_string("mask");
        if (!m.empty()) {
            mask_path = run.resolve(m);
            if (!fs::exists(*mask_path)) run.issues().add(s.path_of("mask"), "file not found: " + mask_path->string());
        }
    } else {
        s.allow({"mask"});
    }
    s.finish();
    run.validated();

    const auto stack = read_stack(f);
    Image fused;
    if (method == "sharpness") {
        auto r = fusion::fuse_sharpness(stack, blur, scale);
        fused = std::move(r.fused);
        Image idx = r.index_map;
        const double denom = std::max<double>(1.0, static_cast<double>(stack.size() - 1));
        for (auto& v : idx.data) v /= denom;
        run.write_image("index_map.png", idx);
    } else if (method == "mask") {
        std::ifstream in(*mask_path);
        const json m = json::parse(in);
        const auto n_star = m.at("n_star").get<std::vector<int>>();
        for (int n : n_star)
            if (n < 0 || n >= static_cast<int>(stack.size()))
                throw InvalidArgument("fuse mask: mask index " + std::to_string(n) + " has no input image");
        fused = fusion::fuse_mask(stack, n_star, m.at("rows").get<int>(), m.at("cols").get<int>());
    } else {
        fused = fusion::fuse_pyramid(stack, levels);
    }
    run.write_image("fused." + f.ext, fused);
    const json metrics = fuse_metrics(f, stack, fused);
    run.write_json("metrics.json", metrics);
    run.finish(metrics);
}

// ---------------------------------------------------------------- device

struct DeviceSection {
    control::DeviceParams device;
    control::DatasetOptions dataset;
    std::optional<fs::path> dataset_file;
    std::optional<fs::path> models_dir;
    control::TrainOptions train;
    control::ControlOptions solve;
    std::string strategy = "encoder+decoder";
    std::vector<double> target;
};

DeviceSection read_device(Run& run) {
    Section s = run.root().child("control");
    DeviceSection d;
    {
        Section p = s.child("device");
        auto& dp = d.device;
        dp.aperture_radius_mm = p.number("aperture_radius_mm", dp.aperture_radius_mm, 1e-3);
        dp.pitch_mm = p.number("pitch_mm", dp.pitch_mm, 1e-3);
        dp.influence_sigma_mm = p.number("influence_sigma_mm", dp.influence_sigma_mm, 1e-3);
        dp.saturation = p.number("saturation", dp.saturation, 0.0);
        dp.coupling = p.number("coupling", dp.coupling, 0.0);
        dp.peak_opd_um = p.number("peak_opd_um", dp.peak_opd_um, 0.0);
        dp.max_order = p.integer("max_order", dp.max_order, 1, 10);
        dp.sample_rings = p.integer("sample_rings", dp.sample_rings, 2, 200);
        p.finish();
    }
    {
        Section p = s.child("dataset");
        d.dataset.count = p.integer("count", d.dataset.count, 10);
        d.dataset.train_fraction = p.number("train_fraction", d.dataset.train_fraction, 0.05, 0.95);
        d.dataset.random_fraction = p.number("random_fraction", d.dataset.random_fraction, 0.0, 1.0);
        d.dataset.seed = run.seed();
        p.finish();
    }
    for (const auto* key : {"dataset_file", "models"}) {
        if (!s.has(key)) {
            s.allow({key});
            continue;
        }
        const auto p = run.resolve(s.string(key, ""));
        if (!fs::exists(p)) run.issues().add(s.path_of(key), "not found: " + p.string());
        (std::string(key) == "models" ? d.models_dir : d.dataset_file) = p;
    }
    {
        Section p = s.child("train");
        auto& t = d.train;
        t.epochs = p.integer("epochs", t.epochs, 1);
        t.batch = p.integer("batch", t.batch, 1);
        t.learning_rate = p.number("learning_rate", t.learning_rate, 0.0);
        t.noise_sigma = p.number("noise_sigma", t.noise_sigma, 0.0);
        t.hidden = p.integer("hidden", t.hidden, 1, 4096);
        t.seed = run.seed();
        p.finish();
    }
    {
        Section p = s.child("solve");
        d.solve.iterations = p.integer("iterations", d.solve.iterations, 0);
        d.solve.step = p.number("step", d.solve.step, 0.0);
        p.finish();
    }
    d.strategy = s.string("strategy", d.strategy, {"linear", "encoder", "decoder", "encoder+decoder"});
    d.target = s.numbers("target", {});
    s.finish();
    return d;
}

control::Dataset obtain_dataset(const DeviceSection& d, const control::SyntheticDevice& device) {
    if (d.dataset_file) return control::read_dataset_csv(*d.dataset_file);
    return control::generate_dataset(device, d.dataset);
}

template <typename T>
std::optional<T> read_model(const std::optional<fs::path>& dir, const char* file) {
    if (!dir || !fs::exists(*dir / file)) return std::nullopt;
    std::ifstream in(*dir / file);
    return json::parse(in).get<T>();
}

control::Models obtain_models(const DeviceSection& d, const control::Dataset& data, bool need_networks) {
    control::Models m;
    m.linear = read_model<control::LinearModel>(d.models_dir, "linear.json");
    m.decoder = read_model<control::Decoder>(d.models_dir, "decoder.json");
    m.encoder = read_model<control::Encoder>(d.models_dir, "encoder.json");
    const auto Vt = data.rows(data.V, data.train), Wt = data.rows(data.W, data.train);
    if (!m.linear) m.linear = control::fit_linear(Vt, Wt);
    if (need_networks) {
        if (!m.decoder) m.decoder = control::train_decoder(Vt, Wt, d.train);
        if (!m.encoder) m.encoder = control::train_encoder(Vt, Wt, d.train);
    }
    return m;
}

double test_rmse(const control::Dataset& data, const std::function<control::VectorXd(const control::VectorXd&)>& f) {
    double s = 0.0;
    long n = 0;
    for (int i : data.test) {
        const control::VectorXd e = f(data.V.row(i).transpose()) - data.W.row(i).transpose();
        s += e.squaredNorm();
        n += e.size();
    }
    return n ? std::sqrt(s / static_cast<double>(n)) : 0.0;
}

json device_json(const control::DeviceParams& p) {
    return {{"aperture_radius_mm", p.aperture_radius_mm}, {"pitch_mm", p.pitch_mm},
            {"influence_sigma_mm", p.influence_sigma_mm}, {"saturation", p.saturation},
            {"coupling", p.coupling},                     {"peak_opd_um", p.peak_opd_um},
            {"max_order", p.max_order},                   {"sample_rings", p.sample_rings}};
}

void cmd_device_generate(Run& run) {
    const auto d = read_device(run);
    run.validated();
    const control::SyntheticDevice device(d.device);
    const auto data = control::generate_dataset(device, d.dataset);
    control::write_dataset_csv(run.output("dataset.csv"), data);
    run.write_json("device.json", device_json(d.device));
    run.finish({{"samples", data.V.rows()}, {"train", data.train.size()}, {"test", data.test.size()},
                {"terms", device.term_count()}});
}

void cmd_device_fit_linear(Run& run) {
    const auto d = read_device(run);
    run.validated();
    const control::SyntheticDevice device(d.device);
    const auto data = obtain_dataset(d, device);
    const auto model = control::fit_linear(data.rows(data.V, data.train), data.rows(data.W, data.train));
    run.write_json("linear.json", model);
    const double rmse = test_rmse(data, [&](const control::VectorXd& v) { return model.predict(v); });
    run.finish({{"test_rmse_um", rmse}, {"regularized", model.regularized}});
}

void cmd_device_train(Run& run) {
    const auto d = read_device(run);
    run.validated();
    const control::SyntheticDevice device(d.device);
    const auto data = obtain_dataset(d, device);
    const auto Vt = data.rows(data.V, data.train), Wt = data.rows(data.W, data.train);
    control::TrainLog dlog, elog;
    const auto linear = control::fit_linear(Vt, Wt);
    const auto decoder = control::train_decoder(Vt, Wt, d.train, &dlog);
    const auto encoder = control::train_encoder(Vt, Wt, d.train, &elog);
    run.write_json("linear.json", linear);
    run.write_json("decoder.json", decoder);
    run.write_json("encoder.json", encoder);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < std::max(dlog.loss.size(), elog.loss.size()); ++i)
        rows.push_back({double(i), i < dlog.loss.size() ? dlog.loss[i] : NAN, i < elog.loss.size() ? elog.loss[i] : NAN});
    run.write_csv("train_log.csv", {"epoch", "decoder_loss", "encoder_loss"}, rows);
    std::vector<std::string> warnings = dlog.warnings;
    warnings.insert(warnings.end(), elog.warnings.begin(), elog.warnings.end());
    run.finish({{"linear_test_rmse_um", test_rmse(data, [&](const control::VectorXd& v) { return linear.predict(v); })},
                {"decoder_test_rmse_um", test_rmse(data, [&](const control::VectorXd& v) { return decoder.predict(v); })},
                {"warnings", warnings}});
}

void cmd_device_control(Run& run) {
    const auto d = read_device(run);
    const control::SyntheticDevice device(d.device);
    if (static_cast<int>(d.target.size()) != device.term_count())
        run.issues().add("/control/target", "expected " + std::to_string(device.term_count()) + " coefficients");
    run.validated();
    const auto strategy = control::strategy_from_string(d.strategy);
    const auto data = obtain_dataset(d, device);
    const auto models = obtain_models(d, data, strategy != control::Strategy::Linear);
    const control::VectorXd target = Eigen::Map<const control::VectorXd>(d.target.data(), d.target.size());
    const control::VectorXd v = control::control(target, strategy, models, d.solve);
    const control::VectorXd w = device.apply(v);
    json out = {{"strategy", d.strategy},
                {"target_um", d.target},
                {"volts", std::vector<double>(v.data(), v.data() + v.size())},
                {"device_wavefront_um", std::vector<double>(w.data(), w.data() + w.size())},
                {"wavefront_mse", (w - target).squaredNorm() / static_cast<double>(target.size())},
                {"within_bounds", v.minCoeff() >= 0.0 && v.maxCoeff() <= control::kVmax}};
    if (models.decoder) {
        const control::VectorXd p = models.decoder->predict(v);
        out["decoder_wavefront_um"] = std::vector<double>(p.data(), p.data() + p.size());
    }
    run.write_json("control.json", out);
    run.finish({{"wavefront_mse", out["wavefront_mse"]}, {"within_bounds", out["within_bounds"]}});
}

void cmd_device_compare(Run& run) {
    const auto d = read_device(run);
    run.validated();
    const control::SyntheticDevice device(d.device);
    const auto data = obtain_dataset(d, device);
    const auto models = obtain_models(d, data, true);
    const auto cmp = control::compare_strategies(device, data, models, d.solve);
    json j = cmp;
    run.write_json("comparison.json", j);
    std::ofstream csv(run.output("strategies.csv"));
    csv << "strategy,v_mse,wr_mse,wm_mse,wm_ho_mse,within_bounds\n";
    for (const auto& r : cmp.rows)
        csv << control::to_string(r.strategy) << ',' << num(r.v_mse) << ',' << num(r.wr_mse) << ',' << num(r.wm_mse)
            << ',' << num(r.wm_ho_mse) << ',' << (r.within_bounds ? 1 : 0) << '\n';
    run.finish({{"decoder_beats_linear", cmp.decoder_beats_linear}, {"wm_ordering_holds", cmp.wm_ordering}});
}

// ---------------------------------------------------------------- calibrate

void cmd_calibrate(Run& run) {
    const auto cfg = read_system(run);
    Section s = run.root().child("calibrate");
    const auto scene_spec = read_scene(s.child("scene"), run);
    Section r = s.child("render");
    auto ro = read_render_options(r);
    r.finish();
    ro.noise_seed = run.seed();
    const auto defocus = s.numbers("defocus_um", {0.0, 3.0, -3.0});
    std::vector<calibrate::StageOffset> offsets;
    {
        const std::vector<double> flat = s.numbers("stage_offsets_mm", {0, 0, 0, 0, 0, 30});
        if (flat.size() % 3 != 0)
            run.issues().add(s.path_of("stage_offsets_mm"), "expected triples (dx, dy, dz)");
        for (std::size_t i = 0; i + 2 < flat.size(); i += 3) offsets.push_back({flat[i], flat[i + 1], flat[i + 2]});
    }
    Section pert = s.child("perturbation");
    const double p_dpp = pert.number("d_dpp_mm", 0.0);
    const double p_sensor = pert.number("d_sensor_mm", 0.0);
    const double p_img = pert.number("d_img_mm", 0.0);
    const auto p_c = pert.numbers("c_img_mm", {0.0, 0.0}, 2);
    const bool random = pert.boolean("random", false);
    pert.finish();
    const int dots = s.integer("target_dots", 15, 0, 200);
    calibrate::Options opt;
    {
        Section o = s.child("options");
        static const std::vector<std::string> names{"d_dpp", "d_sensor", "d_img", "c_img_x", "c_img_y"};
        const auto free = o.strings("free", {"d_dpp", "d_sensor", "d_img", "c_img_x", "c_img_y"});
        opt.free.fill(false);
        for (const auto& f : free) {
            const auto it = std::find(names.begin(), names.end(), f);
            if (it == names.end())
                run.issues().add(o.path_of("free"), "unknown parameter '" + f + "'");
            else
                opt.free[static_cast<std::size_t>(it - names.begin())] = true;
        }
        opt.max_sweeps = o.integer("max_sweeps", opt.max_sweeps, 0);
        opt.min_gain = o.number("min_gain", opt.min_gain, 0.0);
        opt.abort_ssim = o.number("abort_ssim", opt.abort_ssim, -1.0, 1.0);
        opt.homography_init = o.boolean("homography_init", dots > 0);
        o.finish();
    }
    s.finish();
    if (opt.homography_init && dots == 0)
        run.issues().add("/calibrate/options/homography_init", "needs target_dots > 0");
    run.validated();

    optics::Assembly truth = cfg.assembly;
    {
        std::mt19937_64 rng(run.seed());
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        const auto draw = [&](double a) { return random ? a * u(rng) : a; };
        truth.d_sensor_mm += draw(p_sensor);
        truth.d_dpp_mm += draw(p_dpp);
        truth.d_img_mm += draw(p_img);
        const double cx = draw(p_c[0]), cy = draw(p_c[1]);
        truth.c_img_mm += optics::Vec2(cx, cy);
    }
    calibrate::Problem p;
    p.config = cfg;
    p.scene = build_scene(scene_spec, run);
    for (double w : defocus) {
        zernike::Expansion e(4, cfg.plate_aperture_radius_mm);
        e[4] = w;
        p.patterns.push_back(e);
    }
    p.render = ro;
    p.captures = calibrate::synthesize_captures(cfg, truth, p.scene, p.patterns, offsets, ro);
    if (dots > 0) {
        calibrate::Target tg;
        tg.scene = p.scene;
        tg.scene.texture = imaging::dot_grid_texture(512, 512, dots);
        auto clean = ro;
        clean.noise_sigma = 0.0;
        tg.image = imaging::render(tg.scene, optics::OpticalSystem(cfg).with_assembly(truth), p.patterns[0], clean);
        p.target = tg;
    }
    const auto res = calibrate::calibrate(p, opt);
    json out = res;
    out["truth"] = truth;
    const auto a = calibrate::to_params(res.final), t = calibrate::to_params(truth);
    json err = json::object();
    static const char* keys[] = {"d_dpp_mm", "d_sensor_mm", "d_img_mm", "c_img_x_mm", "c_img_y_mm"};
    for (int k = 0; k < calibrate::kParameters; ++k) err[keys[k]] = a[k] - t[k];
    out["error"] = err;
    run.write_json("calibration.json", out);
    run.finish({{"final_mean_ssim", out["final_mean_ssim"]}, {"error", err}, {"evaluations", res.evaluations}});
}

// ---------------------------------------------------------------- track-sim

void cmd_track_sim(Run& run) {
    const auto cfg = read_system(run);
    const auto o = read_optimize(run, 0);
    Section s = run.root().child("track");
    const int g = s.integer("anchor_grid", 9, 2, 64);
    const int steps = s.integer("steps", 20, 1, 100000);
    const std::string shape = s.string("path", "circle", {"circle", "line", "random"});
    const auto center = s.numbers("center", {0.5, 0.5}, 2);
    const double radius = s.number("radius", 0.3, 0.0);
    const auto start = s.numbers("start", {0.1, 0.1}, 2);
    const auto end = s.numbers("end", {0.9, 0.9}, 2);
    const bool direct = s.boolean("compare_direct", true);
    const bool voltages = s.boolean("interpolate_voltages", false);
    s.finish();
    std::optional<DeviceSection> dev;
    if (voltages) dev = read_device(run);
    run.validated();

    const optics::OpticalSystem sys(cfg);
    const auto& sen = cfg.sensor;
    const double hw = sen.width_mm() / 2, hh = sen.height_mm() / 2, depth = sys.object_distance_mm();
    const auto point_at = [&](double x, double y) {
        return optics::field_point_for_sensor(sys, optics::Vec2(-hw + 2 * hw * x, -hh + 2 * hh * y), depth);
    };
    optimize::SingleOptions so;
    so.max_order = o.max_order;
    so.rings = o.rings;

    std::vector<zernike::Expansion> anchor_patterns(static_cast<std::size_t>(g * g));
    parallel_for(anchor_patterns.size(), [&](std::size_t k) {
        const int i = static_cast<int>(k) / g, j = static_cast<int>(k) % g;
        const auto p = point_at(double(j) / (g - 1), double(i) / (g - 1));
        anchor_patterns[k] = optimize::optimize_single(sys, std::span(&p, 1), o.schedule, so).expansion;
    });

    std::optional<control::SyntheticDevice> device;
    std::optional<control::LinearModel> linear;
    std::vector<std::vector<double>> anchors;
    if (voltages) {
        device.emplace(dev->device);
        const auto data = control::generate_dataset(*device, dev->dataset);
        linear = control::fit_linear(data.rows(data.V, data.train), data.rows(data.W, data.train));
        for (const auto& e : anchor_patterns) {
            const auto c = e.coeffs();
            control::VectorXd w(device->term_count());
            for (int t = 0; t < w.size(); ++t) w[t] = t < static_cast<int>(c.size()) ? c[t] : 0.0;
            const auto v = control::solve_linear(linear->per_volt2(), w).V;
            anchors.emplace_back(v.data(), v.data() + v.size());
        }
    } else {
        for (const auto& e : anchor_patterns) anchors.emplace_back(e.coeffs().begin(), e.coeffs().end());
    }

    std::mt19937_64 rng(run.seed());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::pair<double, double>> path;
    for (int k = 0; k < steps; ++k) {
        const double t = steps > 1 ? double(k) / (steps - 1) : 0.0;
        if (shape == "circle")
            path.emplace_back(center[0] + radius * std::cos(2 * std::numbers::pi * t),
                              center[1] + radius * std::sin(2 * std::numbers::pi * t));
        else if (shape == "line")
            path.emplace_back(start[0] + t * (end[0] - start[0]), start[1] + t * (end[1] - start[1]));
        else {
            const double x = u(rng);
            path.emplace_back(x, u(rng));
        }
    }

    std::vector<std::vector<double>> rows(path.size());
    parallel_for(path.size(), [&](std::size_t k) {
        const auto [x, y] = path[k];
        const auto p = point_at(x, y);
        const auto gi = control::grid_control(anchors, g, g, x, y);
        zernike::Expansion e(o.max_order, cfg.plate_aperture_radius_mm);
        if (voltages) {
            e = device->apply_expansion(Eigen::Map<const control::VectorXd>(gi.value.data(), gi.value.size()));
        } else {
            for (int t = 0; t < e.size(); ++t) e[t] = gi.value[static_cast<std::size_t>(t)];
        }
        const double ri = analysis::rms_spot(sys, e, p, o.rings).r_um;
        double rd = NAN;
        if (direct) {
            const auto best = optimize::optimize_single(sys, std::span(&p, 1), o.schedule, so).expansion;
            rd = analysis::rms_spot(sys, best, p, o.rings).r_um;
        }
        rows[k] = {double(k), x, y, gi.clamped ? 1.0 : 0.0, ri, rd};
    });
    run.write_csv("track.csv", {"step", "x", "y", "clamped", "spot_interpolated_um", "spot_direct_um"}, rows);
    json aj = json::array();
    for (const auto& e : anchor_patterns) aj.push_back(e);
    run.write_json("anchors.json", {{"grid", g}, {"patterns", aj}});
    std::vector<double> ratios;
    for (const auto& r : rows)
        if (std::isfinite(r[5]) && r[5] > 0) ratios.push_back(r[4] / r[5]);
    json summary = {{"steps", steps}};
    if (!ratios.empty()) {
        std::sort(ratios.begin(), ratios.end());
        const std::size_t n = ratios.size();
        summary["median_spot_ratio"] = n % 2 ? ratios[n / 2] : 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]);
    }
    run.finish(summary);
}

using Handler = std::function<void(Run&)>;

const std::map<std::string, Handler>& handlers() {
    static const std::map<std::string, Handler> h{
        {"optimize-single", cmd_optimize_single},
        {"optimize-joint", cmd_optimize_joint},
        {"optimize-tiling", cmd_optimize_tiling},
        {"analyze mtf", cmd_analyze_mtf},
        {"analyze coverage", cmd_analyze_coverage},
        {"analyze budget-curve", cmd_analyze_budget_curve},
        {"render-stack", cmd_render_stack},
        {"fuse sharpness", [](Run& r) { cmd_fuse(r, "sharpness"); }},
        {"fuse mask", [](Run& r) { cmd_fuse(r, "mask"); }},
        {"fuse pyramid", [](Run& r) { cmd_fuse(r, "pyramid"); }},
        {"device generate", cmd_device_generate},
        {"device fit-linear", cmd_device_fit_linear},
        {"device train", cmd_device_train},
        {"device control", cmd_device_control},
        {"device compare-strategies", cmd_device_compare},
        {"calibrate", cmd_calibrate},
        {"track-sim", cmd_track_sim},
    };
    return h;
}

}  // namespace

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& [k, v] : handlers()) n.push_back(k);
        return n;
    }();
    return names;
}

void run_command(const std::string& name, RunConfig& rc) {
    const auto it = handlers().find(name);
    if (it == handlers().end()) throw InvalidArgument("unknown command " + name);
    set_thread_count(rc.threads);
    Run run(name, rc);
    it->second(run);
}

}  // namespace fovea::cli
