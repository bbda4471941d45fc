#include "fovea/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>

#include <nlohmann/json.hpp>

#include "fovea/common.hpp"
#include "fovea/parallel.hpp"

namespace fovea::optimize {

using analysis::SpotEvaluator;
using zernike::Expansion;

double Schedule::rate(int order) const { return base_rate / std::pow(order_decay, order); }

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::Single: return "single";
        case Provenance::RoiTiling: return "roi_tiling";
        case Provenance::Joint: return "joint";
        case Provenance::DefocusOnly: return "defocus_only";
    }
    return "single";
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "single") return Provenance::Single;
    if (s == "roi_tiling") return Provenance::RoiTiling;
    if (s == "joint") return Provenance::Joint;
    if (s == "defocus_only") return Provenance::DefocusOnly;
    throw InvalidArgument("unknown provenance '" + s + "'");
}

void to_json(nlohmann::json& j, const PatternSet& s) {
    j = nlohmann::json{{"patterns", s.patterns},
                       {"depth_mm", s.depth_mm},
                       {"budget", s.budget()},
                       {"provenance", to_string(s.provenance)},
                       {"seed", s.seed},
                       {"grid", {{"rows", s.grid.rows}, {"cols", s.grid.cols}, {"depth_mm", s.grid.depth_mm}}}};
}

void from_json(const nlohmann::json& j, PatternSet& s) {
    s.patterns = j.at("patterns").get<std::vector<Expansion>>();
    s.depth_mm = j.value("depth_mm", 0.0);
    s.provenance = provenance_from_string(j.value("provenance", std::string("single")));
    s.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        s.grid.rows = g.value("rows", 32);
        s.grid.cols = g.value("cols", 32);
        s.grid.depth_mm = g.value("depth_mm", 0.0);
    }
}

std::vector<Vec3> grid_field_points(const optics::OpticalSystem& system, const GridSpec& grid) {
    if (grid.rows < 1 || grid.cols < 1) throw InvalidArgument("grid must have at least one cell");
    const double depth = grid.depth_mm > 0.0 ? grid.depth_mm : system.object_distance_mm();
    const auto& sensor = system.config().sensor;
    const double hw = sensor.width_mm() / 2, hh = sensor.height_mm() / 2;
    std::vector<Vec3> pts;
    pts.reserve(static_cast<std::size_t>(grid.rows * grid.cols));
    for (int i = 0; i < grid.rows; ++i) {
        for (int j = 0; j < grid.cols; ++j) {
            const optics::Vec2 s(-hw + (j + 0.5) * 2 * hw / grid.cols, -hh + (i + 0.5) * 2 * hh / grid.rows);
            pts.push_back(optics::field_point_for_sensor(system, s, depth));
        }
    }
    return pts;
}

namespace {

/// Adam over a flat coefficient vector with per-entry step scales.
class Adam {
public:
    Adam(std::vector<double> rates, const Schedule& s)
        : rates_(std::move(rates)), m_(rates_.size(), 0.0), v_(rates_.size(), 0.0), s_(s) {}

    void step(std::span<double> x, std::span<const double> g) {
        ++t_;
        const double c1 = 1.0 - std::pow(s_.beta1, t_), c2 = 1.0 - std::pow(s_.beta2, t_);
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (rates_[i] == 0.0) continue;
            m_[i] = s_.beta1 * m_[i] + (1 - s_.beta1) * g[i];
            v_[i] = s_.beta2 * v_[i] + (1 - s_.beta2) * g[i] * g[i];
            x[i] -= rates_[i] * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + s_.epsilon);
        }
    }

private:
    std::vector<double> rates_;
    std::vector<double> m_, v_;
    Schedule s_;
    int t_ = 0;
};

std::vector<double> term_rates(int max_order, const Schedule& s, std::span<const int> active) {
    const int k = zernike::term_count(max_order);
    std::vector<double> rates(static_cast<std::size_t>(k), 0.0);
    for (int j = 0; j < k; ++j) {
        if (j == zernike::kTiltX || j == zernike::kTiltY) continue;
        if (!active.empty() && std::find(active.begin(), active.end(), j) == active.end()) continue;
        rates[static_cast<std::size_t>(j)] = s.rate(zernike::osa_to_nm(j).n);
    }
    return rates;
}

bool converged(const std::vector<double>& history, const Schedule& s) {
    const auto n = history.size();
    if (s.window < 1 || n <= static_cast<std::size_t>(s.window)) return false;
    const double old = history[n - 1 - static_cast<std::size_t>(s.window)];
    return std::abs(old - history.back()) <= s.tolerance * std::abs(old);
}

/// Mean spot size over evaluator points and its gradient; vignetted points are skipped.
double mean_spot(const SpotEvaluator& ev, const Expansion& w, std::vector<double>& grad) {
    const auto k = static_cast<std::size_t>(ev.term_count());
    std::vector<double> r(ev.size());
    std::vector<double> g(ev.size() * k);
    parallel_for(ev.size(), [&](std::size_t i) {
        const auto res = ev.evaluate(i, w, std::span<double>(&g[i * k], k));
        r[i] = res.vignetted ? std::numeric_limits<double>::quiet_NaN() : res.r_um;
    });
    grad.assign(k, 0.0);
    double sum = 0.0;
    int valid = 0;
    for (std::size_t i = 0; i < ev.size(); ++i) {
        if (std::isnan(r[i])) continue;
        sum += r[i];
        ++valid;
        for (std::size_t j = 0; j < k; ++j) grad[j] += g[i * k + j];
    }
    if (valid == 0) throw OptimizationFailed("every field point is vignetted");
    for (double& v : grad) v /= valid;
    return sum / valid;
}

}  // namespace

SingleResult optimize_single(const optics::OpticalSystem& system, std::span<const Vec3> points,
                             const Schedule& schedule, const SingleOptions& options) {
    if (points.empty()) throw InvalidArgument("optimize_single: no field points");
    SpotEvaluator ev(system, std::vector<Vec3>(points.begin(), points.end()), options.max_order, options.rings);
    Expansion w = options.initial.value_or(Expansion(options.max_order, system.plate_aperture_radius_mm()));
    if (w.max_order() != options.max_order) throw InvalidArgument("optimize_single: initial order mismatch");
    w.clear_tilt();
    Adam adam(term_rates(options.max_order, schedule, options.active), schedule);

    SingleResult res;
    std::vector<double> grad;
    double best = std::numeric_limits<double>::infinity();
    Expansion best_w = w;
    for (int it = 0; it < schedule.max_iterations; ++it) {
        const double loss = mean_spot(ev, w, grad);
        if (it == 0) res.initial_loss = loss;
        if (!std::isfinite(loss) || loss > 10.0 * res.initial_loss)
            throw OptimizationFailed("optimize_single diverged at iteration " + std::to_string(it) +
                                     ": loss " + std::to_string(loss) + " um, initial " +
                                     std::to_string(res.initial_loss) + " um");
        res.history.push_back(loss);
        if (loss < best) {
            best = loss;
            best_w = w;
        }
        res.iterations = it + 1;
        if (converged(res.history, schedule)) break;
        adam.step(w.coeffs(), grad);
    }
    res.expansion = best_w;
    res.final_loss = best;
    return res;
}

SingleResult optimize_defocus_only(const optics::OpticalSystem& system, std::span<const Vec3> points,
                                   const Schedule& schedule, int max_order) {
    SingleOptions opt;
    opt.max_order = max_order;
    opt.active = {zernike::kDefocus};
    return optimize_single(system, points, schedule, opt);
}

// ---------------------------------------------------------------- stacks

double SpotGridStack::r_min(int i, int j) const {
    double m = std::numeric_limits<double>::quiet_NaN();
    for (int n = 0; n < patterns; ++n) {
        const double v = at(i, j, n);
        if (!std::isnan(v) && (std::isnan(m) || v < m)) m = v;
    }
    return m;
}

double SpotGridStack::mean_r_min() const {
    double s = 0.0;
    int c = 0;
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            const double v = r_min(i, j);
            if (std::isnan(v)) continue;
            s += v;
            ++c;
        }
    return c ? s / c : std::numeric_limits<double>::quiet_NaN();
}

void SpotGridStack::update_mask() {
    n_star.assign(static_cast<std::size_t>(rows * cols), -1);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            int best = -1;
            for (int n = 0; n < patterns; ++n) {
                const double v = at(i, j, n);
                if (std::isnan(v)) continue;
                if (best < 0 || v < at(i, j, best)) best = n;
            }
            n_star[static_cast<std::size_t>(i * cols + j)] = best;
        }
}

namespace {

struct LossParts {
    JointLoss loss;
    std::vector<double> rmin;  // per cell, NaN if invalid
    std::vector<int> arg;
    double rbar = 0.0;
    int valid = 0;
};

LossParts loss_parts(std::span<const double> r, int cells, int patterns) {
    LossParts lp;
    lp.rmin.assign(static_cast<std::size_t>(cells), std::numeric_limits<double>::quiet_NaN());
    lp.arg.assign(static_cast<std::size_t>(cells), -1);
    std::vector<char> wins(static_cast<std::size_t>(patterns), 0);
    for (int c = 0; c < cells; ++c) {
        for (int n = 0; n < patterns; ++n) {
            const double v = r[static_cast<std::size_t>(c * patterns + n)];
            if (std::isnan(v)) continue;
            if (lp.arg[static_cast<std::size_t>(c)] < 0 || v < lp.rmin[static_cast<std::size_t>(c)]) {
                lp.rmin[static_cast<std::size_t>(c)] = v;
                lp.arg[static_cast<std::size_t>(c)] = n;
            }
        }
        if (lp.arg[static_cast<std::size_t>(c)] >= 0) {
            wins[static_cast<std::size_t>(lp.arg[static_cast<std::size_t>(c)])] = 1;
            lp.loss.gs += lp.rmin[static_cast<std::size_t>(c)];
            ++lp.valid;
        }
    }
    if (lp.valid == 0) return lp;
    lp.loss.gs /= lp.valid;
    lp.rbar = lp.loss.gs;
    for (int n = 0; n < patterns; ++n) {
        if (wins[static_cast<std::size_t>(n)]) continue;
        lp.loss.degenerate.push_back(n);
        double s = 0.0;
        for (int c = 0; c < cells; ++c) {
            const double v = r[static_cast<std::size_t>(c * patterns + n)];
            if (lp.arg[static_cast<std::size_t>(c)] < 0 || std::isnan(v)) continue;
            s += v * lp.rmin[static_cast<std::size_t>(c)] / lp.rbar;
        }
        lp.loss.hr += s / lp.valid;
    }
    lp.loss.joint = lp.loss.gs + lp.loss.hr;
    return lp;
}

}  // namespace

JointLoss joint_loss(const SpotGridStack& stack) {
    const int cells = stack.rows * stack.cols;
    if (stack.patterns < 1 || stack.r.size() != static_cast<std::size_t>(cells * stack.patterns))
        throw InvalidArgument("joint_loss: stack is not populated");
    return loss_parts(stack.r, cells, stack.patterns).loss;
}

JointLoss joint_loss_gradient(const SpotEvaluator& ev, std::span<const Expansion> patterns,
                              std::vector<std::vector<double>>* grad, SpotGridStack* stack) {
    const int np = static_cast<int>(patterns.size());
    const int cells = static_cast<int>(ev.size());
    if (np < 1) throw InvalidArgument("joint_loss_gradient: no patterns");
    std::vector<double> r(static_cast<std::size_t>(cells * np));
    parallel_for(static_cast<std::size_t>(cells), [&](std::size_t c) {
        for (int n = 0; n < np; ++n) {
            const auto s = ev.evaluate(c, patterns[static_cast<std::size_t>(n)]);
            r[c * static_cast<std::size_t>(np) + static_cast<std::size_t>(n)] =
                s.vignetted ? std::numeric_limits<double>::quiet_NaN() : s.r_um;
        }
    });
    LossParts lp = loss_parts(r, cells, np);
    if (lp.valid == 0) throw OptimizationFailed("every grid cell is vignetted");

    if (stack) {
        stack->patterns = np;
        stack->r = r;
        stack->n_star = lp.arg;
    }
    if (!grad) return lp.loss;

    const auto k = static_cast<std::size_t>(ev.term_count());
    // Per cell: gradient for the winner plus one per degenerate pattern.
    const std::size_t slots = 1 + lp.loss.degenerate.size();
    std::vector<double> g(static_cast<std::size_t>(cells) * slots * k, 0.0);
    parallel_for(static_cast<std::size_t>(cells), [&](std::size_t c) {
        const int win = lp.arg[c];
        if (win < 0) return;
        double* base = &g[c * slots * k];
        ev.evaluate(c, patterns[static_cast<std::size_t>(win)], std::span<double>(base, k));
        for (std::size_t d = 0; d < lp.loss.degenerate.size(); ++d) {
            const int n = lp.loss.degenerate[d];
            if (std::isnan(r[c * static_cast<std::size_t>(np) + static_cast<std::size_t>(n)])) continue;
            ev.evaluate(c, patterns[static_cast<std::size_t>(n)], std::span<double>(base + (1 + d) * k, k));
        }
    });
    grad->assign(static_cast<std::size_t>(np), std::vector<double>(k, 0.0));
    const double inv = 1.0 / lp.valid;
    for (int c = 0; c < cells; ++c) {
        const int win = lp.arg[static_cast<std::size_t>(c)];
        if (win < 0) continue;
        const double* base = &g[static_cast<std::size_t>(c) * slots * k];
        auto& gw = (*grad)[static_cast<std::size_t>(win)];
        for (std::size_t j = 0; j < k; ++j) gw[j] += inv * base[j];
        const double weight = lp.rmin[static_cast<std::size_t>(c)] / lp.rbar;
        for (std::size_t d = 0; d < lp.loss.degenerate.size(); ++d) {
            auto& gd = (*grad)[static_cast<std::size_t>(lp.loss.degenerate[d])];
            for (std::size_t j = 0; j < k; ++j) gd[j] += inv * weight * base[(1 + d) * k + j];
        }
    }
    return lp.loss;
}

SpotGridStack evaluate_stack(const optics::OpticalSystem& system, std::span<const Expansion> patterns,
                             const GridSpec& grid, int rings) {
    if (patterns.empty()) throw InvalidArgument("evaluate_stack: no patterns");
    SpotEvaluator ev(system, grid_field_points(system, grid), patterns.front().max_order(), rings);
    SpotGridStack stack;
    stack.rows = grid.rows;
    stack.cols = grid.cols;
    stack.field_points = ev.object_points();
    joint_loss_gradient(ev, patterns, nullptr, &stack);
    return stack;
}

JointResult optimize_joint(const optics::OpticalSystem& system, int budget, const GridSpec& grid,
                           const Schedule& schedule, std::uint64_t seed, const JointOptions& options) {
    if (budget < 1) throw InvalidArgument("optimize_joint: budget must be at least 1");
    SpotEvaluator ev(system, grid_field_points(system, grid), options.max_order, options.rings);
    const double r_ap = system.plate_aperture_radius_mm();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, options.init_sigma_um);
    std::vector<Expansion> w;
    for (int n = 0; n < budget; ++n) {
        Expansion e(options.max_order, r_ap);
        for (int j = 0; j < e.size(); ++j) e[j] = noise(rng);
        if (static_cast<std::size_t>(n) < options.initial.size()) {
            const auto& init = options.initial[static_cast<std::size_t>(n)];
            if (init.max_order() != options.max_order) throw InvalidArgument("optimize_joint: initial order mismatch");
            e = init;
        }
        e[0] = 0.0;
        e.clear_tilt();
        w.push_back(e);
    }

    const auto rates = term_rates(options.max_order, schedule, {});
    std::vector<Adam> adams;
    for (int n = 0; n < budget; ++n) adams.emplace_back(rates, schedule);

    JointResult res;
    std::vector<double> history;
    std::vector<std::vector<double>> grad;
    double best = std::numeric_limits<double>::infinity(), initial = 0.0;
    std::vector<Expansion> best_w = w;
    for (int it = 0; it < schedule.max_iterations; ++it) {
        const JointLoss loss = joint_loss_gradient(ev, w, &grad);
        if (it == 0) initial = loss.joint;
        if (!std::isfinite(loss.joint) || loss.joint > 10.0 * initial)
            throw OptimizationFailed("optimize_joint diverged at iteration " + std::to_string(it));
        const JointTraceRow row{it, loss.gs, loss.hr, loss.joint};
        res.trace.push_back(row);
        if (options.progress) options.progress(row);
        history.push_back(loss.joint);
        if (loss.joint < best) {
            best = loss.joint;
            best_w = w;
        }
        if (converged(history, schedule)) break;
        for (int n = 0; n < budget; ++n) adams[static_cast<std::size_t>(n)].step(w[static_cast<std::size_t>(n)].coeffs(),
                                                                                 grad[static_cast<std::size_t>(n)]);
    }

    res.set.patterns = best_w;
    res.set.depth_mm = grid.depth_mm > 0.0 ? grid.depth_mm : system.object_distance_mm();
    res.set.provenance = Provenance::Joint;
    res.set.seed = seed;
    res.set.grid = grid;
    res.stack.rows = grid.rows;
    res.stack.cols = grid.cols;
    res.stack.field_points = ev.object_points();
    const JointLoss final_loss = joint_loss_gradient(ev, best_w, nullptr, &res.stack);
    if (budget > 1 && static_cast<int>(final_loss.degenerate.size()) == budget - 1) {
        bool identical = true;
        for (int n = 1; n < budget && identical; ++n)
            for (int j = 0; j < best_w[0].size(); ++j)
                if (std::abs(best_w[static_cast<std::size_t>(n)][j] - best_w[0][j]) > 1e-3) identical = false;
        if (identical) res.warnings.push_back("all patterns collapsed to the same solution");
    }
    if (!final_loss.degenerate.empty())
        res.warnings.push_back(std::to_string(final_loss.degenerate.size()) + " pattern(s) win no grid cell");
    return res;
}

std::vector<BudgetPoint> budget_curve(const optics::OpticalSystem& system, std::span<const int> budgets,
                                      const GridSpec& grid, const Schedule& schedule, std::uint64_t seed,
                                      const BudgetCurveOptions& options) {
    if (budgets.empty()) throw InvalidArgument("budget_curve: no budgets");
    for (std::size_t i = 0; i < budgets.size(); ++i)
        if (budgets[i] < 1 || (i > 0 && budgets[i] <= budgets[i - 1]))
            throw InvalidArgument("budget_curve: budgets must be positive and strictly increasing");
    std::vector<BudgetPoint> out;
    std::optional<JointResult> prev;
    for (int b : budgets) {
        JointOptions jo = options.joint;
        if (options.warm_start && prev) {
            jo.initial = prev->set.patterns;
            // Worst cells first; each new pattern starts as the single-point optimum there.
            const auto& st = prev->stack;
            std::vector<std::size_t> cells(st.field_points.size());
            std::iota(cells.begin(), cells.end(), std::size_t{0});
            std::stable_sort(cells.begin(), cells.end(), [&](std::size_t a, std::size_t c) {
                const int ra = static_cast<int>(a) / st.cols, ca = static_cast<int>(a) % st.cols;
                const int rc = static_cast<int>(c) / st.cols, cc = static_cast<int>(c) % st.cols;
                return st.r_min(ra, ca) > st.r_min(rc, cc);
            });
            SingleOptions so;
            so.max_order = jo.max_order;
            so.rings = jo.rings;
            for (std::size_t k = 0; static_cast<int>(jo.initial.size()) < b && k < cells.size(); ++k) {
                const Vec3 p = st.field_points[cells[k]];
                try {
                    auto r = optimize_single(system, std::span<const Vec3>(&p, 1), schedule, so);
                    r.expansion.clear_tilt();
                    jo.initial.push_back(r.expansion);
                } catch (const Error&) {
                    continue;  // vignetted or diverging cell; try the next one
                }
            }
        }
        JointResult r = optimize_joint(system, b, grid, schedule, seed, jo);
        BudgetPoint pt;
        pt.budget = b;
        pt.mean_r_min = r.stack.mean_r_min();
        pt.iterations = static_cast<int>(r.trace.size());
        pt.set = r.set;
        pt.warnings = r.warnings;
        out.push_back(std::move(pt));
        prev = std::move(r);
    }
    return out;
}

PatternSet optimize_roi_tiling(const optics::OpticalSystem& system, int k, const GridSpec& grid,
                               const Schedule& schedule, const SingleOptions& options) {
    if (k < 1 || k > grid.rows || k > grid.cols) throw InvalidArgument("optimize_roi_tiling: invalid tiling");
    const auto pts = grid_field_points(system, grid);
    PatternSet set;
    set.depth_mm = grid.depth_mm > 0.0 ? grid.depth_mm : system.object_distance_mm();
    set.provenance = Provenance::RoiTiling;
    set.grid = grid;
    for (int a = 0; a < k; ++a) {
        for (int b = 0; b < k; ++b) {
            std::vector<Vec3> tile;
            for (int i = a * grid.rows / k; i < (a + 1) * grid.rows / k; ++i)
                for (int j = b * grid.cols / k; j < (b + 1) * grid.cols / k; ++j)
                    tile.push_back(pts[static_cast<std::size_t>(i * grid.cols + j)]);
            set.patterns.push_back(optimize_single(system, tile, schedule, options).expansion);
        }
    }
    return set;
}

std::vector<double> disparity_planes(double near_mm, double far_mm, int count) {
    if (count < 1 || near_mm <= 0.0 || far_mm <= 0.0) throw InvalidArgument("disparity_planes: invalid range");
    if (count == 1) return {near_mm};
    std::vector<double> d;
    for (int i = 0; i < count; ++i) {
        const double t = static_cast<double>(i) / (count - 1);
        d.push_back(1.0 / ((1.0 - t) / near_mm + t / far_mm));
    }
    return d;
}

std::vector<PatternSet> multi_depth_patterns(const optics::OpticalSystem& system, std::span<const double> depths,
                                             int per_depth_budget, const GridSpec& grid, const Schedule& schedule,
                                             std::uint64_t seed, const JointOptions& options) {
    if (depths.empty()) throw InvalidArgument("multi_depth_patterns: no depths");
    if (!std::is_sorted(depths.begin(), depths.end())) throw InvalidArgument("multi_depth_patterns: depths not sorted");
    if (depths.size() > 2) {
        const double step = 1.0 / depths[1] - 1.0 / depths[0];
        for (std::size_t i = 2; i < depths.size(); ++i)
            if (std::abs((1.0 / depths[i] - 1.0 / depths[i - 1]) - step) > 1e-3 * std::abs(step))
                throw InvalidArgument("multi_depth_patterns: depths are not evenly spaced in disparity");
    }
    std::vector<PatternSet> out;
    for (std::size_t i = 0; i < depths.size(); ++i) {
        GridSpec g = grid;
        g.depth_mm = depths[i];
        out.push_back(optimize_joint(system, per_depth_budget, g, schedule, seed + i, options).set);
    }
    return out;
}

std::vector<analysis::LibraryEntry> make_coverage_library(const optics::OpticalSystem& system,
                                                          std::span<const double> radii,
                                                          const analysis::CoverageOptions& coverage,
                                                          const Schedule& schedule, const SingleOptions& options) {
    const double depth = coverage.depth_mm > 0.0 ? coverage.depth_mm : system.object_distance_mm();
    std::vector<analysis::LibraryEntry> lib;
    for (double rho : radii) {
        const Vec3 p = optics::field_point(system, rho, 0.0, depth);
        analysis::LibraryEntry e;
        e.rho = rho;
        e.pattern = optimize_single(system, std::span<const Vec3>(&p, 1), schedule, options).expansion;
        analysis::CoverageOptions c = coverage;
        c.target = std::make_pair(rho, 0.0);
        e.map = analysis::coverage_map(system, e.pattern, c);
        lib.push_back(std::move(e));
    }
    return lib;
}

}  // namespace fovea::optimize
