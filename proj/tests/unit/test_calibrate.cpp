#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "fovea/calibrate.hpp"
#include "fovea/common.hpp"
#include "support.hpp"

using namespace fovea;
using calibrate::StageOffset;

namespace {

imaging::RenderOptions small_render(int px = 64) {
    imaging::RenderOptions ro;
    ro.width_px = ro.height_px = px;
    ro.psf_grid = 3;
    ro.psf_rays = 400;
    return ro;
}

imaging::Scene natural_scene() {
    imaging::Scene sc;
    sc.texture = imaging::natural_texture(256, 256, 7);
    sc.extent_x_mm = sc.extent_y_mm = 170.0;
    return sc;
}

std::vector<zernike::Expansion> defocus_patterns(double w4 = 3.0) {
    std::vector<zernike::Expansion> pats;
    for (double v : {0.0, w4, -w4}) {
        zernike::Expansion e(4, 5.0);
        e[4] = v;
        pats.push_back(e);
    }
    return pats;
}

calibrate::Problem make_problem(const calibrate::Assembly& truth, int px = 64) {
    calibrate::Problem p;
    p.config = testing::default_config();
    p.scene = natural_scene();
    p.patterns = defocus_patterns();
    p.render = small_render(px);
    p.captures = calibrate::synthesize_captures(p.config, truth, p.scene, p.patterns,
                                                {StageOffset{}, StageOffset{0, 0, 30}}, p.render);
    return p;
}

}  // namespace

TEST_CASE("staged shifts image distance and lateral center") {
    calibrate::Assembly a = testing::default_config().assembly;
    const auto s = calibrate::staged(a, StageOffset{1.5, -2.0, 30.0});
    CHECK(s.d_img_mm == doctest::Approx(a.d_img_mm + 30.0));
    CHECK(s.c_img_mm.x() == doctest::Approx(a.c_img_mm.x() + 1.5));
    CHECK(s.c_img_mm.y() == doctest::Approx(a.c_img_mm.y() - 2.0));
    CHECK(s.d_sensor_mm == a.d_sensor_mm);
    CHECK(s.d_dpp_mm == a.d_dpp_mm);
    const auto z = calibrate::staged(a, StageOffset{});
    CHECK(z.d_img_mm == a.d_img_mm);
    CHECK(z.c_img_mm == a.c_img_mm);
}

TEST_CASE("parameter vector round trip") {
    calibrate::Assembly a = testing::default_config().assembly;
    a.d_dpp_mm += 0.3;
    a.d_sensor_mm -= 0.2;
    a.d_img_mm += 4.0;
    a.c_img_mm = {0.7, -0.4};
    const auto p = calibrate::to_params(a);
    CHECK(p[0] == a.d_dpp_mm);
    CHECK(p[1] == a.d_sensor_mm);
    CHECK(p[2] == a.d_img_mm);
    CHECK(p[3] == a.c_img_mm.x());
    CHECK(p[4] == a.c_img_mm.y());
    const auto b = calibrate::from_params(p);
    CHECK(calibrate::to_params(b) == p);
}

TEST_CASE("problem validation") {
    const auto truth = testing::default_config().assembly;
    auto p = make_problem(truth, 32);
    CHECK_NOTHROW(p.validate());

    SUBCASE("single pattern") {
        auto q = p;
        q.patterns.resize(1);
        for (auto& c : q.captures) c.pattern = 0;
        CHECK_THROWS_AS(q.validate(), InvalidArgument);
    }
    SUBCASE("single stage position") {
        auto q = p;
        for (auto& c : q.captures) c.offset = StageOffset{};
        CHECK_THROWS_AS(q.validate(), InvalidArgument);
    }
    SUBCASE("capture size mismatch") {
        auto q = p;
        q.captures[0].image = Image(16, 16, 3, 0.5);
        CHECK_THROWS_AS(q.validate(), InvalidArgument);
    }
    SUBCASE("pattern index out of range") {
        auto q = p;
        q.captures[0].pattern = 7;
        CHECK_THROWS_AS(q.validate(), InvalidArgument);
    }
}

TEST_CASE("synthesized captures cover every pattern and offset") {
    const auto truth = testing::default_config().assembly;
    const auto p = make_problem(truth, 32);
    REQUIRE(p.captures.size() == 6);
    for (const auto& c : p.captures) {
        CHECK(c.image.width == 32);
        CHECK(c.image.height == 32);
        CHECK(c.pattern >= 0);
        CHECK(c.pattern < 3);
    }
    // distinct captures actually differ
    double diff = 0.0;
    for (std::size_t i = 0; i < p.captures[0].image.data.size(); ++i)
        diff += std::abs(p.captures[0].image.data[i] - p.captures[1].image.data[i]);
    CHECK(diff > 0.0);
}

TEST_CASE("fit_homography recovers a planted map") {
    Eigen::Matrix3d h;
    h << 1.05, 0.02, 3.0, -0.03, 0.97, -2.0, 1e-4, -2e-4, 1.0;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-50.0, 50.0);
    std::vector<calibrate::Vec2> from, to;
    for (int i = 0; i < 20; ++i) {
        calibrate::Vec2 p(u(rng), u(rng));
        from.push_back(p);
        to.push_back(calibrate::apply_homography(h, p));
    }
    const auto fit = calibrate::fit_homography(from, to);
    CHECK(fit(2, 2) == doctest::Approx(1.0));
    CHECK((fit - h).cwiseAbs().maxCoeff() < 1e-8);
    for (std::size_t i = 0; i < from.size(); ++i)
        CHECK((calibrate::apply_homography(fit, from[i]) - to[i]).norm() < 1e-8);
}

TEST_CASE("fit_homography rejects degenerate input") {
    std::vector<calibrate::Vec2> three{{0, 0}, {1, 0}, {0, 1}};
    CHECK_THROWS_AS(calibrate::fit_homography(three, three), DegenerateFit);
    std::vector<calibrate::Vec2> a{{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    std::vector<calibrate::Vec2> b{{0, 0}, {1, 0}, {0, 1}};
    CHECK_THROWS_AS(calibrate::fit_homography(a, b), InvalidArgument);
}

TEST_CASE("detect_dots finds grid centers") {
    const int dots = 10;
    const auto img = imaging::dot_grid_texture(200, 200, dots);
    auto found = calibrate::detect_dots(img);
    REQUIRE(found.size() == dots * dots);
    const double cell = 200.0 / dots;
    for (const auto& p : found) {
        const double kx = (p.x() + 0.5) / cell - 0.5, ky = (p.y() + 0.5) / cell - 0.5;
        CHECK(std::abs(kx - std::round(kx)) * cell < 0.05);
        CHECK(std::abs(ky - std::round(ky)) * cell < 0.05);
    }
}

TEST_CASE("detect_dots drops blobs on the border") {
    Image img(40, 40, 3, 1.0);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = 0.0;  // corner blob
    for (int y = 18; y < 23; ++y)
        for (int x = 18; x < 23; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = 0.0;
    const auto found = calibrate::detect_dots(img);
    REQUIRE(found.size() == 1);
    CHECK(found[0].x() == doctest::Approx(20.0));
    CHECK(found[0].y() == doctest::Approx(20.0));
}

TEST_CASE("mean_ssim is one at the truth and lower elsewhere") {
    const auto truth = testing::default_config().assembly;
    const auto p = make_problem(truth);
    std::vector<double> per;
    CHECK(calibrate::mean_ssim(p, truth, &per) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(per.size() == p.captures.size());
    auto off = truth;
    off.d_sensor_mm += 0.5;
    CHECK(calibrate::mean_ssim(p, off) < 0.99);
}

TEST_CASE("calibrate keeps the truth as a fixed point") {
    const auto truth = testing::default_config().assembly;
    auto p = make_problem(truth);
    p.config.assembly = truth;
    calibrate::Options opt;
    opt.homography_init = false;
    opt.max_sweeps = 1;
    const auto r = calibrate::calibrate(p, opt);
    REQUIRE(!r.ssim_trace.empty());
    CHECK(r.ssim_trace.back() == doctest::Approx(1.0).epsilon(1e-9));
    const auto a = calibrate::to_params(r.final), b = calibrate::to_params(truth);
    for (int k = 0; k < calibrate::kParameters; ++k) CHECK(a[k] == doctest::Approx(b[k]));
}

TEST_CASE("calibrate recovers a sensor distance error") {
    auto truth = testing::default_config().assembly;
    truth.d_sensor_mm += 0.5;
    auto p = make_problem(truth, 96);
    p.config.assembly = testing::default_config().assembly;
    calibrate::Options opt;
    opt.homography_init = false;
    opt.free = {false, true, false, false, false};
    const auto r = calibrate::calibrate(p, opt);
    CHECK(std::abs(r.final.d_sensor_mm - truth.d_sensor_mm) < 0.05);
    REQUIRE(!r.ssim_trace.empty());
    for (std::size_t i = 1; i < r.ssim_trace.size(); ++i) CHECK(r.ssim_trace[i] >= r.ssim_trace[i - 1]);
    CHECK(r.ssim_trace.back() > 0.99);
    CHECK(r.final.d_dpp_mm == p.config.assembly.d_dpp_mm);
    CHECK(r.final.c_img_mm == p.config.assembly.c_img_mm);

    nlohmann::json j = r;
    CHECK(j.contains("initial"));
    CHECK(j.contains("final"));
    CHECK(j["ssim_trace"].size() == r.ssim_trace.size());
    CHECK(j["per_image_ssim"].size() == p.captures.size());
    CHECK(j["evaluations"].get<int>() == r.evaluations);
}

TEST_CASE("homography initialization locates the image center") {
    auto truth = testing::default_config().assembly;
    truth.c_img_mm = {0.4, -0.3};
    auto p = make_problem(truth, 96);
    p.config.assembly = testing::default_config().assembly;
    const optics::OpticalSystem sys(p.config);
    calibrate::Target tg;
    tg.scene = p.scene;
    tg.scene.texture = imaging::dot_grid_texture(512, 512, 15);
    tg.image = imaging::render(tg.scene, sys.with_assembly(truth), p.patterns[0], p.render);
    p.target = tg;
    const auto a = calibrate::homography_c_img(p, p.config.assembly);
    CHECK((a.c_img_mm - truth.c_img_mm).norm() < 0.1);
    CHECK(a.d_sensor_mm == p.config.assembly.d_sensor_mm);
}

TEST_CASE("calibrate aborts on unrelated captures") {
    const auto truth = testing::default_config().assembly;
    auto p = make_problem(truth);
    p.scene.texture = imaging::natural_texture(256, 256, 99);
    calibrate::Options opt;
    opt.homography_init = false;
    opt.max_sweeps = 0;
    opt.abort_ssim = 0.9;
    CHECK_THROWS_AS(calibrate::calibrate(p, opt), OptimizationFailed);
}
