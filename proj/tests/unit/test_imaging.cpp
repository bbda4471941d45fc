#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fovea/common.hpp"
#include "fovea/fusion.hpp"
#include "fovea/imaging.hpp"
#include "support.hpp"

using namespace fovea;
using namespace fovea::imaging;
using testing::default_system;

namespace {

Scene textured_scene(std::uint64_t seed = 1, int size = 256) {
    Scene s;
    s.texture = natural_texture(size, size, seed);
    s.extent_x_mm = s.extent_y_mm = 170.0;
    return s;
}

RenderOptions small(int px = 64, int g = 4) {
    RenderOptions o;
    o.width_px = o.height_px = px;
    o.psf_grid = g;
    o.psf_rays = 400;
    return o;
}

// Mean |Laplacian| inside a square window.
double local_sharpness(const Image& img, int x0, int y0, int size) {
    const Image g = luminance(img);
    double s = 0.0;
    for (int y = y0 + 1; y < y0 + size - 1; ++y)
        for (int x = x0 + 1; x < x0 + size - 1; ++x)
            s += std::abs(4 * g.at(0, y, x) - g.at(0, y - 1, x) - g.at(0, y + 1, x) - g.at(0, y, x - 1) - g.at(0, y, x + 1));
    return s;
}

double interior_sum(const Image& img, int border) {
    double s = 0.0;
    for (int c = 0; c < img.channels; ++c)
        for (int y = border; y < img.height - border; ++y)
            for (int x = border; x < img.width - border; ++x) s += img.at(c, y, x);
    return s;
}

double diff_norm(const Image& a, const Image& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("procedural textures stay in range") {
    for (const Image& t : {checkerboard_texture(32, 32, 4), dot_grid_texture(40, 40, 5), natural_texture(32, 32, 3)}) {
        for (double v : t.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    CHECK(natural_texture(16, 16, 3).data == natural_texture(16, 16, 3).data);
    CHECK(natural_texture(16, 16, 3).data != natural_texture(16, 16, 4).data);
    Scene bad;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("pinhole render equals the warp oracle") {
    optics::SensorSpec sensor;
    const auto pin = pinhole_system(50.0, 652.0, sensor);
    const Scene s = textured_scene();
    const zernike::Expansion zero(4, 5.0);
    const auto o = small(64, 3);
    const Image r = render(s, pin, zero, o);
    const Image w = render_warp(s, pin, zero, o);
    CHECK(fusion::psnr(r, w) > 60.0);
}

TEST_CASE("render is linear in the scene") {
    const auto& sys = default_system();
    Scene s = textured_scene();
    Scene half = s;
    for (double& v : half.texture.data) v *= 0.5;
    const zernike::Expansion zero(4, 5.0);
    const auto o = small();
    const Image a = render(s, sys, zero, o), b = render(half, sys, zero, o);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) worst = std::max(worst, std::abs(0.5 * a.data[i] - b.data[i]));
    CHECK(worst < 1e-6);
}

TEST_CASE("bare lens: center sharper than corner") {
    const auto& sys = default_system();
    const Scene s = textured_scene(2, 512);
    const Image img = render(s, sys, zernike::Expansion(4, 5.0), small(128, 5));
    CHECK(local_sharpness(img, 48, 48, 32) > local_sharpness(img, 0, 0, 32));
}

TEST_CASE("energy is conserved away from the border") {
    const auto& sys = default_system();
    const Scene s = textured_scene(5);
    zernike::Expansion plate(4, 5.0);
    plate[4] = 0.5;
    plate[7] = 0.3;
    const auto o = small(96, 4);
    const double r = interior_sum(render(s, sys, plate, o), 16);
    const double w = interior_sum(render_warp(s, sys, plate, o), 16);
    CHECK(r == doctest::Approx(w).epsilon(0.01));
}

TEST_CASE("denser PSF grids converge to the dense reference") {
    const auto& sys = default_system();
    const Scene s = textured_scene(6);
    const zernike::Expansion zero(4, 5.0);
    const Image ref = render(s, sys, zero, small(64, 16));
    double prev = 1e300;
    for (int g : {2, 4, 8}) {
        const double d = diff_norm(render(s, sys, zero, small(64, g)), ref);
        CHECK(d < prev);
        prev = d;
    }
}

TEST_CASE("render stack: one image per pattern, sharpest where the mask says") {
    const auto& sys = default_system();
    optimize::GridSpec g{3, 3, 0.0};
    optimize::Schedule sch;
    sch.max_iterations = 80;
    const auto j = optimize::optimize_joint(sys, 3, g, sch, 2);
    const Scene s = textured_scene(3, 512);
    const auto o = small(96, 5);
    const FoveaStack st = render_stack(s, sys, j.set, o);
    REQUIRE(st.images.size() == 3);
    for (const auto& im : st.images) CHECK(im.same_shape(st.images.front()));

    // each image's sharpest cell (relative to the stack) lies in its winning region
    const int cell = 96 / 3;
    int agree = 0, counted = 0;
    for (int n = 0; n < 3; ++n) {
        int best = -1;
        double best_ratio = -1.0;
        for (int c = 0; c < 9; ++c) {
            const int x0 = (c % 3) * cell, y0 = (c / 3) * cell;
            double total = 0.0;
            for (int k = 0; k < 3; ++k) total += local_sharpness(st.images[static_cast<std::size_t>(k)], x0, y0, cell);
            const double ratio = local_sharpness(st.images[static_cast<std::size_t>(n)], x0, y0, cell) / total;
            if (ratio > best_ratio) {
                best_ratio = ratio;
                best = c;
            }
        }
        bool wins_somewhere = false;
        for (int v : j.stack.n_star) wins_somewhere = wins_somewhere || v == n;
        if (!wins_somewhere) continue;
        ++counted;
        agree += j.stack.n_star[static_cast<std::size_t>(best)] == n;
    }
    REQUIRE(counted > 0);
    CHECK(static_cast<double>(agree) / counted >= 0.8);
}

TEST_CASE("defocus-only stack keeps corner blur") {
    const auto& sys = default_system();
    const Scene s = textured_scene(4, 512);
    const auto o = small(128, 5);
    const Image truth = render_warp(s, sys, zernike::Expansion(4, 5.0), o);
    for (double w4 : {-0.4, 0.0, 0.4}) {
        zernike::Expansion e(4, 5.0);
        e[zernike::kDefocus] = w4;
        const Image img = render(s, sys, e, o);
        CHECK(local_sharpness(img, 0, 0, 24) < 0.8 * local_sharpness(truth, 0, 0, 24));
    }
}

TEST_CASE("scene loading") {
    const auto dir = std::filesystem::temp_directory_path() / "fovea_scene_test";
    std::filesystem::create_directories(dir);
    write_png(dir / "s.png", checkerboard_texture(16, 16, 2));
    std::ofstream(dir / "s.json") << R"({"extent_mm": [40, 30], "depth_mm": 600})";
    const Scene s = Scene::load(dir / "s.png", dir / "s.json");
    CHECK(s.extent_x_mm == 40.0);
    CHECK(s.extent_y_mm == 30.0);
    CHECK(s.depth_mm == 600.0);
    CHECK(s.texture.channels == 3);
    std::ofstream(dir / "bad.json") << R"({"extent_mm": [40]})";
    CHECK_THROWS_AS(Scene::load(dir / "s.png", dir / "bad.json"), InvalidArgument);
    CHECK_THROWS_AS(Scene::load(dir / "s.png", dir / "missing.json"), IoError);
    std::filesystem::remove_all(dir);
}
