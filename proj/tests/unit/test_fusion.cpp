#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fovea/common.hpp"
#include "fovea/fusion.hpp"
#include "fovea/imaging.hpp"

using namespace fovea;
using namespace fovea::fusion;

namespace {

Image reference(int size = 96, std::uint64_t seed = 3) { return imaging::natural_texture(size, size, seed); }

// Left half sharp / right half blurred, and the mirror image.
std::pair<Image, Image> half_blurred(const Image& ref, double sigma = 2.5) {
    const Image blurred = gaussian_blur(ref, sigma);
    Image left = ref, right = ref;
    for (int c = 0; c < ref.channels; ++c)
        for (int y = 0; y < ref.height; ++y)
            for (int x = 0; x < ref.width; ++x) {
                if (x >= ref.width / 2) left.at(c, y, x) = blurred.at(c, y, x);
                else right.at(c, y, x) = blurred.at(c, y, x);
            }
    return {left, right};
}

Image constant(double v, int size = 32) { return Image(size, size, 3, v); }

}  // namespace

TEST_CASE("sharpness map") {
    const Image flat = constant(0.4);
    for (double v : sharpness_map(flat, 2.0).data) CHECK(v == 0.0);

    Image step(32, 32, 1, 0.0);
    for (int y = 0; y < 32; ++y)
        for (int x = 16; x < 32; ++x) step.at(0, y, x) = 1.0;
    const Image s = sharpness_map(step, 0.0);
    for (int y = 0; y < 32; ++y) {
        CHECK(s.at(0, y, 15) > 0.0);
        CHECK(s.at(0, y, 16) > 0.0);
        CHECK(s.at(0, y, 5) == 0.0);
        CHECK(s.at(0, y, 25) == 0.0);
    }
    const Image ref = reference();
    const Image blurred = gaussian_blur(ref, 1.5);
    const auto total = [](const Image& m) { return std::accumulate(m.data.begin(), m.data.end(), 0.0); };
    CHECK(total(sharpness_map(blurred, 3.0)) < total(sharpness_map(ref, 3.0)));
    for (int scale : {1, 2, 4})
        for (double v : sharpness_map(ref, 4.0, scale).data) {
            CHECK(v >= 0.0);
            CHECK(std::isfinite(v));
        }
    CHECK_THROWS_AS(sharpness_map(ref, -1.0), InvalidArgument);
    CHECK_THROWS_AS(sharpness_map(ref, 1.0, 0), InvalidArgument);
}

TEST_CASE("sharpness weights form a partition of unity") {
    const Image ref = reference();
    const auto [l, r] = half_blurred(ref);
    const std::vector<Image> stack{l, r, constant(0.5, ref.width)};
    const auto w = sharpness_weights(stack, 3.0);
    for (std::size_t i = 0; i < w[0].data.size(); ++i) {
        double s = 0.0;
        for (const auto& m : w) {
            CHECK(m.data[i] >= 0.0);
            CHECK(m.data[i] <= 1.0);
            s += m.data[i];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    // flat everywhere: uniform weights
    const std::vector<Image> flat{constant(0.2), constant(0.7)};
    for (const auto& m : sharpness_weights(flat, 3.0))
        for (double v : m.data) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("fuse_sharpness") {
    const Image ref = reference();
    const std::vector<Image> same{ref, ref, ref};
    const auto id = fuse_sharpness(same, 3.0);
    CHECK(psnr(id.fused, ref) > 90.0);
    for (double v : id.index_map.data) CHECK(v == 0.0);

    const auto [l, r] = half_blurred(ref);
    const std::vector<Image> stack{l, r};
    const auto f = fuse_sharpness(stack, 2.0);
    CHECK(psnr(f.fused, ref) > psnr(l, ref));
    CHECK(psnr(f.fused, ref) > psnr(r, ref));
    // index map picks the sharp side away from the seam
    CHECK(f.index_map.at(0, 48, 10) == 0.0);
    CHECK(f.index_map.at(0, 48, 85) == 1.0);

    // bounded by the stack, and independent of stack order
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < ref.height; ++y)
            for (int x = 0; x < ref.width; ++x) {
                const double a = l.at(c, y, x), b = r.at(c, y, x);
                CHECK(f.fused.at(c, y, x) >= std::min(a, b) - 1e-12);
                CHECK(f.fused.at(c, y, x) <= std::max(a, b) + 1e-12);
            }
    const std::vector<Image> swapped{r, l};
    const auto g = fuse_sharpness(swapped, 2.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < g.fused.data.size(); ++i) worst = std::max(worst, std::abs(g.fused.data[i] - f.fused.data[i]));
    CHECK(worst < 1e-12);

    CHECK_THROWS_AS(fuse_sharpness(std::vector<Image>{ref}, 2.0), InvalidArgument);
    CHECK_THROWS_AS(fuse_sharpness(std::vector<Image>{ref, constant(0.1)}, 2.0), InvalidArgument);
}

TEST_CASE("fuse_mask") {
    std::vector<Image> stack;
    for (double v : {0.1, 0.5, 0.9}) stack.push_back(constant(v, 8));
    const std::vector<int> k2(4, 2);
    CHECK(fuse_mask(stack, k2, 2, 2).data == stack[2].data);
    const std::vector<int> checker{0, 1, 1, 0};
    const Image m = fuse_mask(stack, checker, 2, 2);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) CHECK(m.at(1, y, x) == ((x < 4) == (y < 4) ? 0.1 : 0.5));
    const std::vector<int> bad{0, 3, 1, 0};
    CHECK_THROWS_AS(fuse_mask(stack, bad, 2, 2), InvalidArgument);
    CHECK_THROWS_AS(fuse_mask(stack, checker, 3, 2), InvalidArgument);
}

TEST_CASE("fuse_pyramid") {
    const Image ref = reference(128);
    const std::vector<Image> same{ref, ref};
    CHECK(psnr(fuse_pyramid(same, 4), ref) > 90.0);
    const auto [l, r] = half_blurred(ref);
    const std::vector<Image> stack{l, r};
    const double p = psnr(fuse_pyramid(stack, 4), ref);
    CHECK(std::abs(p - psnr(fuse_sharpness(stack, 2.0).fused, ref)) < 3.0);
    // single level: per-pixel selection by local Laplacian response
    const Image one = fuse_pyramid(stack, 1);
    for (std::size_t i = 0; i < one.data.size(); ++i)
        CHECK((one.data[i] == l.data[i] || one.data[i] == r.data[i]));
    CHECK_THROWS_AS(fuse_pyramid(stack, 0), InvalidArgument);
    CHECK_THROWS_AS(fuse_pyramid(stack, 8), InvalidArgument);
}

TEST_CASE("metrics") {
    const Image ref = reference();
    const Metrics m = metrics(ref, ref);
    CHECK(m.psnr_db == kPsnrCap);
    CHECK(m.ssim == doctest::Approx(1.0));
    const auto [l, r] = half_blurred(ref);
    CHECK(ssim(l, ref) == doctest::Approx(ssim(ref, l)).epsilon(1e-12));
    CHECK(ssim(l, ref) < 1.0);
    CHECK(psnr(l, ref) < psnr(fuse_sharpness(std::vector<Image>{l, r}, 2.0).fused, ref));
    // PSNR from a known MSE
    Image a = constant(0.5), b = constant(0.6);
    CHECK(psnr(a, b) == doctest::Approx(20.0));
    CHECK_THROWS_AS(psnr(a, constant(0.5, 16)), InvalidArgument);
    CHECK_THROWS_AS(ssim(constant(0.5, 8), constant(0.5, 8)), InvalidArgument);
}
