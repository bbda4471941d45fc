#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "fovea/common.hpp"
#include "fovea/zernike.hpp"
#include "support.hpp"

using namespace fovea;
using namespace fovea::zernike;

namespace {

Expansion random_expansion(std::mt19937_64& rng, int order = 4, double r = 5.0) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Expansion e(order, r);
    for (double& c : e.coeffs()) c = nd(rng);
    return e;
}

Expansion unit(int j, int order = 4, double r = 5.0) {
    Expansion e(order, r);
    e[j] = 1.0;
    return e;
}

// Oracle: textbook radial polynomial sum in polar form.
double zernike_polar(int n, int m, double rho, double phi) {
    const int am = std::abs(m);
    double rad = 0.0;
    for (int k = 0; k <= (n - am) / 2; ++k) {
        const double num = std::tgamma(n - k + 1.0) * ((k % 2) ? -1.0 : 1.0);
        const double den = std::tgamma(k + 1.0) * std::tgamma((n + am) / 2.0 - k + 1.0) *
                           std::tgamma((n - am) / 2.0 - k + 1.0);
        rad += num / den * std::pow(rho, n - 2 * k);
    }
    const double ang = m > 0 ? std::cos(am * phi) : (m < 0 ? std::sin(am * phi) : 1.0);
    return normalization(n, m) * rad * ang;
}

}  // namespace

TEST_CASE("osa index table") {
    CHECK(osa_index(0, 0) == 0);
    CHECK(osa_index(2, 0) == 4);
    CHECK(osa_index(4, 4) == 14);
    // enumerate the table up to order 7: consecutive, invertible
    int expect = 0;
    for (int n = 0; n <= 7; ++n)
        for (int m = -n; m <= n; m += 2) {
            CHECK(osa_index(n, m) == expect);
            const auto nm = osa_to_nm(expect);
            CHECK(nm.n == n);
            CHECK(nm.m == m);
            ++expect;
        }
    CHECK(expect == term_count(7));
    CHECK_THROWS_AS(osa_index(2, 1), InvalidArgument);
    CHECK_THROWS_AS(osa_index(1, 3), InvalidArgument);
    CHECK_THROWS_AS(osa_index(-1, 0), InvalidArgument);
}

TEST_CASE("expansion invariants") {
    CHECK(Expansion(4, 5.0).size() == 15);
    CHECK(Expansion(7, 5.0).size() == 36);
    CHECK_THROWS_AS(Expansion(4, 0.0), InvalidArgument);
    CHECK_THROWS_AS(Expansion(4, 5.0, std::vector<double>(14, 0.0)), InvalidArgument);
    Expansion e = unit(kTiltX);
    CHECK_FALSE(e.optimization_ready());
    e.clear_tilt();
    CHECK(e.optimization_ready());
}

TEST_CASE("eval examples") {
    CHECK(unit(0).eval(0.3, 1.1) == doctest::Approx(1.0));
    CHECK(unit(0).eval(1.0, -2.0) == doctest::Approx(1.0));
    CHECK(unit(kDefocus).eval(0.0, 0.0) == doctest::Approx(-std::sqrt(3.0)).epsilon(1e-12));
    CHECK(unit(kDefocus).eval(1.0, 0.7) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-12));
    CHECK_THROWS_AS(unit(0).eval(1.01, 0.0), OutsideAperture);
    CHECK_THROWS_AS(unit(0).eval_xy(5.1, 0.0), OutsideAperture);
}

TEST_CASE("polynomial form matches polar oracle") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ur(0.0, 1.0), ua(-std::numbers::pi, std::numbers::pi);
    for (int j = 0; j < term_count(7); ++j) {
        const auto nm = osa_to_nm(j);
        const Expansion e = unit(j, 7);
        for (int t = 0; t < 10; ++t) {
            const double rho = ur(rng), phi = ua(rng);
            CHECK(e.eval(rho, phi) == doctest::Approx(zernike_polar(nm.n, nm.m, rho, phi)).epsilon(1e-9));
        }
    }
}

TEST_CASE("orthonormality on ring quadrature") {
    // Gauss-Legendre would be tighter; midpoint rings with dense azimuth suffice for 1e-3.
    const int rings = 512, az = 256;
    const Basis& b = Basis::get(4);
    const int k = b.size();
    std::vector<double> gram(static_cast<std::size_t>(k * k), 0.0), v(static_cast<std::size_t>(k));
    for (int i = 0; i < rings; ++i) {
        const double rho = (i + 0.5) / rings;
        const double w = rho / rings * (2.0 * std::numbers::pi / az);
        for (int a = 0; a < az; ++a) {
            const double phi = 2.0 * std::numbers::pi * (a + 0.5) / az;
            b.values(rho * std::cos(phi), rho * std::sin(phi), v);
            for (int p = 0; p < k; ++p)
                for (int q = 0; q < k; ++q) gram[static_cast<std::size_t>(p * k + q)] += w * v[p] * v[q];
        }
    }
    double worst = 0.0;
    for (int p = 0; p < k; ++p)
        for (int q = 0; q < k; ++q)
            worst = std::max(worst, std::abs(gram[static_cast<std::size_t>(p * k + q)] / std::numbers::pi - (p == q)));
    CHECK(worst < 1e-3);
}

TEST_CASE("grad_cartesian") {
    CHECK(unit(0).grad_cartesian(1.3, -2.0).dx == 0.0);
    CHECK(unit(0).grad_cartesian(1.3, -2.0).dy == 0.0);
    const Slope s = unit(kDefocus).grad_cartesian(1.0, 0.0);
    CHECK(s.dx == doctest::Approx(4.0 * std::sqrt(3.0) / 25.0).epsilon(1e-12));
    CHECK(s.dy == doctest::Approx(0.0));

    // finite at the origin for every term
    const Expansion all(7, 5.0, std::vector<double>(36, 1.0));
    const Slope o = all.grad_cartesian(0.0, 0.0);
    CHECK(std::isfinite(o.dx));
    CHECK(std::isfinite(o.dy));

    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> ur(0.0, 0.9), ua(-std::numbers::pi, std::numbers::pi);
    const double h = 1e-5;
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const Expansion e = random_expansion(rng);
        const double r = 5.0 * ur(rng), a = ua(rng);
        const double x = r * std::cos(a), y = r * std::sin(a);
        const Slope g = e.grad_cartesian(x, y);
        const double fx = (e.eval_xy(x + h, y) - e.eval_xy(x - h, y)) / (2 * h);
        const double fy = (e.eval_xy(x, y + h) - e.eval_xy(x, y - h)) / (2 * h);
        const double scale = std::max({std::abs(g.dx), std::abs(g.dy), 1e-3});
        worst = std::max({worst, std::abs(g.dx - fx) / scale, std::abs(g.dy - fy) / scale});
    }
    CHECK(worst < 1e-6);
    CHECK_THROWS_AS(unit(kDefocus).grad_cartesian(4.0, 4.0), OutsideAperture);
}

TEST_CASE("rotation") {
    std::mt19937_64 rng(5);
    const Expansion e = random_expansion(rng);
    const Expansion r = e.rotated(0.7);
    for (double rho : {0.2, 0.6, 0.95})
        for (double phi : {-2.0, 0.3, 1.9}) CHECK(r.eval(rho, phi + 0.7) == doctest::Approx(e.eval(rho, phi)).epsilon(1e-10));
}

TEST_CASE("fit") {
    std::mt19937_64 rng(7);
    const Expansion truth = random_expansion(rng);
    std::vector<Sample> grid;
    for (int i = 0; i < 64; ++i)
        for (int j = 0; j < 64; ++j) {
            const double x = -5.0 + 10.0 * (j + 0.5) / 64, y = -5.0 + 10.0 * (i + 0.5) / 64;
            if (x * x + y * y <= 25.0) grid.push_back({x, y, truth.eval_xy(x, y)});
        }
    const FitResult f = fit(grid, 4, 5.0);
    for (int j = 0; j < truth.size(); ++j) CHECK(f.expansion[j] == doctest::Approx(truth[j]).epsilon(1e-8));
    CHECK(f.residual_rms_um < 1e-8);

    // noise sigma 0.01: Monte Carlo over 100 seeds
    double sq = 0.0;
    int n = 0;
    for (int seed = 0; seed < 100; ++seed) {
        std::mt19937_64 r2(static_cast<std::uint64_t>(seed));
        std::normal_distribution<double> nd(0.0, 0.01);
        auto noisy = grid;
        for (auto& s : noisy) s.opd_um += nd(r2);
        const FitResult g = fit(noisy, 4, 5.0);
        for (int j = 0; j < truth.size(); ++j, ++n) sq += std::pow(g.expansion[j] - truth[j], 2);
    }
    CHECK(std::sqrt(sq / n) < 0.01);

    std::vector<Sample> few(grid.begin(), grid.begin() + 10);
    CHECK_THROWS_AS(fit(few, 4, 5.0), DegenerateFit);
    std::vector<Sample> line;
    for (int i = 0; i < 50; ++i) line.push_back({-4.0 + 0.16 * i, 0.0, 1.0});
    CHECK_THROWS_AS(fit(line, 4, 5.0), DegenerateFit);
}

TEST_CASE("json round trip") {
    std::mt19937_64 rng(9);
    const Expansion e = random_expansion(rng);
    const nlohmann::json j = e;
    CHECK(j.contains("max_order"));
    CHECK(j.contains("aperture_radius_mm"));
    CHECK(j.contains("coeffs_um"));
    CHECK(j.get<Expansion>() == e);
}
