#include "fovea/zernike.hpp"

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fovea/common.hpp"

namespace fovea::zernike {

namespace {

constexpr double kRimTolerance = 1e-12;

double factorial(int n) {
    double r = 1.0;
    for (int i = 2; i <= n; ++i) r *= i;
    return r;
}

double binomial(int n, int k) { return factorial(n) / (factorial(k) * factorial(n - k)); }

// Dense coefficient table c[a][b] of u^a v^b.
using Poly = std::vector<std::vector<double>>;

Poly make_poly(int degree) {
    return Poly(static_cast<std::size_t>(degree + 1), std::vector<double>(static_cast<std::size_t>(degree + 1), 0.0));
}

Poly multiply(const Poly& p, const Poly& q) {
    const int dp = static_cast<int>(p.size()) - 1;
    const int dq = static_cast<int>(q.size()) - 1;
    Poly r = make_poly(dp + dq);
    for (int a = 0; a <= dp; ++a)
        for (int b = 0; b <= dp; ++b) {
            if (p[a][b] == 0.0) continue;
            for (int c = 0; c <= dq; ++c)
                for (int d = 0; d <= dq; ++d) r[a + c][b + d] += p[a][b] * q[c][d];
        }
    return r;
}

// (u^2 + v^2)^p
Poly radial_power(int p) {
    Poly r = make_poly(2 * p);
    for (int q = 0; q <= p; ++q) r[2 * (p - q)][2 * q] = binomial(p, q);
    return r;
}

// Re or Im of (u + i v)^k
Poly angular(int k, bool imaginary) {
    Poly r = make_poly(k);
    for (int t = 0; t <= k; ++t) {
        const bool odd = (t % 2) == 1;
        if (odd != imaginary) continue;
        const int half = odd ? (t - 1) / 2 : t / 2;
        const double sign = (half % 2 == 0) ? 1.0 : -1.0;
        r[k - t][t] = sign * binomial(k, t);
    }
    return r;
}

Poly term_poly(int n, int m) {
    const int am = std::abs(m);
    const Poly ang = angular(am, m < 0);
    Poly total = make_poly(n);
    for (int s = 0; s <= (n - am) / 2; ++s) {
        const double c = ((s % 2 == 0) ? 1.0 : -1.0) * factorial(n - s) /
                         (factorial(s) * factorial((n + am) / 2 - s) * factorial((n - am) / 2 - s));
        const Poly part = multiply(radial_power((n - 2 * s - am) / 2), ang);
        for (std::size_t a = 0; a < part.size(); ++a)
            for (std::size_t b = 0; b < part.size(); ++b) total[a][b] += c * part[a][b];
    }
    const double norm = normalization(n, m);
    for (auto& row : total)
        for (auto& v : row) v *= norm;
    return total;
}

}  // namespace

int osa_index(int n, int m) {
    if (n < 0 || std::abs(m) > n || (n - std::abs(m)) % 2 != 0)
        throw InvalidArgument("invalid Zernike pair (n=" + std::to_string(n) + ", m=" + std::to_string(m) + ")");
    return (n * (n + 2) + m) / 2;
}

RadialAzimuthal osa_to_nm(int j) {
    if (j < 0) throw InvalidArgument("negative OSA index");
    const int n = static_cast<int>(std::ceil((-3.0 + std::sqrt(9.0 + 8.0 * j)) / 2.0 - 1e-12));
    return {n, 2 * j - n * (n + 2)};
}

double normalization(int n, int m) { return std::sqrt((m == 0 ? 1.0 : 2.0) * (n + 1)); }

Basis::Basis(int max_order) : max_order_(max_order) {
    if (max_order < 0 || max_order > kMaxSupportedOrder)
        throw InvalidArgument("Zernike order must be in [0, 7], got " + std::to_string(max_order));
    const int k = term_count(max_order);
    terms_.resize(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        const auto [n, m] = osa_to_nm(j);
        const Poly p = term_poly(n, m);
        Term& t = terms_[static_cast<std::size_t>(j)];
        for (int a = 0; a <= n; ++a)
            for (int b = 0; b <= n; ++b) {
                const double c = p[a][b];
                if (std::abs(c) < 1e-14) continue;
                t.value.push_back({a, b, c});
                if (a > 0) t.du.push_back({a - 1, b, c * a});
                if (b > 0) t.dv.push_back({a, b - 1, c * b});
            }
    }
}

const Basis& Basis::get(int max_order) {
    static std::mutex mutex;
    static std::map<int, std::unique_ptr<Basis>> cache;
    std::lock_guard lock(mutex);
    auto& slot = cache[max_order];
    if (!slot) slot = std::make_unique<Basis>(max_order);
    return *slot;
}

void Basis::fill_powers(double u, double v, double* pu, double* pv) const {
    pu[0] = 1.0;
    pv[0] = 1.0;
    for (int i = 1; i <= max_order_; ++i) {
        pu[i] = pu[i - 1] * u;
        pv[i] = pv[i - 1] * v;
    }
}

void Basis::values(double u, double v, std::span<double> out) const {
    std::array<double, kMaxSupportedOrder + 1> pu{}, pv{};
    fill_powers(u, v, pu.data(), pv.data());
    for (std::size_t j = 0; j < terms_.size(); ++j) {
        double s = 0.0;
        for (const auto& mono : terms_[j].value) s += mono.c * pu[mono.a] * pv[mono.b];
        out[j] = s;
    }
}

void Basis::gradients(double u, double v, std::span<double> du, std::span<double> dv) const {
    std::array<double, kMaxSupportedOrder + 1> pu{}, pv{};
    fill_powers(u, v, pu.data(), pv.data());
    for (std::size_t j = 0; j < terms_.size(); ++j) {
        double su = 0.0, sv = 0.0;
        for (const auto& mono : terms_[j].du) su += mono.c * pu[mono.a] * pv[mono.b];
        for (const auto& mono : terms_[j].dv) sv += mono.c * pu[mono.a] * pv[mono.b];
        du[j] = su;
        dv[j] = sv;
    }
}

double Basis::value(int j, double u, double v) const {
    std::array<double, kMaxSupportedOrder + 1> pu{}, pv{};
    fill_powers(u, v, pu.data(), pv.data());
    double s = 0.0;
    for (const auto& mono : terms_.at(static_cast<std::size_t>(j)).value) s += mono.c * pu[mono.a] * pv[mono.b];
    return s;
}

Expansion::Expansion(int max_order, double aperture_radius_mm)
    : Expansion(max_order, aperture_radius_mm, std::vector<double>(static_cast<std::size_t>(term_count(max_order)), 0.0)) {}

Expansion::Expansion(int max_order, double aperture_radius_mm, std::vector<double> coeffs_um)
    : max_order_(max_order), aperture_radius_mm_(aperture_radius_mm), coeffs_(std::move(coeffs_um)) {
    if (max_order < 0 || max_order > kMaxSupportedOrder)
        throw InvalidArgument("Zernike order must be in [0, 7], got " + std::to_string(max_order));
    if (!(aperture_radius_mm > 0.0)) throw InvalidArgument("aperture radius must be positive");
    if (static_cast<int>(coeffs_.size()) != term_count(max_order))
        throw InvalidArgument("expected " + std::to_string(term_count(max_order)) + " coefficients, got " +
                              std::to_string(coeffs_.size()));
}

bool Expansion::optimization_ready() const {
    return max_order_ < 1 || (coeffs_[kTiltY] == 0.0 && coeffs_[kTiltX] == 0.0);
}

void Expansion::clear_tilt() {
    if (max_order_ < 1) return;
    coeffs_[kTiltY] = 0.0;
    coeffs_[kTiltX] = 0.0;
}

void Expansion::check_inside(double u, double v) const {
    if (u * u + v * v > 1.0 + kRimTolerance) throw OutsideAperture("point outside the expansion aperture");
}

double Expansion::eval(double rho, double phi) const {
    if (rho < 0.0) throw InvalidArgument("negative normalized radius");
    if (rho > 1.0 + kRimTolerance) throw OutsideAperture("rho > 1");
    std::array<double, term_count(kMaxSupportedOrder)> z{};
    basis().values(rho * std::cos(phi), rho * std::sin(phi), std::span(z.data(), coeffs_.size()));
    double s = 0.0;
    for (std::size_t j = 0; j < coeffs_.size(); ++j) s += coeffs_[j] * z[j];
    return s;
}

double Expansion::eval_xy(double x_mm, double y_mm) const {
    const double u = x_mm / aperture_radius_mm_, v = y_mm / aperture_radius_mm_;
    check_inside(u, v);
    std::array<double, term_count(kMaxSupportedOrder)> z{};
    basis().values(u, v, std::span(z.data(), coeffs_.size()));
    double s = 0.0;
    for (std::size_t j = 0; j < coeffs_.size(); ++j) s += coeffs_[j] * z[j];
    return s;
}

Slope Expansion::grad_cartesian(double x_mm, double y_mm) const {
    const double u = x_mm / aperture_radius_mm_, v = y_mm / aperture_radius_mm_;
    check_inside(u, v);
    std::array<double, term_count(kMaxSupportedOrder)> gu{}, gv{};
    basis().gradients(u, v, std::span(gu.data(), coeffs_.size()), std::span(gv.data(), coeffs_.size()));
    Slope s;
    for (std::size_t j = 0; j < coeffs_.size(); ++j) {
        s.dx += coeffs_[j] * gu[j];
        s.dy += coeffs_[j] * gv[j];
    }
    s.dx /= aperture_radius_mm_;
    s.dy /= aperture_radius_mm_;
    return s;
}

Expansion Expansion::rotated(double angle) const {
    Expansion out = *this;
    for (int j = 0; j < size(); ++j) {
        const auto [n, m] = osa_to_nm(j);
        if (m <= 0) continue;
        const int js = osa_index(n, -m);
        const double a = coeffs_[static_cast<std::size_t>(j)];
        const double b = coeffs_[static_cast<std::size_t>(js)];
        const double c = std::cos(m * angle), s = std::sin(m * angle);
        out[j] = a * c - b * s;
        out[js] = a * s + b * c;
    }
    return out;
}

FitResult fit(std::span<const Sample> samples, int max_order, double aperture_radius_mm) {
    const int k = term_count(max_order);
    const auto n = static_cast<Eigen::Index>(samples.size());
    if (n < k)
        throw DegenerateFit("need at least " + std::to_string(k) + " samples, got " + std::to_string(samples.size()));
    if (!(aperture_radius_mm > 0.0)) throw InvalidArgument("aperture radius must be positive");
    const Basis& basis = Basis::get(max_order);

    Eigen::MatrixXd design(n, k);
    Eigen::VectorXd rhs(n);
    std::vector<double> row(static_cast<std::size_t>(k));
    for (Eigen::Index i = 0; i < n; ++i) {
        const Sample& s = samples[static_cast<std::size_t>(i)];
        const double u = s.x_mm / aperture_radius_mm, v = s.y_mm / aperture_radius_mm;
        if (u * u + v * v > 1.0 + kRimTolerance) throw OutsideAperture("fit sample outside aperture");
        basis.values(u, v, row);
        for (int j = 0; j < k; ++j) design(i, j) = row[static_cast<std::size_t>(j)];
        rhs(i) = s.opd_um;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    qr.setThreshold(1e-10);
    if (qr.rank() < k) throw DegenerateFit("sample geometry does not determine all Zernike terms");
    const Eigen::VectorXd w = qr.solve(rhs);
    const double rms = std::sqrt((design * w - rhs).squaredNorm() / static_cast<double>(n));
    return {Expansion(max_order, aperture_radius_mm, std::vector<double>(w.data(), w.data() + k)), rms};
}

void to_json(nlohmann::json& j, const Expansion& e) {
    j = nlohmann::json{{"max_order", e.max_order()},
                       {"aperture_radius_mm", e.aperture_radius_mm()},
                       {"coeffs_um", std::vector<double>(e.coeffs().begin(), e.coeffs().end())}};
}

void from_json(const nlohmann::json& j, Expansion& e) {
    e = Expansion(j.at("max_order").get<int>(), j.at("aperture_radius_mm").get<double>(),
                  j.at("coeffs_um").get<std::vector<double>>());
}

}  // namespace fovea::zernike
