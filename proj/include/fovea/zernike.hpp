#pragma once

#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace fovea::zernike {

struct RadialAzimuthal {
    int n = 0;  ///< radial order
    int m = 0;  ///< azimuthal frequency, |m| <= n, n-|m| even
};

/// OSA/ANSI single index j = (n(n+2)+m)/2. Throws InvalidArgument on a bad pair.
int osa_index(int n, int m);
RadialAzimuthal osa_to_nm(int j);

/// Number of terms for radial orders 0..max_order.
constexpr int term_count(int max_order) { return (max_order + 1) * (max_order + 2) / 2; }

inline constexpr int kMaxSupportedOrder = 7;
inline constexpr int kPiston = 0;
inline constexpr int kTiltY = 1;  // (1,-1)
inline constexpr int kTiltX = 2;  // (1, 1)
inline constexpr int kDefocus = 4;

/// OSA normalization sqrt((2 - delta_m0)(n + 1)); each term has unit RMS over the disk.
double normalization(int n, int m);

struct Slope {
    double dx = 0.0;
    double dy = 0.0;
};

/// Zernike terms up to a radial order, stored as bivariate polynomials in the
/// normalized Cartesian coordinates u = x/R, v = y/R. The polynomial form is
/// regular at the origin, so gradients need no polar special case.
class Basis {
public:
    explicit Basis(int max_order);

    /// Shared immutable instance per order.
    static const Basis& get(int max_order);

    int max_order() const { return max_order_; }
    int size() const { return static_cast<int>(terms_.size()); }

    /// Values of every term at (u, v). `out` must hold size() entries.
    void values(double u, double v, std::span<double> out) const;
    /// d/du and d/dv of every term at (u, v).
    void gradients(double u, double v, std::span<double> du, std::span<double> dv) const;

    double value(int j, double u, double v) const;

private:
    struct Monomial {
        int a = 0;  // power of u
        int b = 0;  // power of v
        double c = 0.0;
    };
    struct Term {
        std::vector<Monomial> value;
        std::vector<Monomial> du;
        std::vector<Monomial> dv;
    };

    void fill_powers(double u, double v, double* pu, double* pv) const;

    int max_order_;
    std::vector<Term> terms_;
};

/// Wavefront (OPD) surface: sum_k w_k Z_k(rho, phi) over an aperture of radius R.
/// Coefficients are micrometers of OPD; lateral lengths are millimeters.
class Expansion {
public:
    Expansion() : Expansion(4, 5.0) {}
    Expansion(int max_order, double aperture_radius_mm);
    Expansion(int max_order, double aperture_radius_mm, std::vector<double> coeffs_um);

    int max_order() const { return max_order_; }
    double aperture_radius_mm() const { return aperture_radius_mm_; }
    int size() const { return static_cast<int>(coeffs_.size()); }

    std::span<const double> coeffs() const { return coeffs_; }
    std::span<double> coeffs() { return coeffs_; }
    double operator[](int j) const { return coeffs_[static_cast<std::size_t>(j)]; }
    double& operator[](int j) { return coeffs_[static_cast<std::size_t>(j)]; }

    const Basis& basis() const { return Basis::get(max_order_); }

    /// Tilt coefficients are exactly zero.
    bool optimization_ready() const;
    void clear_tilt();

    /// OPD at normalized radius rho in [0, 1] and azimuth phi. Throws OutsideAperture for rho > 1.
    double eval(double rho, double phi) const;
    /// OPD at a Cartesian point in millimeters.
    double eval_xy(double x_mm, double y_mm) const;
    /// Cartesian gradient in micrometers of OPD per millimeter.
    Slope grad_cartesian(double x_mm, double y_mm) const;

    /// Expansion of the surface rotated counter-clockwise by `angle` radians.
    Expansion rotated(double angle) const;

    bool operator==(const Expansion&) const = default;

private:
    void check_inside(double u, double v) const;

    int max_order_;
    double aperture_radius_mm_;
    std::vector<double> coeffs_;
};

struct Sample {
    double x_mm = 0.0;
    double y_mm = 0.0;
    double opd_um = 0.0;
};

struct FitResult {
    Expansion expansion;
    double residual_rms_um = 0.0;
};

/// Least-squares fit of samples inside the aperture. Throws DegenerateFit when
/// there are fewer samples than terms or the design is rank deficient.
FitResult fit(std::span<const Sample> samples, int max_order, double aperture_radius_mm);

void to_json(nlohmann::json& j, const Expansion& e);
void from_json(const nlohmann::json& j, Expansion& e);

}  // namespace fovea::zernike
