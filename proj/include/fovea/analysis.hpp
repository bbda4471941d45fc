#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "fovea/optics.hpp"
#include "fovea/zernike.hpp"

namespace fovea::analysis {

using optics::Vec2;
using optics::Vec3;

inline constexpr int kDefaultRings = 6;  // 127 rays per wavelength

/// Mean radial deviation from the common centroid, averaged over wavelengths.
/// Input: sensor hits (mm) of the alive rays, one list per wavelength. Returns um.
double spot_size_um(std::span<const std::vector<Vec2>> hits_per_wavelength, Vec2* centroid_mm = nullptr);

struct SpotResult {
    double r_um = 0.0;
    Vec2 centroid_mm = Vec2::Zero();
    int alive = 0;
    int total = 0;
    bool vignetted = false;  ///< fewer than half of the rays reached the sensor
};

SpotResult rms_spot(const optics::OpticalSystem& system, const zernike::Expansion& plate, const Vec3& object_point,
                    int rings = kDefaultRings);

/// Spot evaluation at a fixed set of object points with cached plate-side ray
/// data, plus the analytic gradient of r with respect to the plate coefficients.
class SpotEvaluator {
public:
    SpotEvaluator(const optics::OpticalSystem& system, std::vector<Vec3> object_points, int max_order,
                  int rings = kDefaultRings);

    std::size_t size() const { return points_.size(); }
    int term_count() const { return terms_; }
    const std::vector<Vec3>& object_points() const { return points_; }
    const optics::OpticalSystem& system() const { return *system_; }

    /// Spot size at point i. If grad is non-null it receives dr/dw (um per um).
    SpotResult evaluate(std::size_t i, const zernike::Expansion& plate, std::span<double> grad = {}) const;

    /// Spot sizes for all points; vignetted points report NaN.
    std::vector<double> evaluate_all(const zernike::Expansion& plate) const;

private:
    struct PlateRay {
        double x, y, alpha, beta;
    };
    const optics::OpticalSystem* system_;
    std::vector<Vec3> points_;
    int max_order_;
    int terms_;
    int rays_per_point_;
    std::vector<PlateRay> rays_;        // points x rays
    std::vector<double> basis_grad_;    // points x rays x 2 x terms, slope per um of coefficient
};

// ---------------------------------------------------------------- PSF / MTF

enum class PsfFrame { Sensor, Radial };

struct PsfOptions {
    int rays = 100000;  ///< per wavelength, rounded up to a full hexapolar pattern
    double pixel_pitch_um = 5.5;
    int support = 64;
    PsfFrame frame = PsfFrame::Radial;
};

struct Psf {
    int support = 0;
    double pixel_pitch_um = 0.0;
    std::array<std::vector<double>, 3> channels;  ///< row-major support x support, unit sum each
    Vec2 centroid_mm = Vec2::Zero();
    double frame_angle_rad = 0.0;  ///< x axis of the image in sensor coordinates
    double field_angle_deg = 0.0;
    double rho = 0.0;

    double at(int channel, int row, int col) const {
        return channels[static_cast<std::size_t>(channel)][static_cast<std::size_t>(row * support + col)];
    }
    /// Luminance-weighted second moment about the pixel grid center, um^2.
    double second_moment_um2() const;
};

Psf psf_render(const optics::OpticalSystem& system, const zernike::Expansion& plate, const Vec3& object_point,
               const PsfOptions& options = {});

inline constexpr std::array<double, 3> kLuminanceWeights{0.0722, 0.7152, 0.2126};  // blue, green, red order

struct MtfCurve {
    std::vector<double> frequencies_lpmm;
    std::vector<double> sagittal;
    std::vector<double> tangential;
    std::vector<double> mean;
    double field_angle_deg = 0.0;
    double rho = 0.0;
};

/// Channels are ordered like the system wavelengths (short to long).
MtfCurve mtf_from_psf(const Psf& psf);

struct Mtf50 {
    double lpmm = 0.0;
    bool saturated = false;
};

Mtf50 mtf50(const MtfCurve& curve);

// ---------------------------------------------------------------- coverage

struct PolarGrid {
    int rho_nodes = 11;    ///< rho_i = i / (rho_nodes - 1)
    int theta_nodes = 24;  ///< theta_j = -pi + 2 pi j / theta_nodes
    double rho(int i) const { return rho_nodes > 1 ? static_cast<double>(i) / (rho_nodes - 1) : 0.0; }
    double theta(int j) const;
};

struct CoverageRegion {
    bool found = false;
    double rho_min = 0.0, rho_max = 0.0;
    double theta_min = 0.0, theta_max = 0.0;  ///< may wrap; extent is theta_max - theta_min
    double theta_extent = 0.0;
    double area = 0.0;  ///< in normalized units (unit disk area = pi)
    int nodes = 0;
};

struct CoverageMap {
    PolarGrid grid;
    std::vector<double> mtf50;  ///< rho-major: [i * theta_nodes + j]
    double threshold_lpmm = 0.0;
    CoverageRegion region;

    double at(int i, int j) const { return mtf50[static_cast<std::size_t>(i * grid.theta_nodes + j)]; }
    /// Bilinear in (rho, theta) with periodic theta.
    double interpolate(double rho, double theta) const;
};

struct CoverageOptions {
    PolarGrid grid;
    double threshold_lpmm = 30.0;
    double depth_mm = 0.0;  ///< 0 means the system object distance
    PsfOptions psf{4000, 5.5, 64, PsfFrame::Radial};
    /// Region is the connected component above threshold containing this point.
    /// Without a target every node above threshold counts.
    std::optional<std::pair<double, double>> target;
};

CoverageMap coverage_map(const optics::OpticalSystem& system, const zernike::Expansion& plate,
                         const CoverageOptions& options);

/// Thresholded region of an existing map, for a different threshold or target.
CoverageRegion threshold_region(const CoverageMap& map, double threshold_lpmm,
                                std::optional<std::pair<double, double>> target);

/// A pattern optimized at (rho, theta = 0) with its MTF50 map.
struct LibraryEntry {
    double rho = 0.0;
    zernike::Expansion pattern;
    CoverageMap map;
};

struct BudgetOptions {
    int lattice = 16;      ///< sensor cells per side
    int rotations = 36;    ///< candidate azimuths for rho > 0 entries
};

struct ImagesNeeded {
    int count = 0;
    int cells = 0;
    int uncoverable = 0;
    /// (library index, rotation angle) for each chosen image.
    std::vector<std::pair<int, double>> chosen;
};

/// Greedy set cover of a square-sensor cell lattice by rotated library patterns.
ImagesNeeded images_needed(const optics::OpticalSystem& system, double threshold_lpmm,
                           std::span<const LibraryEntry> library, const BudgetOptions& options = {});

}  // namespace fovea::analysis
