#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "fovea/image.hpp"
#include "fovea/imaging.hpp"
#include "fovea/optics.hpp"
#include "fovea/zernike.hpp"

namespace fovea::calibrate {

using optics::Assembly;
using optics::Vec2;
using optics::Vec3;

/// Known translation-stage move applied to the scene: (dx, dy) in the object
/// plane, dz away from the plate. All mm.
struct StageOffset {
    double dx_mm = 0.0;
    double dy_mm = 0.0;
    double dz_mm = 0.0;
};

/// Assembly seen by the renderer when the stage sits at `offset`.
Assembly staged(const Assembly& a, const StageOffset& offset);

struct Capture {
    Image image;
    int pattern = 0;  ///< index into Problem::patterns
    StageOffset offset;
};

/// Dot-grid target capture used to initialize c_img.
struct Target {
    imaging::Scene scene;
    Image image;
    int pattern = 0;
};

struct Problem {
    optics::SystemConfig config;  ///< assembly holds the rough initial measurements
    imaging::Scene scene;
    std::vector<zernike::Expansion> patterns;
    std::vector<Capture> captures;
    imaging::RenderOptions render;
    std::optional<Target> target;

    /// At least two distinct patterns and two distinct stage positions.
    void validate() const;
};

/// Renders `scene` through the system with `truth` for every pattern x offset.
std::vector<Capture> synthesize_captures(const optics::SystemConfig& config, const Assembly& truth,
                                         const imaging::Scene& scene, const std::vector<zernike::Expansion>& patterns,
                                         const std::vector<StageOffset>& offsets,
                                         const imaging::RenderOptions& render);

/// Free parameter order: d_dpp, d_sensor, d_img, c_img.x, c_img.y.
inline constexpr int kParameters = 5;
using ParamVector = std::array<double, kParameters>;
ParamVector to_params(const Assembly& a);
Assembly from_params(const ParamVector& p);

struct Options {
    std::array<bool, kParameters> free{true, true, true, true, true};
    ParamVector initial_step{2.0, 1.0, 5.0, 0.25, 0.25};  ///< line-search half widths, mm
    ParamVector tolerance{0.02, 0.005, 0.1, 0.01, 0.01};  ///< line-search resolution, mm
    int max_sweeps = 12;
    double min_gain = 1e-7;      ///< stop when a sweep raises mean SSIM by less
    double abort_ssim = 0.3;
    bool homography_init = true;  ///< needs Problem::target
};

struct Result {
    Assembly initial;
    std::optional<Assembly> homography;  ///< after the c_img initialization
    Assembly final;
    std::vector<double> ssim_trace;      ///< mean SSIM after each accepted step
    std::vector<double> per_image_ssim;  ///< final, one per capture
    int evaluations = 0;
    int sweeps = 0;
};

/// Maximizes mean SSIM between renders and captures over the free parameters
/// with Powell's direction-set method and Brent line searches, switching to
/// line searches along the Newton direction of a finite-difference quadratic
/// model while those keep improving.
/// Throws OptimizationFailed when the best mean SSIM stays below abort_ssim.
Result calibrate(const Problem& problem, const Options& options = {});

/// Mean SSIM (and per-capture values) for a candidate assembly.
double mean_ssim(const Problem& problem, const Assembly& a, std::vector<double>* per_image = nullptr);

// ---------------------------------------------------------------- target geometry

/// Intensity-weighted centroids (pixels) of dark blobs; blobs touching the
/// border or smaller than `min_pixels` are dropped.
std::vector<Vec2> detect_dots(const Image& img, int min_pixels = 3);

/// 3x3 projective map with H(2,2) = 1, fitted by normalized DLT (>= 4 pairs).
Eigen::Matrix3d fit_homography(const std::vector<Vec2>& from, const std::vector<Vec2>& to);
Vec2 apply_homography(const Eigen::Matrix3d& h, const Vec2& p);

/// c_img estimate from the target capture: render the target with `a`,
/// match dots, fit a homography and convert the shift at the scene center
/// back to the object plane. `a` with the refined c_img.
Assembly homography_c_img(const Problem& problem, const Assembly& a, int iterations = 2);

void to_json(nlohmann::json& j, const Result& r);

}  // namespace fovea::calibrate
