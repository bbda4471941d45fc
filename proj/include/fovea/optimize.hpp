#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "fovea/analysis.hpp"
#include "fovea/optics.hpp"
#include "fovea/zernike.hpp"

namespace fovea::optimize {

using optics::Vec3;

/// Adam with a per-order step scale rate(n) = base_rate / order_decay^n.
struct Schedule {
    double base_rate = 0.5;  ///< um
    double order_decay = 3.1622776601683795;
    int max_iterations = 500;
    double tolerance = 1e-5;  ///< relative loss change over `window` iterations
    int window = 20;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    double rate(int order) const;
};

enum class Provenance { Single, RoiTiling, Joint, DefocusOnly };
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

/// Field sampling grid over the square sensor, row-major, rows along sensor y.
struct GridSpec {
    int rows = 32;
    int cols = 32;
    double depth_mm = 0.0;  ///< 0 means the system object distance
};

std::vector<Vec3> grid_field_points(const optics::OpticalSystem& system, const GridSpec& grid);

struct PatternSet {
    std::vector<zernike::Expansion> patterns;
    double depth_mm = 0.0;
    Provenance provenance = Provenance::Single;
    std::uint64_t seed = 0;
    GridSpec grid;

    int budget() const { return static_cast<int>(patterns.size()); }
};

void to_json(nlohmann::json& j, const PatternSet& s);
void from_json(const nlohmann::json& j, PatternSet& s);

struct SingleOptions {
    int max_order = 4;
    int rings = analysis::kDefaultRings;
    /// Restrict the free coefficients (OSA indices). Empty means every non-tilt term.
    std::vector<int> active;
    std::optional<zernike::Expansion> initial;
};

struct SingleResult {
    zernike::Expansion expansion;
    double initial_loss = 0.0;
    double final_loss = 0.0;  ///< best seen
    int iterations = 0;
    std::vector<double> history;  ///< loss per iteration
};

/// Minimizes the mean spot size over the given object points.
SingleResult optimize_single(const optics::OpticalSystem& system, std::span<const Vec3> points,
                             const Schedule& schedule = {}, const SingleOptions& options = {});

/// Defocus (OSA 4) only.
SingleResult optimize_defocus_only(const optics::OpticalSystem& system, std::span<const Vec3> points,
                                   const Schedule& schedule = {}, int max_order = 4);

/// Spot grids for a pattern stack. r is indexed [(i * cols + j) * N + n].
struct SpotGridStack {
    int rows = 0, cols = 0, patterns = 0;
    std::vector<double> r;
    std::vector<int> n_star;
    std::vector<Vec3> field_points;

    double at(int i, int j, int n) const {
        return r[static_cast<std::size_t>((i * cols + j) * patterns + n)];
    }
    double r_min(int i, int j) const;
    double mean_r_min() const;
    /// Recompute n_star from r, ties to the lowest index.
    void update_mask();
};

struct JointLoss {
    double gs = 0.0;
    double hr = 0.0;
    double joint = 0.0;
    std::vector<int> degenerate;
};

/// Grid-stacking and hard-region losses. Vignetted cells (NaN) are skipped.
JointLoss joint_loss(const SpotGridStack& stack);

/// Loss and its gradient with respect to every coefficient (pattern-major).
/// The hard-region weight r_min / mean(r_min) is treated as a constant.
JointLoss joint_loss_gradient(const analysis::SpotEvaluator& evaluator, std::span<const zernike::Expansion> patterns,
                              std::vector<std::vector<double>>* grad, SpotGridStack* stack = nullptr);

SpotGridStack evaluate_stack(const optics::OpticalSystem& system, std::span<const zernike::Expansion> patterns,
                             const GridSpec& grid, int rings = analysis::kDefaultRings);

struct JointTraceRow {
    int iteration;
    double gs, hr, joint;
};

struct JointOptions {
    int max_order = 4;
    int rings = analysis::kDefaultRings;
    double init_sigma_um = 0.01;
    /// Warm start; missing patterns are drawn from the seeded perturbation.
    std::vector<zernike::Expansion> initial;
    std::function<void(const JointTraceRow&)> progress;
};

struct JointResult {
    PatternSet set;
    SpotGridStack stack;
    std::vector<JointTraceRow> trace;
    std::vector<std::string> warnings;
};

JointResult optimize_joint(const optics::OpticalSystem& system, int budget, const GridSpec& grid,
                           const Schedule& schedule = {}, std::uint64_t seed = 0, const JointOptions& options = {});

struct BudgetPoint {
    int budget = 0;
    double mean_r_min = 0.0;
    int iterations = 0;
    PatternSet set;
    std::vector<std::string> warnings;
};

struct BudgetCurveOptions {
    /// Start budget N from the N - 1 solution plus a pattern optimized at its worst cell.
    bool warm_start = true;
    JointOptions joint;
};

/// Joint optimization for each budget in ascending order.
std::vector<BudgetPoint> budget_curve(const optics::OpticalSystem& system, std::span<const int> budgets,
                                      const GridSpec& grid, const Schedule& schedule = {}, std::uint64_t seed = 0,
                                      const BudgetCurveOptions& options = {});

/// k x k independent fovea optimizations, each over the grid points inside its tile.
PatternSet optimize_roi_tiling(const optics::OpticalSystem& system, int k, const GridSpec& grid,
                               const Schedule& schedule = {}, const SingleOptions& options = {});

/// Planes evenly spaced in 1 / distance, near to far.
std::vector<double> disparity_planes(double near_mm, double far_mm, int count);

std::vector<PatternSet> multi_depth_patterns(const optics::OpticalSystem& system, std::span<const double> depths_mm,
                                             int per_depth_budget, const GridSpec& grid,
                                             const Schedule& schedule = {}, std::uint64_t seed = 0,
                                             const JointOptions& options = {});

/// Library for images_needed: one pattern optimized at each radius along theta = 0.
std::vector<analysis::LibraryEntry> make_coverage_library(const optics::OpticalSystem& system,
                                                          std::span<const double> radii,
                                                          const analysis::CoverageOptions& coverage,
                                                          const Schedule& schedule = {},
                                                          const SingleOptions& options = {});

}  // namespace fovea::optimize
