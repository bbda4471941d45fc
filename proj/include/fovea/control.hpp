#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "fovea/zernike.hpp"

namespace fovea::control {

inline constexpr int kElectrodes = 63;
inline constexpr double kVmax = 270.0;

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct DeviceParams {
    double aperture_radius_mm = 5.0;
    double pitch_mm = 1.1;
    double influence_sigma_mm = 0.8;
    double saturation = 0.5;        ///< kappa in s(V) = V^2 / (1 + kappa (V / Vmax)^2)
    double coupling = 0.15;         ///< chi, neighbor cross term
    double peak_opd_um = 3.0;       ///< single electrode at Vmax, uncoupled
    int max_order = 4;
    int sample_rings = 20;          ///< hexapolar OPD samples for the Zernike fit
};

/// Synthetic optofluidic plate: Gaussian electrode influences, saturating
/// voltage response and nearest-neighbor coupling, read out as a Zernike fit.
class SyntheticDevice {
public:
    explicit SyntheticDevice(DeviceParams params = {});

    const DeviceParams& params() const { return params_; }
    const std::vector<Eigen::Vector2d>& electrodes() const { return centers_; }
    int term_count() const { return static_cast<int>(basis_.rows()); }

    double response(double volts) const;  ///< s(V)
    /// Zernike coefficients (um) for voltages V. Throws if V leaves [0, Vmax].
    VectorXd apply(const VectorXd& volts) const;
    zernike::Expansion apply_expansion(const VectorXd& volts) const;
    /// Coefficients per unit of s(V) for each electrode: the planted quadratic part.
    const MatrixXd& quadratic_operator() const { return basis_; }

private:
    DeviceParams params_;
    std::vector<Eigen::Vector2d> centers_;
    std::vector<std::pair<int, int>> pairs_;
    MatrixXd basis_;     // K x 63
    MatrixXd coupling_;  // K x pairs
    double gain_ = 1.0;
};

/// 61-site hexagonal lattice plus two opposite sites of the next ring.
std::vector<Eigen::Vector2d> electrode_layout(double pitch_mm);

void check_voltages(const VectorXd& v);

struct Dataset {
    MatrixXd V;  ///< samples x 63, volts
    MatrixXd W;  ///< samples x K, um
    std::vector<int> train;
    std::vector<int> test;

    MatrixXd rows(const MatrixXd& m, std::span<const int> idx) const;
};

struct DatasetOptions {
    int count = 1800;
    double train_fraction = 0.8;
    double random_fraction = 0.1;  ///< share of uniformly random voltage patterns
    std::uint64_t seed = 0;
};

Dataset generate_dataset(const SyntheticDevice& device, const DatasetOptions& options);

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------- linear model

struct LinearModel {
    MatrixXd A;  ///< K x 63, coefficients per normalized u = (V / Vmax)^2
    bool regularized = false;

    VectorXd predict(const VectorXd& volts) const;
    MatrixXd per_volt2() const { return A / (kVmax * kVmax); }
};

/// Least squares W ~ A (V/Vmax)^2 over the given rows.
LinearModel fit_linear(const MatrixXd& V, const MatrixXd& W);

struct LinearSolve {
    VectorXd V;
    double residual = 0.0;  ///< ||W - A V^2||
};

/// min ||W - A V^2|| subject to 0 <= V <= vmax, by accelerated projected
/// gradient in u = V^2. A is in coefficient units per volt^2.
LinearSolve solve_linear(const MatrixXd& A_per_volt2, const VectorXd& W, double vmax = kVmax, int iterations = 3000);

// ---------------------------------------------------------------- networks

struct TrainOptions {
    int epochs = 400;
    int batch = 64;
    double learning_rate = 1e-3;
    double noise_sigma = 0.36;  ///< augmentation on coefficients, um
    int hidden = 256;
    std::uint64_t seed = 0;
};

struct TrainLog {
    std::vector<double> loss;  ///< per epoch
    std::vector<std::string> warnings;
};

/// W = A Vn^2 + W2 sig(W1 [Vn, Vn^2] + b1) - W2 sig(b1), Vn = V / Vmax.
struct Decoder {
    MatrixXd A;   // K x 63
    MatrixXd W1;  // H x 126
    VectorXd b1;  // H
    MatrixXd W2;  // K x H
    double out_scale = 1.0;
    std::uint64_t seed = 0;

    VectorXd predict(const VectorXd& volts) const;
    MatrixXd predict_batch(const MatrixXd& volts) const;
    /// Value and gradient of ||predict(Vmax * vn) - target||^2 with respect to vn.
    double loss_and_grad(const VectorXd& vn, const VectorXd& target, VectorXd& grad) const;
};

Decoder train_decoder(const MatrixXd& V, const MatrixXd& W, const TrainOptions& options,
                      TrainLog* log = nullptr);

/// V = Vmax sig(W2 sig(W1 (W / in_scale) + b1) + b2).
struct Encoder {
    MatrixXd W1;  // H x K
    VectorXd b1;
    MatrixXd W2;  // 63 x H
    VectorXd b2;
    double in_scale = 1.0;
    std::uint64_t seed = 0;

    VectorXd predict(const VectorXd& W) const;
    MatrixXd predict_batch(const MatrixXd& W) const;
};

Encoder train_encoder(const MatrixXd& V, const MatrixXd& W, const TrainOptions& options, TrainLog* log = nullptr);

void to_json(nlohmann::json& j, const Decoder& d);
void from_json(const nlohmann::json& j, Decoder& d);
void to_json(nlohmann::json& j, const Encoder& e);
void from_json(const nlohmann::json& j, Encoder& e);
void to_json(nlohmann::json& j, const LinearModel& m);
void from_json(const nlohmann::json& j, LinearModel& m);

// ---------------------------------------------------------------- strategies

enum class Strategy { Linear, Encoder, Decoder, EncoderDecoder };
std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct Models {
    std::optional<LinearModel> linear;
    std::optional<Encoder> encoder;
    std::optional<Decoder> decoder;
};

struct ControlOptions {
    int iterations = 150;      ///< descent steps through the decoder
    double step = 0.02;        ///< Adam step on normalized voltages
};

VectorXd control(const VectorXd& W_target, Strategy strategy, const Models& models,
                 const ControlOptions& options = {});

struct StrategyRow {
    Strategy strategy;
    double v_mse = 0.0;       ///< volts^2
    double wr_mse = 0.0;      ///< decoder-predicted wavefront vs target
    double wm_mse = 0.0;      ///< device wavefront vs target
    double wm_ho_mse = 0.0;   ///< same, radial order >= 2 only
    bool within_bounds = true;
};

struct Comparison {
    std::vector<StrategyRow> rows;
    double linear_model_rmse = 0.0;   ///< forward model error on the test set
    double decoder_model_rmse = 0.0;
    bool decoder_beats_linear = false;
    bool wm_ordering = false;         ///< enc+dec <= enc <= min(dec, linear)
    double refine_improved_fraction = 0.0;  ///< enc+dec lowers decoder residual vs encoder
};

Comparison compare_strategies(const SyntheticDevice& device, const Dataset& data, const Models& models,
                              const ControlOptions& options = {});

void to_json(nlohmann::json& j, const Comparison& c);

// ---------------------------------------------------------------- grid control

struct GridInterpolation {
    std::vector<double> value;
    bool clamped = false;
};

/// Bilinear interpolation over a rows x cols lattice of equally sized vectors
/// spanning [0, 1]^2; position (x, y) with x along columns.
GridInterpolation grid_control(std::span<const std::vector<double>> anchors, int rows, int cols, double x, double y);

}  // namespace fovea::control
