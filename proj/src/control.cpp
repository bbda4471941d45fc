#include "fovea/control.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fovea/common.hpp"
#include "fovea/optics.hpp"
#include "fovea/parallel.hpp"

namespace fovea::control {

// ---------------------------------------------------------------- device

std::vector<Eigen::Vector2d> electrode_layout(double pitch) {
    // Axial hex directions; ring k has 6k sites.
    const Eigen::Vector2d dir[6] = {{1, 0}, {0.5, std::sqrt(3.0) / 2}, {-0.5, std::sqrt(3.0) / 2},
                                    {-1, 0}, {-0.5, -std::sqrt(3.0) / 2}, {0.5, -std::sqrt(3.0) / 2}};
    std::vector<Eigen::Vector2d> c{Eigen::Vector2d::Zero()};
    for (int k = 1; k <= 4; ++k)
        for (int side = 0; side < 6; ++side)
            for (int t = 0; t < k; ++t)
                c.push_back(pitch * (k * dir[side] + t * (dir[(side + 1) % 6] - dir[side])));
    // Two opposite ring-5 sites closest to the center (|5a + 2(b - a)| = sqrt(19) pitch).
    c.push_back(pitch * (5 * dir[0] + 2 * (dir[1] - dir[0])));
    c.push_back(pitch * (5 * dir[3] + 2 * (dir[4] - dir[3])));
    return c;
}

SyntheticDevice::SyntheticDevice(DeviceParams p) : params_(p), centers_(electrode_layout(p.pitch_mm)) {
    if (!(p.aperture_radius_mm > 0.0) || !(p.influence_sigma_mm > 0.0) || p.saturation < 0.0)
        throw InvalidArgument("invalid device parameters");
    for (const auto& c : centers_)
        if (c.norm() >= p.aperture_radius_mm) throw InvalidArgument("electrode outside the device aperture");
    for (int e = 0; e < kElectrodes; ++e)
        for (int f = e + 1; f < kElectrodes; ++f)
            if ((centers_[static_cast<std::size_t>(e)] - centers_[static_cast<std::size_t>(f)]).norm() <
                1.5 * p.pitch_mm)
                pairs_.push_back({e, f});

    gain_ = p.peak_opd_um * (1.0 + p.saturation) / (kVmax * kVmax);
    std::vector<zernike::Sample> samples;
    for (const auto& q : optics::hexapolar_points(p.sample_rings))
        samples.push_back({q.x() * p.aperture_radius_mm, q.y() * p.aperture_radius_mm, 0.0});
    const auto gauss = [&](const Eigen::Vector2d& c) {
        std::vector<zernike::Sample> s = samples;
        for (auto& x : s) {
            const double dx = x.x_mm - c.x(), dy = x.y_mm - c.y();
            x.opd_um = std::exp(-(dx * dx + dy * dy) / (2 * p.influence_sigma_mm * p.influence_sigma_mm));
        }
        const auto fit = zernike::fit(s, p.max_order, p.aperture_radius_mm);
        const auto co = fit.expansion.coeffs();
        return VectorXd(Eigen::Map<const VectorXd>(co.data(), static_cast<Eigen::Index>(co.size())));
    };
    const int k = zernike::term_count(p.max_order);
    basis_.resize(k, kElectrodes);
    for (int e = 0; e < kElectrodes; ++e) basis_.col(e) = gain_ * gauss(centers_[static_cast<std::size_t>(e)]);
    coupling_.resize(k, static_cast<Eigen::Index>(pairs_.size()));
    for (std::size_t q = 0; q < pairs_.size(); ++q)
        coupling_.col(static_cast<Eigen::Index>(q)) =
            gain_ * gauss(0.5 * (centers_[static_cast<std::size_t>(pairs_[q].first)] +
                                 centers_[static_cast<std::size_t>(pairs_[q].second)]));
}

double SyntheticDevice::response(double v) const {
    const double r = v / kVmax;
    return v * v / (1.0 + params_.saturation * r * r);
}

void check_voltages(const VectorXd& v) {
    if (v.size() != kElectrodes) throw InvalidArgument("expected 63 electrode voltages");
    for (double x : v)
        if (!(x >= 0.0 && x <= kVmax)) throw InvalidArgument("electrode voltage outside [0, 270] V");
}

VectorXd SyntheticDevice::apply(const VectorXd& volts) const {
    check_voltages(volts);
    VectorXd s(kElectrodes);
    for (int e = 0; e < kElectrodes; ++e) s[e] = response(volts[e]);
    VectorXd w = basis_ * s;
    for (std::size_t q = 0; q < pairs_.size(); ++q)
        w += params_.coupling * std::sqrt(s[pairs_[q].first] * s[pairs_[q].second]) *
             coupling_.col(static_cast<Eigen::Index>(q));
    return w;
}

zernike::Expansion SyntheticDevice::apply_expansion(const VectorXd& volts) const {
    const VectorXd w = apply(volts);
    return zernike::Expansion(params_.max_order, params_.aperture_radius_mm, std::vector<double>(w.begin(), w.end()));
}

// ---------------------------------------------------------------- dataset

MatrixXd Dataset::rows(const MatrixXd& m, std::span<const int> idx) const {
    MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
    return out;
}

Dataset generate_dataset(const SyntheticDevice& device, const DatasetOptions& o) {
    if (o.count < 100) throw InvalidArgument("dataset count must be at least 100");
    if (!(o.train_fraction > 0.0 && o.train_fraction < 1.0)) throw InvalidArgument("train_fraction must be in (0, 1)");
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int k = device.term_count();
    Dataset d;
    d.V.resize(o.count, kElectrodes);
    d.W.resize(o.count, k);
    // Draw every random number up front so the (parallel) solves stay deterministic.
    std::vector<char> random_v(static_cast<std::size_t>(o.count));
    MatrixXd draws(o.count, kElectrodes);
    MatrixXd jitter(o.count, k);
    std::vector<double> amplitude(static_cast<std::size_t>(o.count));
    for (int s = 0; s < o.count; ++s) {
        random_v[static_cast<std::size_t>(s)] = uni(rng) < o.random_fraction;
        amplitude[static_cast<std::size_t>(s)] = std::pow(uni(rng), 2);  // voltage scale uniform in [0, 1]
        for (int e = 0; e < kElectrodes; ++e) draws(s, e) = uni(rng);
        for (int j = 0; j < k; ++j) jitter(s, j) = gauss(rng);
    }
    const MatrixXd& a = device.quadratic_operator();
    parallel_for(static_cast<std::size_t>(o.count), [&](std::size_t si) {
        const auto s = static_cast<Eigen::Index>(si);
        VectorXd v(kElectrodes);
        if (random_v[si]) {
            v = kVmax * draws.row(s).transpose();
        } else {
            // Target from a feasible pattern plus a small off-model perturbation, inverted by the linear solve.
            const VectorXd u = amplitude[si] * draws.row(s).transpose();
            VectorXd target = a * (kVmax * kVmax * u);
            target += 0.05 * target.norm() / std::sqrt(static_cast<double>(k)) * jitter.row(s).transpose();
            v = solve_linear(a, target).V;
        }
        d.V.row(s) = v.transpose();
        d.W.row(s) = device.apply(v).transpose();
    });
    std::vector<int> idx(static_cast<std::size_t>(o.count));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(o.train_fraction * o.count));
    d.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    d.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(d.train.begin(), d.train.end());
    std::sort(d.test.begin(), d.test.end());
    return d;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& d) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    std::vector<char> is_test(static_cast<std::size_t>(d.V.rows()), 0);
    for (int t : d.test) is_test[static_cast<std::size_t>(t)] = 1;
    out << "split";
    for (int e = 0; e < d.V.cols(); ++e) out << ",V" << e;
    for (int j = 0; j < d.W.cols(); ++j) out << ",W" << j;
    out << "\n";
    out.precision(17);
    for (Eigen::Index s = 0; s < d.V.rows(); ++s) {
        out << (is_test[static_cast<std::size_t>(s)] ? "test" : "train");
        for (Eigen::Index e = 0; e < d.V.cols(); ++e) out << ',' << d.V(s, e);
        for (Eigen::Index j = 0; j < d.W.cols(); ++j) out << ',' << d.W(s, j);
        out << "\n";
    }
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    const auto header_cols = std::count(line.begin(), line.end(), ',');
    const auto k = static_cast<int>(header_cols) - kElectrodes;
    if (k < 1) throw IoError("dataset header has too few columns");
    std::vector<std::vector<double>> rows;
    std::vector<char> test;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        test.push_back(cell == "test");
        std::vector<double> r;
        while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
        if (static_cast<int>(r.size()) != kElectrodes + k) throw IoError("dataset row has the wrong column count");
        rows.push_back(std::move(r));
    }
    Dataset d;
    d.V.resize(static_cast<Eigen::Index>(rows.size()), kElectrodes);
    d.W.resize(static_cast<Eigen::Index>(rows.size()), k);
    for (std::size_t s = 0; s < rows.size(); ++s) {
        for (int e = 0; e < kElectrodes; ++e) d.V(static_cast<Eigen::Index>(s), e) = rows[s][static_cast<std::size_t>(e)];
        for (int j = 0; j < k; ++j)
            d.W(static_cast<Eigen::Index>(s), j) = rows[s][static_cast<std::size_t>(kElectrodes + j)];
        (test[s] ? d.test : d.train).push_back(static_cast<int>(s));
    }
    return d;
}

// ---------------------------------------------------------------- linear model

VectorXd LinearModel::predict(const VectorXd& volts) const {
    return A * (volts / kVmax).array().square().matrix();
}

LinearModel fit_linear(const MatrixXd& V, const MatrixXd& W) {
    if (V.rows() != W.rows() || V.rows() == 0) throw InvalidArgument("fit_linear: mismatched or empty data");
    const MatrixXd U = (V / kVmax).array().square().matrix();
    LinearModel m;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(U);
    qr.setThreshold(1e-10);
    if (qr.rank() == U.cols()) {
        m.A = qr.solve(W).transpose();
    } else {
        const double lambda = 1e-6 * (U.transpose() * U).trace() / static_cast<double>(U.cols());
        const MatrixXd g = U.transpose() * U + lambda * MatrixXd::Identity(U.cols(), U.cols());
        m.A = g.ldlt().solve(U.transpose() * W).transpose();
        m.regularized = true;
    }
    return m;
}

LinearSolve solve_linear(const MatrixXd& A, const VectorXd& W, double vmax, int iterations) {
    if (A.rows() != W.size()) throw InvalidArgument("solve_linear: dimension mismatch");
    const double umax = vmax * vmax;
    // Work in u / umax so the box is [0, 1].
    const MatrixXd B = A * umax;
    const MatrixXd BtB = B.transpose() * B;
    const VectorXd BtW = B.transpose() * W;
    const double lip = std::max(BtB.eval().selfadjointView<Eigen::Upper>().eigenvalues().maxCoeff(), 1e-300);
    VectorXd x = VectorXd::Zero(A.cols()), y = x, prev = x;
    double t = 1.0;
    for (int it = 0; it < iterations; ++it) {
        const VectorXd g = BtB * y - BtW;
        prev = x;
        x = (y - g / lip).cwiseMax(0.0).cwiseMin(1.0);
        const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        y = x + ((t - 1.0) / tn) * (x - prev);
        t = tn;
        if ((x - prev).squaredNorm() < 1e-24) break;
    }
    LinearSolve r;
    r.V = (x * umax).cwiseSqrt();
    r.V = r.V.cwiseMin(vmax);
    r.residual = (W - A * r.V.array().square().matrix()).norm();
    return r;
}

// ---------------------------------------------------------------- networks

namespace {

MatrixXd sigmoid(const MatrixXd& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }
VectorXd sigmoid(const VectorXd& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }

void xavier(MatrixXd& m, std::mt19937_64& rng) {
    const double lim = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    std::uniform_real_distribution<double> u(-lim, lim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
}

/// Adam over a list of parameter blocks.
struct AdamBlocks {
    std::vector<MatrixXd> m, v;
    int t = 0;
    double lr;
    explicit AdamBlocks(double rate) : lr(rate) {}
    void step(std::vector<MatrixXd*> params, const std::vector<MatrixXd>& grads) {
        if (m.empty())
            for (auto* p : params) {
                m.push_back(MatrixXd::Zero(p->rows(), p->cols()));
                v.push_back(MatrixXd::Zero(p->rows(), p->cols()));
            }
        ++t;
        const double c1 = 1.0 - std::pow(0.9, t), c2 = 1.0 - std::pow(0.999, t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = 0.9 * m[i] + 0.1 * grads[i];
            v[i] = 0.999 * v[i] + 0.001 * grads[i].cwiseProduct(grads[i]);
            params[i]->array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + 1e-8);
        }
    }
};

void check_train_data(const MatrixXd& V, const MatrixXd& W, const TrainOptions& o) {
    if (V.rows() != W.rows() || V.rows() == 0) throw InvalidArgument("training data mismatched or empty");
    if (V.cols() != kElectrodes) throw InvalidArgument("training voltages must have 63 columns");
    if (o.epochs < 1 || o.batch < 1 || o.hidden < 0 || !(o.learning_rate > 0.0))
        throw InvalidArgument("invalid training options");
}

void note_stall(TrainLog* log, const char* name) {
    if (!log || log->loss.size() < 10) return;
    // Mean loss over the last fifth of the epochs against the fifth before it.
    const std::size_t n = log->loss.size(), w = n / 5;
    const auto mean = [&](std::size_t from) {
        return std::accumulate(log->loss.begin() + static_cast<std::ptrdiff_t>(from),
                               log->loss.begin() + static_cast<std::ptrdiff_t>(from + w), 0.0) /
               static_cast<double>(w);
    };
    if (!(mean(n - w) < mean(n - 2 * w)))
        log->warnings.push_back(std::string(name) + " loss did not decrease over the last 20% of epochs");
}

double rms(const MatrixXd& m) { return std::sqrt(m.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(1, m.size()))); }

}  // namespace

MatrixXd Decoder::predict_batch(const MatrixXd& volts) const {
    const MatrixXd vn = volts / kVmax;
    const MatrixXd q = vn.array().square().matrix();
    MatrixXd out = q * A.transpose();
    if (W1.rows() > 0) {
        MatrixXd x(vn.rows(), 2 * kElectrodes);
        x << vn, q;
        MatrixXd z = x * W1.transpose();
        z.rowwise() += b1.transpose();
        const VectorXd s0 = sigmoid(b1);
        MatrixXd h = sigmoid(z);
        h.rowwise() -= s0.transpose();
        out += h * W2.transpose();
    }
    return out * out_scale;
}

VectorXd Decoder::predict(const VectorXd& volts) const {
    return predict_batch(volts.transpose()).transpose();
}

double Decoder::loss_and_grad(const VectorXd& vn, const VectorXd& target, VectorXd& grad) const {
    const VectorXd q = vn.array().square().matrix();
    VectorXd out = A * q;
    VectorXd h, x(2 * kElectrodes);
    if (W1.rows() > 0) {
        x << vn, q;
        h = sigmoid(VectorXd(W1 * x + b1));
        out += W2 * (h - sigmoid(b1));
    }
    out *= out_scale;
    const VectorXd r = out - target;
    const VectorXd g = 2.0 * out_scale * r;  // d loss / d (normalized output)
    VectorXd dq = A.transpose() * g;
    grad = VectorXd::Zero(kElectrodes);
    if (W1.rows() > 0) {
        const VectorXd dz = (W2.transpose() * g).cwiseProduct(h.cwiseProduct((1.0 - h.array()).matrix()));
        const VectorXd dx = W1.transpose() * dz;
        grad += dx.head(kElectrodes);
        dq += dx.tail(kElectrodes);
    }
    grad += 2.0 * vn.cwiseProduct(dq);
    return r.squaredNorm();
}

Decoder train_decoder(const MatrixXd& V, const MatrixXd& W, const TrainOptions& o, TrainLog* log) {
    check_train_data(V, W, o);
    std::mt19937_64 rng(o.seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    const Eigen::Index n = V.rows(), k = W.cols();
    const int hdim = o.hidden;
    Decoder d;
    d.seed = o.seed;
    d.out_scale = std::max(rms(W), 1e-12);
    d.A = fit_linear(V, W).A / d.out_scale;  // warm start of the linear branch
    d.W1.resize(hdim, 2 * kElectrodes);
    d.b1 = VectorXd::Zero(hdim);
    d.W2.resize(k, hdim);
    if (hdim > 0) {
        xavier(d.W1, rng);
        xavier(d.W2, rng);
        d.W2 *= 0.1;
    }
    const MatrixXd vn = V / kVmax;
    const MatrixXd q = vn.array().square().matrix();
    MatrixXd xin(n, 2 * kElectrodes);
    xin << vn, q;
    const MatrixXd y = W / d.out_scale;
    const double noise_n = o.noise_sigma / d.out_scale;

    AdamBlocks adam(o.learning_rate);
    MatrixXd b1m = d.b1;  // bias as a column block for Adam
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < o.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (Eigen::Index start = 0; start < n; start += o.batch) {
            const Eigen::Index bsz = std::min<Eigen::Index>(o.batch, n - start);
            MatrixXd xb(bsz, 2 * kElectrodes), qb(bsz, kElectrodes), yb(bsz, k), yc(bsz, k);
            for (Eigen::Index i = 0; i < bsz; ++i) {
                const Eigen::Index r = order[static_cast<std::size_t>(start + i)];
                xb.row(i) = xin.row(r);
                qb.row(i) = q.row(r);
                yc.row(i) = y.row(r);
                yb.row(i) = y.row(r);
                for (Eigen::Index j = 0; j < k; ++j) yb(i, j) += noise_n * noise(rng);
            }
            MatrixXd out = qb * d.A.transpose();
            MatrixXd h, hc;
            VectorXd s0;
            if (hdim > 0) {
                MatrixXd z = xb * d.W1.transpose();
                z.rowwise() += d.b1.transpose();
                h = sigmoid(z);
                s0 = sigmoid(d.b1);
                hc = h;
                hc.rowwise() -= s0.transpose();
                out += hc * d.W2.transpose();
            }
            const MatrixXd err = out - yb;
            epoch_loss += (out - yc).squaredNorm();  // logged without the augmentation noise
            const MatrixXd g = 2.0 * err / static_cast<double>(bsz * k);
            std::vector<MatrixXd*> params{&d.A};
            std::vector<MatrixXd> grads{g.transpose() * qb};
            if (hdim > 0) {
                const MatrixXd dh = g * d.W2;
                const MatrixXd dz = dh.cwiseProduct(h.cwiseProduct((1.0 - h.array()).matrix()));
                const VectorXd ds0 = dh.colwise().sum().transpose();
                const VectorXd db =
                    dz.colwise().sum().transpose() - ds0.cwiseProduct(s0.cwiseProduct((1.0 - s0.array()).matrix()));
                params.push_back(&d.W1);
                grads.push_back(dz.transpose() * xb);
                params.push_back(&b1m);
                grads.push_back(db);
                params.push_back(&d.W2);
                grads.push_back(g.transpose() * hc);
            }
            adam.step(params, grads);
            if (hdim > 0) d.b1 = b1m.col(0);
        }
        if (log) log->loss.push_back(epoch_loss / static_cast<double>(n * k));
    }
    note_stall(log, "decoder");
    return d;
}

MatrixXd Encoder::predict_batch(const MatrixXd& W) const {
    MatrixXd z1 = (W / in_scale) * W1.transpose();
    z1.rowwise() += b1.transpose();
    MatrixXd z2 = sigmoid(z1) * W2.transpose();
    z2.rowwise() += b2.transpose();
    return kVmax * sigmoid(z2);
}

VectorXd Encoder::predict(const VectorXd& W) const { return predict_batch(W.transpose()).transpose(); }

Encoder train_encoder(const MatrixXd& V, const MatrixXd& W, const TrainOptions& o, TrainLog* log) {
    check_train_data(V, W, o);
    if (o.hidden < 1) throw InvalidArgument("encoder needs a hidden layer");
    std::mt19937_64 rng(o.seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    const Eigen::Index n = V.rows(), k = W.cols();
    Encoder e;
    e.seed = o.seed;
    e.in_scale = std::max(rms(W), 1e-12);
    e.W1.resize(o.hidden, k);
    e.b1 = VectorXd::Zero(o.hidden);
    e.W2.resize(kElectrodes, o.hidden);
    e.b2 = VectorXd::Zero(kElectrodes);
    xavier(e.W1, rng);
    xavier(e.W2, rng);
    const MatrixXd x = W / e.in_scale;
    const MatrixXd y = V / kVmax;
    const double noise_n = o.noise_sigma / e.in_scale;

    AdamBlocks adam(o.learning_rate);
    MatrixXd b1m = e.b1, b2m = e.b2;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < o.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (Eigen::Index start = 0; start < n; start += o.batch) {
            const Eigen::Index bsz = std::min<Eigen::Index>(o.batch, n - start);
            MatrixXd xb(bsz, k), yb(bsz, kElectrodes);
            for (Eigen::Index i = 0; i < bsz; ++i) {
                const Eigen::Index r = order[static_cast<std::size_t>(start + i)];
                xb.row(i) = x.row(r);
                yb.row(i) = y.row(r);
                for (Eigen::Index j = 0; j < k; ++j) xb(i, j) += noise_n * noise(rng);
            }
            MatrixXd z1 = xb * e.W1.transpose();
            z1.rowwise() += e.b1.transpose();
            const MatrixXd h = sigmoid(z1);
            MatrixXd z2 = h * e.W2.transpose();
            z2.rowwise() += e.b2.transpose();
            const MatrixXd out = sigmoid(z2);
            const MatrixXd err = out - yb;
            epoch_loss += err.squaredNorm();
            const MatrixXd g = 2.0 * err / static_cast<double>(bsz * kElectrodes);
            const MatrixXd dz2 = g.cwiseProduct(out.cwiseProduct((1.0 - out.array()).matrix()));
            const MatrixXd dz1 = (dz2 * e.W2).cwiseProduct(h.cwiseProduct((1.0 - h.array()).matrix()));
            adam.step({&e.W1, &b1m, &e.W2, &b2m},
                      {dz1.transpose() * xb, dz1.colwise().sum().transpose(), dz2.transpose() * h,
                       dz2.colwise().sum().transpose()});
            e.b1 = b1m.col(0);
            e.b2 = b2m.col(0);
        }
        if (log) log->loss.push_back(epoch_loss / static_cast<double>(n * kElectrodes));
    }
    note_stall(log, "encoder");
    return e;
}

namespace {

nlohmann::json matrix_json(const MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> r(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
        rows.push_back(r);
    }
    return rows;
}

MatrixXd json_matrix(const nlohmann::json& j) {
    const auto rows = j.get<std::vector<std::vector<double>>>();
    MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (static_cast<Eigen::Index>(rows[i].size()) != m.cols()) throw IoError("ragged matrix in model file");
        for (std::size_t c = 0; c < rows[i].size(); ++c)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    }
    return m;
}

VectorXd json_vector(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> vec(const VectorXd& v) { return {v.begin(), v.end()}; }

}  // namespace

void to_json(nlohmann::json& j, const Decoder& d) {
    j = {{"architecture", {{"type", "decoder"}, {"inputs", 2 * kElectrodes}, {"hidden", d.W1.rows()},
                           {"outputs", d.A.rows()}, {"activation", "sigmoid"}}},
         {"seed", d.seed}, {"out_scale", d.out_scale}, {"A", matrix_json(d.A)}, {"W1", matrix_json(d.W1)},
         {"b1", vec(d.b1)}, {"W2", matrix_json(d.W2)}};
}

void from_json(const nlohmann::json& j, Decoder& d) {
    d.seed = j.value("seed", std::uint64_t{0});
    d.out_scale = j.at("out_scale").get<double>();
    d.A = json_matrix(j.at("A"));
    d.W1 = json_matrix(j.at("W1"));
    d.b1 = json_vector(j.at("b1"));
    d.W2 = json_matrix(j.at("W2"));
    if (d.W1.rows() == 0) {
        d.W1.resize(0, 2 * kElectrodes);
        d.W2.resize(d.A.rows(), 0);
    }
}

void to_json(nlohmann::json& j, const Encoder& e) {
    j = {{"architecture", {{"type", "encoder"}, {"inputs", e.W1.cols()}, {"hidden", e.W1.rows()},
                           {"outputs", kElectrodes}, {"activation", "sigmoid"}, {"vmax", kVmax}}},
         {"seed", e.seed}, {"in_scale", e.in_scale}, {"W1", matrix_json(e.W1)}, {"b1", vec(e.b1)},
         {"W2", matrix_json(e.W2)}, {"b2", vec(e.b2)}};
}

void from_json(const nlohmann::json& j, Encoder& e) {
    e.seed = j.value("seed", std::uint64_t{0});
    e.in_scale = j.at("in_scale").get<double>();
    e.W1 = json_matrix(j.at("W1"));
    e.b1 = json_vector(j.at("b1"));
    e.W2 = json_matrix(j.at("W2"));
    e.b2 = json_vector(j.at("b2"));
}

void to_json(nlohmann::json& j, const LinearModel& m) {
    j = {{"architecture", {{"type", "linear"}, {"input", "(V/Vmax)^2"}, {"vmax", kVmax}}},
         {"A", matrix_json(m.A)}, {"regularized", m.regularized}};
}

void from_json(const nlohmann::json& j, LinearModel& m) {
    m.A = json_matrix(j.at("A"));
    m.regularized = j.value("regularized", false);
}

// ---------------------------------------------------------------- strategies

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::Linear: return "linear";
        case Strategy::Encoder: return "encoder";
        case Strategy::Decoder: return "decoder";
        case Strategy::EncoderDecoder: return "encoder+decoder";
    }
    return "linear";
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "linear") return Strategy::Linear;
    if (s == "encoder") return Strategy::Encoder;
    if (s == "decoder") return Strategy::Decoder;
    if (s == "encoder+decoder" || s == "encoder_decoder") return Strategy::EncoderDecoder;
    throw InvalidArgument("unknown control strategy '" + s + "'");
}

namespace {

/// Projected Adam through the decoder; returns the best iterate seen.
VectorXd refine(const Decoder& dec, const VectorXd& target, VectorXd vn, const ControlOptions& o) {
    VectorXd m = VectorXd::Zero(kElectrodes), v = VectorXd::Zero(kElectrodes), g;
    VectorXd best = vn;
    double best_loss = dec.loss_and_grad(vn, target, g);
    for (int t = 1; t <= o.iterations; ++t) {
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(0.9, t), c2 = 1.0 - std::pow(0.999, t);
        vn.array() -= o.step * (m.array() / c1) / ((v.array() / c2).sqrt() + 1e-12);
        vn = vn.cwiseMax(0.0).cwiseMin(1.0);
        const double loss = dec.loss_and_grad(vn, target, g);
        if (loss < best_loss) {
            best_loss = loss;
            best = vn;
        }
    }
    return best;
}

}  // namespace

VectorXd control(const VectorXd& target, Strategy s, const Models& models, const ControlOptions& o) {
    const auto need = [&](bool ok, const char* what) {
        if (!ok) throw InvalidArgument(std::string("strategy '") + to_string(s) + "' needs a trained " + what);
    };
    VectorXd v;
    switch (s) {
        case Strategy::Linear:
            need(models.linear.has_value(), "linear model");
            v = solve_linear(models.linear->per_volt2(), target).V;
            break;
        case Strategy::Encoder:
            need(models.encoder.has_value(), "encoder");
            v = models.encoder->predict(target);
            break;
        case Strategy::Decoder:
            need(models.decoder.has_value(), "decoder");
            v = kVmax * refine(*models.decoder, target, VectorXd::Zero(kElectrodes), o);
            break;
        case Strategy::EncoderDecoder:
            need(models.decoder.has_value(), "decoder");
            need(models.encoder.has_value(), "encoder");
            v = kVmax * refine(*models.decoder, target, models.encoder->predict(target) / kVmax, o);
            break;
    }
    return v.cwiseMax(0.0).cwiseMin(kVmax);
}

Comparison compare_strategies(const SyntheticDevice& device, const Dataset& data, const Models& models,
                              const ControlOptions& o) {
    if (!models.linear || !models.encoder || !models.decoder)
        throw InvalidArgument("compare_strategies needs linear, encoder and decoder models");
    const MatrixXd Vt = data.rows(data.V, data.test);
    const MatrixXd Wt = data.rows(data.W, data.test);
    const Eigen::Index n = Vt.rows(), k = Wt.cols();
    Comparison c;
    {
        MatrixXd lin(n, k);
        for (Eigen::Index i = 0; i < n; ++i) lin.row(i) = models.linear->predict(Vt.row(i).transpose()).transpose();
        c.linear_model_rmse = rms(lin - Wt);
        c.decoder_model_rmse = rms(models.decoder->predict_batch(Vt) - Wt);
        c.decoder_beats_linear = c.decoder_model_rmse < c.linear_model_rmse;
    }
    const Strategy all[4] = {Strategy::Linear, Strategy::Encoder, Strategy::Decoder, Strategy::EncoderDecoder};
    std::vector<MatrixXd> volts(4, MatrixXd(n, kElectrodes));
    for (int s = 0; s < 4; ++s) {
        parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
            const auto r = static_cast<Eigen::Index>(i);
            volts[static_cast<std::size_t>(s)].row(r) = control(Wt.row(r).transpose(), all[s], models, o).transpose();
        });
    }
    // Radial order >= 2 starts at OSA index 3.
    for (int s = 0; s < 4; ++s) {
        const MatrixXd& V = volts[static_cast<std::size_t>(s)];
        StrategyRow row{all[s]};
        row.within_bounds = V.minCoeff() >= 0.0 && V.maxCoeff() <= kVmax;
        row.v_mse = (V - Vt).squaredNorm() / static_cast<double>(V.size());
        row.wr_mse = (models.decoder->predict_batch(V) - Wt).squaredNorm() / static_cast<double>(n * k);
        MatrixXd wm(n, k);
        for (Eigen::Index i = 0; i < n; ++i) wm.row(i) = device.apply(V.row(i).transpose()).transpose();
        const MatrixXd diff = wm - Wt;
        row.wm_mse = diff.squaredNorm() / static_cast<double>(n * k);
        row.wm_ho_mse = diff.rightCols(k - 3).squaredNorm() / static_cast<double>(n * (k - 3));
        c.rows.push_back(row);
    }
    const double lin = c.rows[0].wm_mse, enc = c.rows[1].wm_mse, dec = c.rows[2].wm_mse, both = c.rows[3].wm_mse;
    c.wm_ordering = both <= enc && enc <= std::min(dec, lin);
    int improved = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const VectorXd t = Wt.row(i).transpose();
        const double e1 = (models.decoder->predict(volts[1].row(i).transpose()) - t).norm();
        const double e2 = (models.decoder->predict(volts[3].row(i).transpose()) - t).norm();
        improved += e2 < e1 ? 1 : 0;
    }
    c.refine_improved_fraction = static_cast<double>(improved) / static_cast<double>(std::max<Eigen::Index>(n, 1));
    return c;
}

void to_json(nlohmann::json& j, const Comparison& c) {
    j = nlohmann::json::object();
    j["strategies"] = nlohmann::json::array();
    for (const auto& r : c.rows)
        j["strategies"].push_back({{"strategy", to_string(r.strategy)}, {"V_mse", r.v_mse}, {"W_r_mse", r.wr_mse},
                                   {"W_m_mse", r.wm_mse}, {"W_m_ho_mse", r.wm_ho_mse},
                                   {"within_bounds", r.within_bounds}});
    j["linear_model_test_rmse"] = c.linear_model_rmse;
    j["decoder_model_test_rmse"] = c.decoder_model_rmse;
    j["decoder_beats_linear"] = c.decoder_beats_linear;
    j["wm_ordering_holds"] = c.wm_ordering;
    j["refine_improved_fraction"] = c.refine_improved_fraction;
}

// ---------------------------------------------------------------- grid control

GridInterpolation grid_control(std::span<const std::vector<double>> anchors, int rows, int cols, double x, double y) {
    if (rows < 1 || cols < 1 || anchors.size() != static_cast<std::size_t>(rows * cols))
        throw InvalidArgument("grid_control: anchor count does not match the grid");
    for (const auto& a : anchors)
        if (a.size() != anchors.front().size()) throw InvalidArgument("grid_control: anchors differ in length");
    GridInterpolation r;
    r.clamped = !(x >= 0.0 && x <= 1.0 && y >= 0.0 && y <= 1.0);
    x = std::clamp(x, 0.0, 1.0);
    y = std::clamp(y, 0.0, 1.0);
    const double fx = x * (cols - 1), fy = y * (rows - 1);
    const int c0 = std::min(static_cast<int>(fx), std::max(cols - 2, 0));
    const int r0 = std::min(static_cast<int>(fy), std::max(rows - 2, 0));
    const int c1 = std::min(c0 + 1, cols - 1), r1 = std::min(r0 + 1, rows - 1);
    const double tx = fx - c0, ty = fy - r0;
    const auto& a = anchors[static_cast<std::size_t>(r0 * cols + c0)];
    const auto& b = anchors[static_cast<std::size_t>(r0 * cols + c1)];
    const auto& c = anchors[static_cast<std::size_t>(r1 * cols + c0)];
    const auto& d = anchors[static_cast<std::size_t>(r1 * cols + c1)];
    r.value.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        r.value[i] = (1 - ty) * ((1 - tx) * a[i] + tx * b[i]) + ty * ((1 - tx) * c[i] + tx * d[i]);
    return r;
}

}  // namespace fovea::control
