#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "fovea/common.hpp"
#include "fovea/control.hpp"

using namespace fovea;
using namespace fovea::control;

namespace {

const SyntheticDevice& device() {
    static const SyntheticDevice d;
    return d;
}

const SyntheticDevice& quadratic_device() {
    static const SyntheticDevice d([] {
        DeviceParams p;
        p.saturation = 0.0;
        p.coupling = 0.0;
        return p;
    }());
    return d;
}

const Dataset& small_data() {
    static const Dataset d = generate_dataset(device(), {300, 0.8, 0.1, 5});
    return d;
}

TrainOptions quick_train() {
    TrainOptions t;
    t.epochs = 30;
    t.hidden = 32;
    t.seed = 3;
    return t;
}

VectorXd uniform_v(double v) { return VectorXd::Constant(kElectrodes, v); }

}  // namespace

TEST_CASE("electrode layout") {
    const auto c = electrode_layout(1.1);
    CHECK(c.size() == 63);
    for (const auto& p : c) CHECK(p.norm() < 5.0);
    std::set<std::pair<long, long>> unique;
    for (const auto& p : c) unique.insert({std::lround(p.x() * 1e6), std::lround(p.y() * 1e6)});
    CHECK(unique.size() == 63);
    // 61 hexagonal sites within four rings, then two beyond
    int inner = 0;
    for (const auto& p : c) inner += p.norm() <= 4 * 1.1 + 1e-9;
    CHECK(inner == 61);
}

TEST_CASE("device response") {
    const auto& d = device();
    CHECK(d.apply(VectorXd::Zero(kElectrodes)).norm() == 0.0);
    CHECK(d.apply(uniform_v(123.0)) == d.apply(uniform_v(123.0)));

    // uniform drive is dominated by the rotationally symmetric terms
    const VectorXd w = d.apply(uniform_v(200.0));
    double sym = 0.0;
    for (int j : {0, 4, 12}) sym += w[j] * w[j];
    CHECK(sym / w.squaredNorm() > 0.9);

    // quadratic at small voltage, saturating at the top
    const double small = d.apply(uniform_v(20.0)).norm(), small2 = d.apply(uniform_v(10.0)).norm();
    CHECK(small / small2 == doctest::Approx(4.0).epsilon(0.01));
    const double top = d.apply(uniform_v(kVmax)).norm(), half = d.apply(uniform_v(kVmax / 2)).norm();
    CHECK(top / half < 4.0);
    CHECK(d.response(kVmax) == doctest::Approx(kVmax * kVmax / 1.5));

    // continuity: small voltage changes give small wavefront changes
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, kVmax - 1.0);
    for (int t = 0; t < 20; ++t) {
        VectorXd v(kElectrodes);
        for (auto& x : v) x = u(rng);
        const VectorXd dv = VectorXd::Constant(kElectrodes, 1e-4);
        CHECK((d.apply(v + dv) - d.apply(v)).norm() < 1e-3);
    }

    CHECK_THROWS_AS(d.apply(uniform_v(-1.0)), InvalidArgument);
    CHECK_THROWS_AS(d.apply(uniform_v(271.0)), InvalidArgument);
    CHECK_THROWS_AS(d.apply(VectorXd::Zero(5)), InvalidArgument);
    CHECK(d.apply_expansion(uniform_v(50.0)).size() == 15);
}

TEST_CASE("dataset generation") {
    const Dataset d = generate_dataset(device(), {1800, 0.8, 0.1, 0});
    CHECK(d.train.size() == 1440);
    CHECK(d.test.size() == 360);
    std::vector<int> all(d.train);
    all.insert(all.end(), d.test.begin(), d.test.end());
    std::sort(all.begin(), all.end());
    for (int i = 0; i < 1800; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
    for (Eigen::Index i = 0; i < d.V.rows(); ++i) CHECK_NOTHROW(check_voltages(d.V.row(i).transpose()));

    // the test set spans the magnitude range: five equal bins, none empty
    VectorXd norms = d.W.rowwise().norm();
    const double lo = norms.minCoeff(), hi = norms.maxCoeff();
    std::vector<int> bins(5, 0);
    for (int i : d.test) bins[static_cast<std::size_t>(std::min(4, static_cast<int>(5 * (norms[i] - lo) / (hi - lo))))]++;
    for (int b : bins) CHECK(b > 0);

    const Dataset again = generate_dataset(device(), {1800, 0.8, 0.1, 0});
    CHECK(again.V == d.V);
    CHECK(again.W == d.W);
    CHECK_THROWS_AS(generate_dataset(device(), {50, 0.8, 0.1, 0}), InvalidArgument);
}

TEST_CASE("dataset csv round trip") {
    const auto path = std::filesystem::temp_directory_path() / "fovea_dataset_test.csv";
    write_dataset_csv(path, small_data());
    const Dataset back = read_dataset_csv(path);
    CHECK(back.train == small_data().train);
    CHECK(back.test == small_data().test);
    CHECK((back.V - small_data().V).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((back.W - small_data().W).cwiseAbs().maxCoeff() < 1e-9);
    std::filesystem::remove(path);
}

TEST_CASE("linear fit recovers the planted operator") {
    const auto& q = quadratic_device();
    const Dataset d = generate_dataset(q, {200, 0.8, 0.5, 2});
    const LinearModel m = fit_linear(d.V, d.W);
    const MatrixXd planted = q.quadratic_operator() * kVmax * kVmax;
    CHECK((m.A - planted).cwiseAbs().maxCoeff() < 1e-6);
    CHECK_FALSE(m.regularized);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < d.V.rows(); ++i)
        worst = std::max(worst, (m.predict(d.V.row(i).transpose()) - d.W.row(i).transpose()).norm());
    CHECK(worst < 1e-9);
}

TEST_CASE("linear model error grows with amplitude on the saturating device") {
    const Dataset& d = small_data();
    const LinearModel m = fit_linear(d.rows(d.V, d.train), d.rows(d.W, d.train));
    std::vector<std::pair<double, double>> e;  // (norm, error)
    for (Eigen::Index i = 0; i < d.V.rows(); ++i)
        e.push_back({d.W.row(i).norm(), (m.predict(d.V.row(i).transpose()) - d.W.row(i).transpose()).norm()});
    std::sort(e.begin(), e.end());
    const std::size_t third = e.size() / 3;
    double low = 0.0, high = 0.0;
    for (std::size_t i = 0; i < third; ++i) {
        low += e[i].second;
        high += e[e.size() - 1 - i].second;
    }
    CHECK(high > low);
}

TEST_CASE("rank deficient fit is regularized") {
    MatrixXd V = MatrixXd::Zero(100, kElectrodes);
    V.col(0).setConstant(100.0);
    MatrixXd W = MatrixXd::Ones(100, 3);
    CHECK(fit_linear(V, W).regularized);
}

TEST_CASE("constrained linear solve") {
    MatrixXd a(1, 1);
    a << 1.0;
    VectorXd w(1);
    w << 1.0;
    CHECK(solve_linear(a, w).V[0] == doctest::Approx(1.0).epsilon(1e-6));

    const MatrixXd A = device().quadratic_operator();
    const VectorXd beyond = A * VectorXd::Constant(kElectrodes, kVmax * kVmax) * 2.0;
    const LinearSolve far = solve_linear(A, beyond);
    for (double v : far.V) CHECK(v == doctest::Approx(kVmax).epsilon(1e-6));

    // better than random feasible voltages
    const VectorXd target = device().apply(VectorXd::Constant(kElectrodes, 150.0));
    const LinearSolve s = solve_linear(A, target);
    CHECK_NOTHROW(check_voltages(s.V));
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, kVmax);
    for (int t = 0; t < 1000; ++t) {
        VectorXd v(kElectrodes);
        for (auto& x : v) x = u(rng);
        CHECK(s.residual <= (target - A * v.cwiseProduct(v)).norm() + 1e-9);
    }
}

TEST_CASE("decoder") {
    const Dataset& d = small_data();
    const MatrixXd V = d.rows(d.V, d.train), W = d.rows(d.W, d.train);
    TrainLog log;
    const Decoder dec = train_decoder(V, W, quick_train(), &log);
    CHECK(log.loss.size() == 30);
    CHECK(dec.predict(VectorXd::Zero(kElectrodes)).cwiseAbs().maxCoeff() < 1e-3);
    const Decoder again = train_decoder(V, W, quick_train());
    CHECK(again.W1 == dec.W1);
    CHECK(again.W2 == dec.W2);
    CHECK(again.A == dec.A);

    // analytic input gradient vs finite differences
    VectorXd vn = VectorXd::Constant(kElectrodes, 0.4);
    const VectorXd target = W.row(0).transpose();
    VectorXd g;
    dec.loss_and_grad(vn, target, g);
    for (int e : {0, 17, 62}) {
        VectorXd a = vn, b = vn, tmp;
        a[e] += 1e-6;
        b[e] -= 1e-6;
        const double fd = (dec.loss_and_grad(a, target, tmp) - dec.loss_and_grad(b, target, tmp)) / 2e-6;
        CHECK(g[e] == doctest::Approx(fd).epsilon(1e-4).scale(1e-6));
    }

    // no noise and no hidden units: the linear branch alone, close to the linear fit
    TrainOptions lin = quick_train();
    lin.hidden = 0;
    lin.noise_sigma = 0.0;
    lin.epochs = 60;
    const Decoder plain = train_decoder(V, W, lin);
    const LinearModel lm = fit_linear(V, W);
    const MatrixXd Vt = d.rows(d.V, d.test), Wt = d.rows(d.W, d.test);
    MatrixXd lp(Vt.rows(), Wt.cols());
    for (Eigen::Index i = 0; i < Vt.rows(); ++i) lp.row(i) = lm.predict(Vt.row(i).transpose()).transpose();
    const double rl = std::sqrt((lp - Wt).squaredNorm() / static_cast<double>(Wt.size()));
    const double rd = std::sqrt((plain.predict_batch(Vt) - Wt).squaredNorm() / static_cast<double>(Wt.size()));
    CHECK(rd <= 1.1 * rl);

    const nlohmann::json j = dec;
    CHECK(j.at("architecture").at("type") == "decoder");
    const Decoder back = j.get<Decoder>();
    CHECK((back.predict(V.row(3).transpose()) - dec.predict(V.row(3).transpose())).norm() < 1e-9);
}

TEST_CASE("encoder") {
    const Dataset& d = small_data();
    const MatrixXd V = d.rows(d.V, d.train), W = d.rows(d.W, d.train);
    const Encoder enc = train_encoder(V, W, quick_train());
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd(0.0, 100.0);
    for (int t = 0; t < 50; ++t) {
        VectorXd w(W.cols());
        for (auto& x : w) x = nd(rng);
        const VectorXd v = enc.predict(w);
        CHECK(v.minCoeff() >= 0.0);
        CHECK(v.maxCoeff() <= kVmax);
    }
    const Encoder again = train_encoder(V, W, quick_train());
    CHECK(again.W1 == enc.W1);
    CHECK(again.b2 == enc.b2);
    const nlohmann::json j = enc;
    const Encoder back = j.get<Encoder>();
    CHECK((back.predict(W.row(0).transpose()) - enc.predict(W.row(0).transpose())).norm() < 1e-9);
    TrainOptions bad = quick_train();
    bad.hidden = 0;
    CHECK_THROWS_AS(train_encoder(V, W, bad), InvalidArgument);
}

TEST_CASE("control strategies") {
    const Dataset& d = small_data();
    const MatrixXd V = d.rows(d.V, d.train), W = d.rows(d.W, d.train);
    Models m;
    m.linear = fit_linear(V, W);
    m.decoder = train_decoder(V, W, quick_train());
    m.encoder = train_encoder(V, W, quick_train());
    const VectorXd zero = VectorXd::Zero(W.cols());
    for (Strategy s : {Strategy::Linear, Strategy::Decoder}) CHECK(control::control(zero, s, m).maxCoeff() < 1e-6);
    const VectorXd target = d.W.row(d.test.front()).transpose();
    for (Strategy s : {Strategy::Linear, Strategy::Encoder, Strategy::Decoder, Strategy::EncoderDecoder}) {
        const VectorXd v = control::control(target, s, m);
        CHECK(v.minCoeff() >= 0.0);
        CHECK(v.maxCoeff() <= kVmax);
        CHECK(strategy_from_string(to_string(s)) == s);
    }
    Models none;
    CHECK_THROWS_AS(control::control(target, Strategy::Encoder, none), InvalidArgument);
    CHECK_THROWS_AS(strategy_from_string("telepathy"), InvalidArgument);

    const Comparison c = compare_strategies(device(), d, m);
    CHECK(c.rows.size() == 4);
    for (const auto& r : c.rows) CHECK(r.within_bounds);
    const nlohmann::json j = c;
    CHECK(j.at("strategies").size() == 4);
}

TEST_CASE("zero target gives near-zero drive") {
    const Dataset d = generate_dataset(device(), {900, 0.8, 0.1, 6});
    const MatrixXd V = d.rows(d.V, d.train), W = d.rows(d.W, d.train);
    TrainOptions t;
    t.epochs = 150;
    t.hidden = 64;
    t.seed = 2;
    Models m;
    m.decoder = train_decoder(V, W, t);
    m.encoder = train_encoder(V, W, t);
    // the networks reach zero only up to regression error; judge them by the wavefront
    const VectorXd zero = VectorXd::Zero(W.cols());
    const double typical = d.W.rowwise().norm().mean();
    for (Strategy s : {Strategy::Encoder, Strategy::EncoderDecoder})
        CHECK(device().apply(control::control(zero, s, m)).norm() < 0.1 * typical);
}

TEST_CASE("grid control interpolation") {
    std::vector<std::vector<double>> anchors;
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j) anchors.push_back({static_cast<double>(i), static_cast<double>(j), 10.0 * i + j});
    const auto at = grid_control(anchors, 9, 9, 3.0 / 8, 5.0 / 8);
    CHECK(at.value == anchors[5 * 9 + 3]);
    CHECK_FALSE(at.clamped);
    const auto mid = grid_control(anchors, 9, 9, 3.5 / 8, 5.0 / 8);
    for (std::size_t k = 0; k < 3; ++k)
        CHECK(mid.value[k] == doctest::Approx(0.5 * (anchors[5 * 9 + 3][k] + anchors[5 * 9 + 4][k])));
    const auto out = grid_control(anchors, 9, 9, 1.3, -0.2);
    CHECK(out.clamped);
    CHECK(out.value == anchors[0 * 9 + 8]);
    CHECK_THROWS_AS(grid_control(anchors, 8, 9, 0.5, 0.5), InvalidArgument);
}
