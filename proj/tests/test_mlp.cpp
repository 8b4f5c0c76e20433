#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "opfs/mlp.hpp"
#include "support.hpp"

using namespace opfs;
using namespace opfs::test;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

bool params_equal(const MlpParams& a, const MlpParams& b) {
    if (a.sizes != b.sizes || a.act != b.act) return false;
    for (std::size_t l = 0; l < a.W.size(); ++l) {
        if (std::memcmp(a.W[l].data(), b.W[l].data(), sizeof(double) * a.W[l].size()) != 0)
            return false;
        if (std::memcmp(a.b[l].data(), b.b[l].data(), sizeof(double) * a.b[l].size()) != 0)
            return false;
    }
    return true;
}

VectorXd pack_params(const MlpParams& p) {
    long n = 0;
    for (std::size_t l = 0; l < p.W.size(); ++l) n += p.W[l].size() + p.b[l].size();
    VectorXd x(n);
    long at = 0;
    for (std::size_t l = 0; l < p.W.size(); ++l) {
        x.segment(at, p.W[l].size()) = Eigen::Map<const VectorXd>(p.W[l].data(), p.W[l].size());
        at += p.W[l].size();
        x.segment(at, p.b[l].size()) = p.b[l];
        at += p.b[l].size();
    }
    return x;
}

MlpParams unpack_params(MlpParams proto, const VectorXd& x) {
    long at = 0;
    for (std::size_t l = 0; l < proto.W.size(); ++l) {
        proto.W[l] = Eigen::Map<const MatrixXd>(x.data() + at, proto.W[l].rows(),
                                                proto.W[l].cols());
        at += proto.W[l].size();
        proto.b[l] = x.segment(at, proto.b[l].size());
        at += proto.b[l].size();
    }
    return proto;
}

VectorXd pack_grads(const Gradients& g) {
    long n = 0;
    for (std::size_t l = 0; l < g.dW.size(); ++l) n += g.dW[l].size() + g.db[l].size();
    VectorXd x(n);
    long at = 0;
    for (std::size_t l = 0; l < g.dW.size(); ++l) {
        x.segment(at, g.dW[l].size()) =
            Eigen::Map<const VectorXd>(g.dW[l].data(), g.dW[l].size());
        at += g.dW[l].size();
        x.segment(at, g.db[l].size()) = g.db[l];
        at += g.db[l].size();
    }
    return x;
}

// Max relative gap between backprop gradients and central differences of the
// batch loss over every parameter of a small network.
double grad_fd_gap(Task task, std::uint64_t seed) {
    Rng rng(seed);
    const MlpParams p0 = init_params(4, 3, 1, 2, task, rng.split("init"));
    MatrixXd x(4, 5), y(3, 5); // columns are samples here
    Rng draw = rng.split("data");
    for (int i = 0; i < x.size(); ++i) x.data()[i] = draw.next_double(-1.5, 1.5);
    for (int i = 0; i < y.size(); ++i)
        y.data()[i] = task == Task::classification ? double(draw.next_u64() & 1)
                                                   : draw.next_double(-1, 1);
    const VectorXd g = pack_grads(backprop(p0, task, x, y, false));
    const auto f = [&](const VectorXd& v) {
        return loss(task, forward_batch(unpack_params(p0, v), x, false), y);
    };
    const VectorXd x0 = pack_params(p0);
    double worst = 0;
    for (int j = 0; j < x0.size(); ++j) {
        VectorXd e = x0;
        const double h = 1e-6;
        e[j] = x0[j] + h;
        const double fp = f(e);
        e[j] = x0[j] - h;
        const double fm = f(e);
        const double fd = (fp - fm) / (2 * h);
        worst = std::max(worst, std::abs(fd - g[j]) / std::max(1.0, std::abs(g[j])));
    }
    return worst;
}

} // namespace

TEST_CASE("kernel closed forms") {
    MatrixXd W(2, 2), X(2, 2);
    W << 1, 2, 3, 4;
    X << 1, 0, 0, 1;
    VectorXd b(2);
    b << 1, -1;
    const MatrixXd Z = kernels::affine(W, b, X, false);
    CHECK(Z(0, 0) == 2);
    CHECK(Z(0, 1) == 3);
    CHECK(Z(1, 0) == 2);
    CHECK(Z(1, 1) == 3);

    // dW = dZ A^T and dX = W^T dZ on the same tiny operands.
    const MatrixXd dW = kernels::grad_weights(Z, X, false);
    CHECK(dW.isApprox(Z * X.transpose(), 1e-14));
    const MatrixXd dX = kernels::backprop_input(W, Z, false);
    CHECK(dX.isApprox(W.transpose() * Z, 1e-14));

    CHECK_THROWS_AS(kernels::affine(W, b, MatrixXd::Zero(3, 2), false), DataError);
}

TEST_CASE("parallel kernels are bitwise identical to the serial reference") {
    Rng rng(5);
    MatrixXd W(33, 17), X(17, 29), dZ(33, 29);
    VectorXd b(33);
    Rng d = rng.split("k");
    for (int i = 0; i < W.size(); ++i) W.data()[i] = d.next_double(-1, 1);
    for (int i = 0; i < X.size(); ++i) X.data()[i] = d.next_double(-1, 1);
    for (int i = 0; i < dZ.size(); ++i) dZ.data()[i] = d.next_double(-1, 1);
    for (int i = 0; i < b.size(); ++i) b[i] = d.next_double(-1, 1);

    const MatrixXd z_s = kernels::affine(W, b, X, false);
    const MatrixXd z_p = kernels::affine(W, b, X, true);
    CHECK(std::memcmp(z_s.data(), z_p.data(), sizeof(double) * z_s.size()) == 0);
    const MatrixXd gw_s = kernels::grad_weights(dZ, X, false);
    const MatrixXd gw_p = kernels::grad_weights(dZ, X, true);
    CHECK(std::memcmp(gw_s.data(), gw_p.data(), sizeof(double) * gw_s.size()) == 0);
    const MatrixXd bi_s = kernels::backprop_input(W, dZ, false);
    const MatrixXd bi_p = kernels::backprop_input(W, dZ, true);
    CHECK(std::memcmp(bi_s.data(), bi_p.data(), sizeof(double) * bi_s.size()) == 0);
}

TEST_CASE("init_params builds the documented architecture") {
    const MlpParams reg = init_params(5, 3, 2, 7, Task::regression, Rng(1));
    CHECK(reg.sizes == std::vector<int>{5, 7, 7, 3});
    CHECK(reg.act == std::vector<Activation>{Activation::relu, Activation::relu,
                                             Activation::linear});
    const MlpParams cls = init_params(5, 3, 1, 4, Task::classification, Rng(1));
    CHECK(cls.sizes == std::vector<int>{5, 4, 3});
    CHECK(cls.act == std::vector<Activation>{Activation::sigmoid, Activation::sigmoid});

    for (const auto& bl : reg.b) CHECK(bl.lpNorm<Eigen::Infinity>() == 0);
    const double lim0 = std::sqrt(6.0 / 5.0); // He limit, fan-in 5
    CHECK(reg.W[0].lpNorm<Eigen::Infinity>() <= lim0);
    CHECK(reg.W[0].lpNorm<Eigen::Infinity>() > 0.1 * lim0); // actually random

    CHECK(params_equal(reg, init_params(5, 3, 2, 7, Task::regression, Rng(1))));
    CHECK(!params_equal(reg, init_params(5, 3, 2, 7, Task::regression, Rng(2))));
    CHECK_THROWS_AS(init_params(0, 3, 1, 4, Task::regression, Rng(1)), TrainError);
    CHECK_THROWS_AS(init_params(5, 3, -1, 4, Task::regression, Rng(1)), TrainError);
}

TEST_CASE("forward pass applies the documented activations") {
    MlpParams p;
    p.sizes = {1, 1};
    p.W = {MatrixXd::Constant(1, 1, 2.0)};
    p.b = {VectorXd::Constant(1, 0.5)};
    p.act = {Activation::linear};
    p.validate();
    CHECK(forward(p, VectorXd::Constant(1, 3.0))[0] == doctest::Approx(6.5));

    p.act = {Activation::relu};
    CHECK(forward(p, VectorXd::Constant(1, -1.0))[0] == 0.0); // relu(-1.5)
    CHECK(forward(p, VectorXd::Constant(1, 1.0))[0] == doctest::Approx(2.5));

    p.act = {Activation::sigmoid};
    CHECK(forward(p, VectorXd::Constant(1, -0.25))[0] == doctest::Approx(0.5)); // z = 0
}

TEST_CASE("loss values match hand calculations") {
    MatrixXd pred(2, 1), target(2, 1);
    pred << 1, 2;
    target << 0, 0;
    CHECK(loss(Task::regression, pred, target) == doctest::Approx(2.5)); // (1+4)/2

    MatrixXd p2 = MatrixXd::Constant(2, 3, 0.5);
    MatrixXd t2(2, 3);
    t2 << 1, 0, 1, 0, 1, 0;
    CHECK(loss(Task::classification, p2, t2) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // Saturated predictions are clamped, never infinite.
    MatrixXd p3 = MatrixXd::Zero(1, 1), t3 = MatrixXd::Zero(1, 1);
    CHECK(std::isfinite(loss(Task::classification, p3, t3)));
    t3(0, 0) = 1; // worst case: log(1e-12)
    CHECK(loss(Task::classification, p3, t3) == doctest::Approx(-std::log(1e-12)));

    CHECK_THROWS_AS(loss(Task::regression, pred, t2), DataError);
}

TEST_CASE("backprop matches central differences on both tasks") {
    for (std::uint64_t seed : {101u, 102u, 103u, 104u, 105u}) {
        CHECK(grad_fd_gap(Task::regression, seed) < 1e-5);
        CHECK(grad_fd_gap(Task::classification, seed) < 1e-5);
    }
}

TEST_CASE("adam first step matches the closed form") {
    MlpParams p;
    p.sizes = {1, 1};
    p.W = {MatrixXd::Constant(1, 1, 0.7)};
    p.b = {VectorXd::Constant(1, -0.2)};
    p.act = {Activation::linear};
    Gradients g;
    g.dW = {MatrixXd::Constant(1, 1, 2.0)};
    g.db = {VectorXd::Constant(1, -1.0)};
    AdamState st = make_adam_state(p);
    TrainConfig cfg; // lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8
    adam_step(p, g, st, cfg);
    // After bias correction the first step is lr * g / (|g| + eps).
    CHECK(p.W[0](0, 0) ==
          doctest::Approx(0.7 - 1e-3 * 2.0 / (2.0 + 1e-8)).epsilon(1e-14));
    CHECK(p.b[0][0] == doctest::Approx(-0.2 + 1e-3 * 1.0 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(st.t == 1);
}

TEST_CASE("a small regressor learns y = 2x") {
    const int n = 64;
    MatrixXd X(n, 1), Y(n, 1);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = -1.0 + 2.0 * i / (n - 1);
        Y(i, 0) = 2.0 * X(i, 0);
    }
    TrainConfig cfg;
    cfg.epochs = 300;
    cfg.batch_size = 16;
    cfg.learning_rate = 1e-2;
    cfg.hidden_layers = 1;
    cfg.hidden_width = 8;
    cfg.seed = 3;
    const TrainOutput out = train(X, Y, cfg);
    CHECK(out.report.train_loss.size() == 300);
    CHECK(out.report.val_loss.size() == 300);
    CHECK(out.report.final_val_loss == out.report.val_loss.back());
    CHECK(out.report.final_val_loss < 1e-3);

    MatrixXd probe(1, 1);
    probe << 0.35;
    CHECK(predict(out.model, probe)(0, 0) == doctest::Approx(0.70).epsilon(0.05));
}

TEST_CASE("a small classifier separates a linear rule and emits open-interval scores") {
    Rng rng(8);
    const int n = 120;
    MatrixXd X(n, 2), Y(n, 1);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = rng.next_double(-1, 1);
        X(i, 1) = rng.next_double(-1, 1);
        Y(i, 0) = X(i, 0) > 0 ? 1.0 : 0.0;
    }
    TrainConfig cfg;
    cfg.task = Task::classification;
    cfg.epochs = 400;
    cfg.batch_size = 24;
    cfg.learning_rate = 3e-2;
    cfg.hidden_width = 8;
    cfg.seed = 4;
    const TrainOutput out = train(X, Y, cfg);
    const MatrixXd scores = predict(out.model, X);
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        CHECK(scores(i, 0) > 0.0);
        CHECK(scores(i, 0) < 1.0);
        if ((scores(i, 0) >= 0.5) == (Y(i, 0) >= 0.5)) ++correct;
    }
    CHECK(correct >= int(0.95 * n));
}

TEST_CASE("training is deterministic in the seed and bitwise serial == parallel") {
    Rng rng(12);
    MatrixXd X(40, 3), Y(40, 2);
    for (int i = 0; i < X.size(); ++i) X.data()[i] = rng.next_double(-1, 1);
    for (int i = 0; i < Y.size(); ++i) Y.data()[i] = rng.next_double(-1, 1);
    TrainConfig cfg;
    cfg.epochs = 25;
    cfg.batch_size = 8;
    cfg.hidden_width = 6;
    cfg.seed = 9;

    const TrainOutput a = train(X, Y, cfg);
    const TrainOutput b = train(X, Y, cfg);
    CHECK(params_equal(a.model.params, b.model.params));
    CHECK(a.report.train_loss == b.report.train_loss);
    CHECK(a.report.val_loss == b.report.val_loss);

    TrainConfig serial = cfg;
    serial.parallel = false;
    CHECK(params_equal(a.model.params, train(X, Y, serial).model.params));

    TrainConfig other = cfg;
    other.seed = 10;
    CHECK(!params_equal(a.model.params, train(X, Y, other).model.params));
    CHECK(train_config_hash(cfg) != train_config_hash(other));
    CHECK(train_config_hash(cfg) == train_config_hash(serial)); // parallel flag: no effect
}

TEST_CASE("constant features are standardized safely") {
    MatrixXd X(30, 2), Y(30, 1);
    Rng rng(14);
    for (int i = 0; i < 30; ++i) {
        X(i, 0) = 5.0; // constant column
        X(i, 1) = rng.next_double(-1, 1);
        Y(i, 0) = 3 * X(i, 1);
    }
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 8;
    cfg.hidden_width = 4;
    cfg.seed = 2;
    const TrainOutput out = train(X, Y, cfg);
    REQUIRE(out.model.scaler.x_const.size() == 2);
    CHECK(out.model.scaler.x_const[0] == 1);
    CHECK(out.model.scaler.x_const[1] == 0);
    CHECK(out.model.scaler.x_std[0] == 1.0);
    const MatrixXd pred = predict(out.model, X);
    CHECK(pred.allFinite());
}

TEST_CASE("train rejects malformed inputs") {
    MatrixXd X = MatrixXd::Zero(10, 2), Y = MatrixXd::Zero(9, 1);
    CHECK_THROWS_AS(train(X, Y, TrainConfig{}), TrainError);

    MatrixXd Y2 = MatrixXd::Zero(10, 1);
    TrainConfig cfg;
    cfg.batch_size = 100; // only 8 training rows after the validation split
    CHECK_THROWS_AS(train(X, Y2, cfg), TrainError);

    cfg = TrainConfig{};
    cfg.epochs = 0;
    CHECK_THROWS_AS(train(X, Y2, cfg), TrainError);

    cfg = TrainConfig{};
    cfg.validation_split = 1.5;
    CHECK_THROWS_AS(train(X, Y2, cfg), TrainError);

    X(3, 1) = std::nan("");
    cfg = TrainConfig{};
    cfg.batch_size = 4;
    CHECK_THROWS_AS(train(X, Y2, cfg), TrainError);
}

TEST_CASE("model persistence round-trips exactly") {
    Rng rng(21);
    MatrixXd X(24, 3), Y(24, 2);
    for (int i = 0; i < X.size(); ++i) X.data()[i] = rng.next_double(-1, 1);
    for (int i = 0; i < Y.size(); ++i) Y.data()[i] = double(rng.next_u64() & 1);
    TrainConfig cfg;
    cfg.task = Task::classification;
    cfg.epochs = 15;
    cfg.batch_size = 6;
    cfg.hidden_width = 5;
    cfg.seed = 31;
    const TrainedMlp m = train(X, Y, cfg).model;

    TempDir tmp;
    const std::string path = tmp.path + "/model.json";
    save_mlp(path, m);
    const TrainedMlp back = load_mlp(path);
    CHECK(params_equal(back.params, m.params));
    CHECK(back.task == m.task);
    CHECK(back.config_hash == m.config_hash);
    CHECK(back.scaler.x_mean == m.scaler.x_mean);
    CHECK(back.scaler.x_std == m.scaler.x_std);
    CHECK(back.scaler.x_const == m.scaler.x_const);

    const MatrixXd p1 = predict(m, X), p2 = predict(back, X);
    CHECK(std::memcmp(p1.data(), p2.data(), sizeof(double) * p1.size()) == 0);

    // Same bytes when saved twice.
    save_mlp(tmp.path + "/model2.json", m);
    CHECK(slurp(tmp.path + "/model2.json") == slurp(path));

    CHECK_THROWS_AS(load_mlp(tmp.path + "/missing.json"), DataError);
    std::filesystem::create_directories(tmp.path + "/bad");
    {
        std::ofstream bad(tmp.path + "/bad/model.json");
        bad << "{ not json";
    }
    CHECK_THROWS_AS(load_mlp(tmp.path + "/bad/model.json"), DataError);
}

TEST_CASE("task and activation names round-trip") {
    for (Task t : {Task::regression, Task::classification})
        CHECK(task_from_string(to_string(t)) == t);
    for (Activation a : {Activation::relu, Activation::sigmoid, Activation::linear})
        CHECK(activation_from_string(to_string(a)) == a);
    CHECK_THROWS_AS(task_from_string("svm"), DataError);
    CHECK_THROWS_AS(activation_from_string("tanh"), DataError);
}
