#include "opfs/mlp.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "opfs/textio.hpp"

namespace opfs {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(Task t) {
    return t == Task::regression ? "regression" : "classification";
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::sigmoid: return "sigmoid";
        default: return "linear";
    }
}

Task task_from_string(const std::string& s) {
    if (s == "regression") return Task::regression;
    if (s == "classification") return Task::classification;
    throw DataError("unknown task '" + s + "'");
}

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "linear") return Activation::linear;
    throw DataError("unknown activation '" + s + "'");
}

namespace kernels {

namespace {

inline double affine_entry(const MatrixXd& W, const VectorXd& b, const MatrixXd& X,
                           Index i, Index j) {
    double acc = b(i);
    const Index in = W.cols();
    for (Index k = 0; k < in; ++k) acc += W(i, k) * X(k, j);
    return acc;
}

inline double grad_weights_entry(const MatrixXd& dZ, const MatrixXd& A, Index i, Index j) {
    double acc = 0;
    const Index m = dZ.cols();
    for (Index k = 0; k < m; ++k) acc += dZ(i, k) * A(j, k);
    return acc;
}

inline double backprop_input_entry(const MatrixXd& W, const MatrixXd& dZ, Index i, Index j) {
    double acc = 0;
    const Index out = W.rows();
    for (Index k = 0; k < out; ++k) acc += W(k, i) * dZ(k, j);
    return acc;
}

} // namespace

MatrixXd affine(const MatrixXd& W, const VectorXd& b, const MatrixXd& X, bool parallel) {
    if (W.cols() != X.rows() || b.size() != W.rows())
        throw DataError("affine: dimension mismatch");
    const Index out = W.rows(), m = X.cols();
    MatrixXd Z(out, m);
    if (parallel) {
#pragma omp parallel for collapse(2) schedule(static)
        for (Index j = 0; j < m; ++j)
            for (Index i = 0; i < out; ++i) Z(i, j) = affine_entry(W, b, X, i, j);
    } else {
        for (Index j = 0; j < m; ++j)
            for (Index i = 0; i < out; ++i) Z(i, j) = affine_entry(W, b, X, i, j);
    }
    return Z;
}

MatrixXd grad_weights(const MatrixXd& dZ, const MatrixXd& A, bool parallel) {
    if (dZ.cols() != A.cols()) throw DataError("grad_weights: batch size mismatch");
    const Index out = dZ.rows(), in = A.rows();
    MatrixXd dW(out, in);
    if (parallel) {
#pragma omp parallel for collapse(2) schedule(static)
        for (Index j = 0; j < in; ++j)
            for (Index i = 0; i < out; ++i) dW(i, j) = grad_weights_entry(dZ, A, i, j);
    } else {
        for (Index j = 0; j < in; ++j)
            for (Index i = 0; i < out; ++i) dW(i, j) = grad_weights_entry(dZ, A, i, j);
    }
    return dW;
}

MatrixXd backprop_input(const MatrixXd& W, const MatrixXd& dZ, bool parallel) {
    if (W.rows() != dZ.rows()) throw DataError("backprop_input: dimension mismatch");
    const Index in = W.cols(), m = dZ.cols();
    MatrixXd dX(in, m);
    if (parallel) {
#pragma omp parallel for collapse(2) schedule(static)
        for (Index j = 0; j < m; ++j)
            for (Index i = 0; i < in; ++i) dX(i, j) = backprop_input_entry(W, dZ, i, j);
    } else {
        for (Index j = 0; j < m; ++j)
            for (Index i = 0; i < in; ++i) dX(i, j) = backprop_input_entry(W, dZ, i, j);
    }
    return dX;
}

} // namespace kernels

void MlpParams::validate() const {
    const size_t L = W.size();
    if (b.size() != L || act.size() != L || sizes.size() != L + 1 || L == 0)
        throw DataError("mlp params: inconsistent layer counts");
    for (size_t l = 0; l < L; ++l) {
        if (W[l].rows() != sizes[l + 1] || W[l].cols() != sizes[l] ||
            b[l].size() != sizes[l + 1])
            throw DataError("mlp params: layer " + std::to_string(l) + " dimension mismatch");
        if (!W[l].allFinite() || !b[l].allFinite())
            throw DataError("mlp params: layer " + std::to_string(l) + " has non-finite entries");
    }
}

MlpParams init_params(int d_in, int d_out, int hidden_layers, int hidden_width,
                      Task task, Rng rng) {
    if (d_in <= 0 || d_out <= 0 || hidden_layers < 0 || (hidden_layers > 0 && hidden_width <= 0))
        throw TrainError("init_params: invalid layer spec");
    MlpParams p;
    p.sizes.push_back(d_in);
    for (int l = 0; l < hidden_layers; ++l) p.sizes.push_back(hidden_width);
    p.sizes.push_back(d_out);
    const Activation hidden =
        task == Task::regression ? Activation::relu : Activation::sigmoid;
    const Activation output =
        task == Task::regression ? Activation::linear : Activation::sigmoid;
    const int L = static_cast<int>(p.sizes.size()) - 1;
    for (int l = 0; l < L; ++l) {
        const int fan_in = p.sizes[l], fan_out = p.sizes[l + 1];
        const Activation a = l + 1 == L ? output : hidden;
        const double limit = a == Activation::relu
                                 ? std::sqrt(6.0 / fan_in)
                                 : std::sqrt(6.0 / (fan_in + fan_out));
        MatrixXd W(fan_out, fan_in);
        for (Index i = 0; i < W.rows(); ++i)
            for (Index j = 0; j < W.cols(); ++j)
                W(i, j) = (2.0 * rng.next_double() - 1.0) * limit;
        p.W.push_back(std::move(W));
        p.b.push_back(VectorXd::Zero(fan_out));
        p.act.push_back(a);
    }
    p.validate();
    return p;
}

namespace {

MatrixXd apply_activation(Activation a, const MatrixXd& Z) {
    switch (a) {
        case Activation::relu: return Z.array().max(0.0).matrix();
        case Activation::sigmoid: return (1.0 / (1.0 + (-Z.array()).exp())).matrix();
        default: return Z;
    }
}

struct ForwardCache {
    std::vector<MatrixXd> A; // A[0] = input, A[l+1] = act(Z[l]); length L+1
    std::vector<MatrixXd> Z; // pre-activations; length L
};

ForwardCache forward_cached(const MlpParams& p, const MatrixXd& x_cols, bool parallel) {
    if (x_cols.rows() != p.input_width())
        throw DataError("forward: input width " + std::to_string(x_cols.rows()) +
                        " != expected " + std::to_string(p.input_width()));
    ForwardCache c;
    const size_t L = p.W.size();
    c.A.resize(L + 1);
    c.Z.resize(L);
    c.A[0] = x_cols;
    for (size_t l = 0; l < L; ++l) {
        c.Z[l] = kernels::affine(p.W[l], p.b[l], c.A[l], parallel);
        c.A[l + 1] = apply_activation(p.act[l], c.Z[l]);
    }
    return c;
}

} // namespace

MatrixXd forward_batch(const MlpParams& p, const MatrixXd& x_cols, bool parallel) {
    return forward_cached(p, x_cols, parallel).A.back();
}

VectorXd forward(const MlpParams& p, const VectorXd& x) {
    return forward_batch(p, x, false).col(0);
}

double loss(Task task, const MatrixXd& predictions, const MatrixXd& targets) {
    if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols())
        throw DataError("loss: shape mismatch");
    const double mk = static_cast<double>(predictions.rows()) * predictions.cols();
    if (mk == 0) throw DataError("loss: empty batch");
    if (task == Task::regression) return (predictions - targets).squaredNorm() / mk;
    const auto p = predictions.array().min(1.0 - 1e-12).max(1e-12);
    const auto y = targets.array();
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).sum() / mk;
}

Gradients backprop(const MlpParams& p, Task task, const MatrixXd& x_cols,
                   const MatrixXd& y_cols, bool parallel) {
    if (x_cols.cols() != y_cols.cols() || x_cols.cols() == 0)
        throw DataError("backprop: empty or mismatched batch");
    if (y_cols.rows() != p.output_width())
        throw DataError("backprop: target width mismatch");
    const Activation out_act = p.act.back();
    if ((task == Task::regression && out_act != Activation::linear) ||
        (task == Task::classification && out_act != Activation::sigmoid))
        throw DataError("backprop: output activation does not match task");

    const ForwardCache c = forward_cached(p, x_cols, parallel);
    const size_t L = p.W.size();
    const double mk = static_cast<double>(x_cols.cols()) * y_cols.rows();

    // Output delta on the pre-activation.  MSE+linear: 2(P-Y)/(mK);
    // BCE+sigmoid combined: (P-Y)/(mK) (the BCE clamp acts as identity here).
    MatrixXd dZ = task == Task::regression ? MatrixXd(2.0 * (c.A[L] - y_cols) / mk)
                                           : MatrixXd((c.A[L] - y_cols) / mk);

    Gradients g;
    g.dW.resize(L);
    g.db.resize(L);
    for (size_t l = L; l-- > 0;) {
        g.dW[l] = kernels::grad_weights(dZ, c.A[l], parallel);
        g.db[l] = dZ.rowwise().sum();
        if (l > 0) {
            const MatrixXd dA = kernels::backprop_input(p.W[l], dZ, parallel);
            if (p.act[l - 1] == Activation::relu)
                dZ = (dA.array() * (c.Z[l - 1].array() > 0.0).cast<double>()).matrix();
            else if (p.act[l - 1] == Activation::sigmoid)
                dZ = (dA.array() * c.A[l].array() * (1.0 - c.A[l].array())).matrix();
            else
                dZ = dA;
        }
    }
    return g;
}

AdamState make_adam_state(const MlpParams& p) {
    AdamState st;
    for (size_t l = 0; l < p.W.size(); ++l) {
        st.mW.push_back(MatrixXd::Zero(p.W[l].rows(), p.W[l].cols()));
        st.vW.push_back(MatrixXd::Zero(p.W[l].rows(), p.W[l].cols()));
        st.mb.push_back(VectorXd::Zero(p.b[l].size()));
        st.vb.push_back(VectorXd::Zero(p.b[l].size()));
    }
    return st;
}

void adam_step(MlpParams& p, const Gradients& g, AdamState& st, const TrainConfig& cfg) {
    if (g.dW.size() != p.W.size() || st.mW.size() != p.W.size())
        throw DataError("adam_step: shape mismatch");
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (size_t l = 0; l < p.W.size(); ++l) {
        st.mW[l] = cfg.beta1 * st.mW[l] + (1.0 - cfg.beta1) * g.dW[l];
        st.vW[l] = (cfg.beta2 * st.vW[l].array() +
                    (1.0 - cfg.beta2) * g.dW[l].array().square())
                       .matrix();
        p.W[l].array() -=
            cfg.learning_rate * (st.mW[l].array() / bc1) /
            ((st.vW[l].array() / bc2).sqrt() + cfg.eps_adam);
        st.mb[l] = cfg.beta1 * st.mb[l] + (1.0 - cfg.beta1) * g.db[l];
        st.vb[l] = (cfg.beta2 * st.vb[l].array() +
                    (1.0 - cfg.beta2) * g.db[l].array().square())
                       .matrix();
        p.b[l].array() -=
            cfg.learning_rate * (st.mb[l].array() / bc1) /
            ((st.vb[l].array() / bc2).sqrt() + cfg.eps_adam);
    }
}

std::string train_config_hash(const TrainConfig& cfg) {
    nlohmann::json j;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["validation_split"] = cfg.validation_split;
    j["learning_rate"] = cfg.learning_rate;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["eps_adam"] = cfg.eps_adam;
    j["seed"] = cfg.seed;
    j["hidden_layers"] = cfg.hidden_layers;
    j["hidden_width"] = cfg.hidden_width;
    j["task"] = to_string(cfg.task);
    return fnv1a_hex(j.dump());
}

namespace {

void fit_scaler(const MatrixXd& rows, VectorXd& mean, VectorXd& std_,
                std::vector<std::uint8_t>& constant) {
    const Index n = rows.rows(), d = rows.cols();
    mean = rows.colwise().mean();
    std_.resize(d);
    constant.assign(static_cast<size_t>(d), 0);
    for (Index j = 0; j < d; ++j) {
        const double var = (rows.col(j).array() - mean(j)).square().sum() / n;
        const double s = std::sqrt(var);
        if (s < 1e-12) {
            std_(j) = 1.0;
            constant[static_cast<size_t>(j)] = 1;
        } else {
            std_(j) = s;
        }
    }
}

// Rows-as-samples -> standardized samples-as-columns.
MatrixXd standardize_cols(const MatrixXd& rows, const VectorXd& mean, const VectorXd& std_) {
    if (rows.cols() != mean.size())
        throw DataError("scaler: feature width mismatch");
    MatrixXd cols(rows.cols(), rows.rows());
    for (Index i = 0; i < rows.rows(); ++i)
        cols.col(i) = (rows.row(i).transpose() - mean).cwiseQuotient(std_);
    return cols;
}

} // namespace

TrainOutput train(const MatrixXd& X, const MatrixXd& Y, const TrainConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const Index n = X.rows();
    if (Y.rows() != n)
        throw TrainError("train: X has " + std::to_string(n) + " rows but Y has " +
                         std::to_string(Y.rows()));
    if (n < 2) throw TrainError("train: need at least 2 rows, got " + std::to_string(n));
    if (!(cfg.validation_split > 0.0 && cfg.validation_split < 1.0))
        throw TrainError("train: validation_split must be in (0,1)");
    if (cfg.epochs <= 0 || cfg.batch_size <= 0)
        throw TrainError("train: epochs and batch_size must be positive");
    if (!X.allFinite() || !Y.allFinite())
        throw TrainError("train: non-finite entries in inputs or targets");

    const Index n_val =
        std::max<Index>(1, static_cast<Index>(static_cast<double>(n) * cfg.validation_split));
    const Index n_train = n - n_val;
    if (n_train < 1) throw TrainError("train: validation split leaves no training rows");
    if (cfg.batch_size > n_train)
        throw TrainError("train: batch_size " + std::to_string(cfg.batch_size) +
                         " exceeds training rows " + std::to_string(n_train));

    TrainedMlp model;
    model.task = cfg.task;
    model.config_hash = train_config_hash(cfg);
    fit_scaler(X.topRows(n_train), model.scaler.x_mean, model.scaler.x_std,
               model.scaler.x_const);
    if (cfg.task == Task::regression)
        fit_scaler(Y.topRows(n_train), model.scaler.y_mean, model.scaler.y_std,
                   model.scaler.y_const);

    const MatrixXd x_cols = standardize_cols(X, model.scaler.x_mean, model.scaler.x_std);
    MatrixXd y_cols;
    if (cfg.task == Task::regression)
        y_cols = standardize_cols(Y, model.scaler.y_mean, model.scaler.y_std);
    else
        y_cols = Y.transpose();

    const MatrixXd x_train = x_cols.leftCols(n_train), x_val = x_cols.rightCols(n_val);
    const MatrixXd y_train = y_cols.leftCols(n_train), y_val = y_cols.rightCols(n_val);

    Rng root(cfg.seed);
    model.params = init_params(static_cast<int>(X.cols()), static_cast<int>(Y.cols()),
                               cfg.hidden_layers, cfg.hidden_width, cfg.task,
                               root.split("init"));
    AdamState st = make_adam_state(model.params);

    std::vector<Index> idx(static_cast<size_t>(n_train));
    std::iota(idx.begin(), idx.end(), Index{0});
    TrainReport report;
    MatrixXd xb(x_cols.rows(), cfg.batch_size), yb(y_cols.rows(), cfg.batch_size);
    const Rng shuffle_root = root.split("shuffle");

    for (int e = 0; e < cfg.epochs; ++e) {
        Rng sh = shuffle_root.split(static_cast<std::uint64_t>(e));
        for (Index i = n_train - 1; i > 0; --i) {
            const Index j =
                static_cast<Index>(sh.next_below(static_cast<std::uint64_t>(i) + 1));
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        for (Index s = 0; s < n_train; s += cfg.batch_size) {
            const Index m = std::min<Index>(cfg.batch_size, n_train - s);
            for (Index j = 0; j < m; ++j) {
                xb.col(j) = x_train.col(idx[static_cast<size_t>(s + j)]);
                yb.col(j) = y_train.col(idx[static_cast<size_t>(s + j)]);
            }
            const Gradients g =
                backprop(model.params, cfg.task, xb.leftCols(m), yb.leftCols(m), cfg.parallel);
            adam_step(model.params, g, st, cfg);
        }
        const double tl =
            loss(cfg.task, forward_batch(model.params, x_train, cfg.parallel), y_train);
        const double vl =
            loss(cfg.task, forward_batch(model.params, x_val, cfg.parallel), y_val);
        if (!std::isfinite(tl) || !std::isfinite(vl))
            throw TrainError("train: non-finite loss at epoch " + std::to_string(e) +
                             " (train=" + fmt17(tl) + ", val=" + fmt17(vl) + ")");
        report.train_loss.push_back(tl);
        report.val_loss.push_back(vl);
    }
    report.final_val_loss = report.val_loss.back();
    report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return TrainOutput{std::move(model), std::move(report)};
}

MatrixXd predict(const TrainedMlp& m, const MatrixXd& x_rows, bool parallel) {
    const MatrixXd x_cols = standardize_cols(x_rows, m.scaler.x_mean, m.scaler.x_std);
    MatrixXd out_cols = forward_batch(m.params, x_cols, parallel);
    if (m.task == Task::regression) {
        for (Index j = 0; j < out_cols.cols(); ++j)
            out_cols.col(j) =
                out_cols.col(j).cwiseProduct(m.scaler.y_std) + m.scaler.y_mean;
    } else {
        out_cols = out_cols.array().min(1.0 - 1e-12).max(1e-12).matrix();
    }
    return out_cols.transpose();
}

namespace {

nlohmann::json vec_json(const VectorXd& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

VectorXd vec_from_json(const nlohmann::json& a) {
    VectorXd v(static_cast<Index>(a.size()));
    for (size_t i = 0; i < a.size(); ++i) v(static_cast<Index>(i)) = a[i].get<double>();
    return v;
}

} // namespace

void save_mlp(const std::string& path, const TrainedMlp& m) {
    m.params.validate();
    nlohmann::json j;
    j["schema_version"] = 1;
    j["tool_version"] = kToolVersion;
    j["task"] = to_string(m.task);
    j["sizes"] = m.params.sizes;
    nlohmann::json acts = nlohmann::json::array();
    for (Activation a : m.params.act) acts.push_back(to_string(a));
    j["activations"] = acts;
    nlohmann::json ws = nlohmann::json::array(), bs = nlohmann::json::array();
    for (const MatrixXd& W : m.params.W) {
        nlohmann::json flat = nlohmann::json::array(); // row-major
        for (Index i = 0; i < W.rows(); ++i)
            for (Index jcol = 0; jcol < W.cols(); ++jcol) flat.push_back(W(i, jcol));
        ws.push_back(std::move(flat));
    }
    for (const VectorXd& b : m.params.b) bs.push_back(vec_json(b));
    j["weights"] = std::move(ws);
    j["biases"] = std::move(bs);
    j["scaler"] = {{"x_mean", vec_json(m.scaler.x_mean)},
                   {"x_std", vec_json(m.scaler.x_std)},
                   {"x_const", m.scaler.x_const},
                   {"y_mean", vec_json(m.scaler.y_mean)},
                   {"y_std", vec_json(m.scaler.y_std)},
                   {"y_const", m.scaler.y_const}};
    j["config_hash"] = m.config_hash;
    write_file(path, j.dump(2) + "\n");
}

TrainedMlp load_mlp(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("model parse failure in " + path + ": " + e.what());
    }
    TrainedMlp m;
    try {
        if (j.at("schema_version").get<int>() != 1)
            throw DataError("model " + path + ": unsupported schema_version");
        m.task = task_from_string(j.at("task").get<std::string>());
        m.params.sizes = j.at("sizes").get<std::vector<int>>();
        for (const auto& a : j.at("activations"))
            m.params.act.push_back(activation_from_string(a.get<std::string>()));
        const auto& ws = j.at("weights");
        const auto& bs = j.at("biases");
        if (ws.size() + 1 != m.params.sizes.size() || bs.size() != ws.size())
            throw DataError("model " + path + ": layer count mismatch");
        for (size_t l = 0; l < ws.size(); ++l) {
            const Index rows = m.params.sizes[l + 1], cols = m.params.sizes[l];
            if (static_cast<Index>(ws[l].size()) != rows * cols)
                throw DataError("model " + path + ": weight size mismatch at layer " +
                                std::to_string(l));
            MatrixXd W(rows, cols);
            size_t k = 0;
            for (Index i = 0; i < rows; ++i)
                for (Index jcol = 0; jcol < cols; ++jcol) W(i, jcol) = ws[l][k++].get<double>();
            m.params.W.push_back(std::move(W));
            m.params.b.push_back(vec_from_json(bs[l]));
        }
        const auto& sc = j.at("scaler");
        m.scaler.x_mean = vec_from_json(sc.at("x_mean"));
        m.scaler.x_std = vec_from_json(sc.at("x_std"));
        m.scaler.x_const = sc.at("x_const").get<std::vector<std::uint8_t>>();
        m.scaler.y_mean = vec_from_json(sc.at("y_mean"));
        m.scaler.y_std = vec_from_json(sc.at("y_std"));
        m.scaler.y_const = sc.at("y_const").get<std::vector<std::uint8_t>>();
        m.config_hash = j.at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("model " + path + ": missing or malformed fields: " + e.what());
    }
    m.params.validate();
    if (m.scaler.x_mean.size() != m.params.input_width() ||
        m.scaler.x_std.size() != m.params.input_width())
        throw DataError("model " + path + ": scaler width mismatch");
    return m;
}

} // namespace opfs
