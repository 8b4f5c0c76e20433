#pragma once
// From-scratch fully connected networks: a multi-output regressor and
// multi-label classifiers trained with mini-batch backprop + Adam.
//
// Conventions:
//  * Public train/predict take rows-as-samples matrices (matching the dataset
//    matrices); internally batches are held samples-as-columns (d x m).
//  * Regression: ReLU hidden layers, linear output, MSE averaged over samples
//    and output dimensions.  Classification: sigmoid hidden layers, elementwise
//    sigmoid output (independent labels), BCE averaged the same way with
//    predictions clamped to [1e-12, 1 - 1e-12].
//  * Every matrix kernel computes each output entry with a serial inner
//    accumulation, so the OpenMP path is bitwise identical to the serial
//    reference (compared by tools/opfs_bench.cpp and the unit tests).
//  * Training is deterministic given the seed: fixed init draw order, fixed
//    per-epoch shuffles, validation split = trailing rows held out before any
//    shuffling.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opfs/common.hpp"
#include "opfs/rng.hpp"

namespace opfs {

enum class Task { regression, classification };
enum class Activation { relu, sigmoid, linear };

std::string to_string(Task t);
std::string to_string(Activation a);
Task task_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);

namespace kernels {

// Z = W*X + b (column broadcast).  W: (out x in), X: (in x m) -> Z: (out x m).
Eigen::MatrixXd affine(const Eigen::MatrixXd& W, const Eigen::VectorXd& b,
                       const Eigen::MatrixXd& X, bool parallel);

// dW = dZ * A^T.  dZ: (out x m), A: (in x m) -> dW: (out x in).
Eigen::MatrixXd grad_weights(const Eigen::MatrixXd& dZ, const Eigen::MatrixXd& A,
                             bool parallel);

// dX = W^T * dZ.  W: (out x in), dZ: (out x m) -> dX: (in x m).
Eigen::MatrixXd backprop_input(const Eigen::MatrixXd& W, const Eigen::MatrixXd& dZ,
                               bool parallel);

} // namespace kernels

struct MlpParams {
    std::vector<Eigen::MatrixXd> W; // W[l]: (sizes[l+1] x sizes[l])
    std::vector<Eigen::VectorXd> b; // b[l]: sizes[l+1]
    std::vector<int> sizes;         // layer widths, length L+1
    std::vector<Activation> act;    // activation on layer l's output, length L

    int input_width() const { return sizes.empty() ? 0 : sizes.front(); }
    int output_width() const { return sizes.empty() ? 0 : sizes.back(); }
    void validate() const; // dimension agreement + finite entries
};

// Seeded uniform init: ReLU layers get He-style fan-in scaling
// (limit = sqrt(6/fan_in)), sigmoid/linear layers Xavier-style
// (limit = sqrt(6/(fan_in+fan_out))).  Biases start at zero.
MlpParams init_params(int d_in, int d_out, int hidden_layers, int hidden_width,
                      Task task, Rng rng);

struct TrainConfig {
    int epochs = 1000;
    int batch_size = 100;
    double validation_split = 0.20;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
    std::uint64_t seed = 0;
    int hidden_layers = 1;
    int hidden_width = 256;
    Task task = Task::regression;
    bool parallel = true; // OpenMP kernels (bitwise-identical to serial path)
};

std::string train_config_hash(const TrainConfig& cfg);

struct ScalerStats {
    Eigen::VectorXd x_mean, x_std;
    std::vector<std::uint8_t> x_const; // constant features (std forced to 1)
    Eigen::VectorXd y_mean, y_std;     // regression targets only (else empty)
    std::vector<std::uint8_t> y_const;
};

struct TrainReport {
    std::vector<double> train_loss; // per epoch, measured after its updates
    std::vector<double> val_loss;
    double final_val_loss = 0;
    double wall_time_s = 0;
};

struct TrainedMlp {
    MlpParams params;
    ScalerStats scaler;
    Task task = Task::regression;
    std::string config_hash;
};

// Forward pass on already-standardized inputs, samples as columns.
Eigen::MatrixXd forward_batch(const MlpParams& p, const Eigen::MatrixXd& x_cols,
                              bool parallel);
Eigen::VectorXd forward(const MlpParams& p, const Eigen::VectorXd& x);

// Mean loss over samples AND output dimensions (MSE or clamped BCE).
double loss(Task task, const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets);

struct Gradients {
    std::vector<Eigen::MatrixXd> dW;
    std::vector<Eigen::VectorXd> db;
};

// Exact gradients of loss(task, forward(x_cols), y_cols) w.r.t. all parameters.
Gradients backprop(const MlpParams& p, Task task, const Eigen::MatrixXd& x_cols,
                   const Eigen::MatrixXd& y_cols, bool parallel);

struct AdamState {
    std::vector<Eigen::MatrixXd> mW, vW;
    std::vector<Eigen::VectorXd> mb, vb;
    long t = 0;
};

AdamState make_adam_state(const MlpParams& p);
void adam_step(MlpParams& p, const Gradients& g, AdamState& st, const TrainConfig& cfg);

struct TrainOutput {
    TrainedMlp model;
    TrainReport report;
};

// Rows-as-samples.  The last max(1, floor(n * validation_split)) rows are the
// validation split, held out before shuffling.  Throws TrainError on invalid
// shapes/config, batch_size > training rows, or a non-finite loss.
TrainOutput train(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const TrainConfig& cfg);

// Rows-as-samples.  Applies the scaler, runs the network, destandardizes
// regression outputs back to target units; classification outputs are clamped
// into (0,1) so no exact 0/1 scores are ever emitted.
Eigen::MatrixXd predict(const TrainedMlp& m, const Eigen::MatrixXd& x_rows,
                        bool parallel = true);

void save_mlp(const std::string& path, const TrainedMlp& m);
TrainedMlp load_mlp(const std::string& path);

} // namespace opfs
