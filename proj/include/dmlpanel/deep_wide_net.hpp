#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dmlpanel/matrix.hpp"

namespace dmlpanel {

// Joint deep + wide regression network: the deep path runs the controls
// through ReLU hidden layers, the wide path takes fixed-effect dummies
// linearly, and a linear merge combines both.
struct DeepWideSpec {
    std::vector<int> deep_layers{16, 8};
    double l2_penalty = 0.05;  // on deep-path connection weights only

    void validate() const;
};

// All parameters in one flat buffer (per-layer weights row-major by output
// neuron, then bias; then wide weights, merge weights, final bias) so the
// optimizer and gradient checks can treat them uniformly.
struct DeepWideParams {
    int input_dim = 0;  // k controls
    int fe_dim = 0;     // f fixed-effect columns
    std::vector<int> layer_sizes;
    std::vector<double> values;

    static DeepWideParams zeros(const DeepWideSpec& spec, int k, int f);

    std::size_t size() const { return values.size(); }
    std::size_t weight_offset(int layer) const;
    std::size_t bias_offset(int layer) const;
    std::size_t wide_offset() const;
    std::size_t merge_offset() const;
    std::size_t final_bias_offset() const;
    int layer_input_dim(int layer) const { return layer == 0 ? input_dim : layer_sizes[static_cast<std::size_t>(layer - 1)]; }

    // Sum of squared deep-path connection weights (the L2-penalized set).
    double deep_weight_sum_sq() const;
};

// Deep weights: scaled-uniform with bound sqrt(6/(fan_in+fan_out)); merge
// weights likewise; wide weights and biases start at zero.
DeepWideParams init_params(const DeepWideSpec& spec, int k, int f, std::uint64_t seed);

struct FeatureView {
    const Matrix* controls;  // N x k
    const Matrix* fe;        // N x f

    std::size_t n_rows() const { return controls->rows(); }
};

double forward(const DeepWideParams& params, const double* controls_row, const double* fe_row);

struct LossGrad {
    double loss = 0.0;       // data_loss + penalty
    double data_loss = 0.0;  // mean absolute error over the batch
    double penalty = 0.0;    // l2 * sum of squared deep weights
    std::vector<double> grad;
};

// MAE loss with subgradient 0 at zero residual; reverse-mode gradients.
// targets is indexed by absolute row id.
LossGrad loss_and_gradient(const DeepWideParams& params, const FeatureView& x,
                           std::span<const int> rows, std::span<const double> targets, double l2);

struct TrainConfig {
    double learning_rate = 0.001;
    double moment1_decay = 0.9;
    double moment2_decay = 0.999;
    double epsilon = 1e-8;
    int batch_size = 64;
    int max_epochs = 500;
    int patience = 25;               // early stop when validation stalls
    double selection_window = 0.05;  // candidate epochs within 5% of best validation loss
    std::uint64_t seed = 0;

    void validate() const;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// Bias-corrected adaptive-moment update; t is the 1-based step index.
void adam_step(DeepWideParams& params, const std::vector<double>& grad, AdamState& state, int t,
               const TrainConfig& cfg);

struct TrainTrace {
    std::vector<double> train_loss;  // epoch-end MAE on the training rows
    std::vector<double> val_loss;    // epoch-end MAE on the validation rows
    int selected_epoch = 0;          // index into the loss vectors
    int epochs_run = 0;
};

struct TrainResult {
    DeepWideParams params;  // as of the selected epoch
    TrainTrace trace;
};

// Runs up to max_epochs with per-epoch deterministic batch shuffling; stops
// early after `patience` epochs without validation improvement. Among epochs
// whose validation loss is within selection_window of the best, returns the
// one minimizing |train loss - validation loss| (earliest on ties).
TrainResult train(const DeepWideSpec& spec, const TrainConfig& cfg, const FeatureView& x,
                  std::span<const int> train_rows, std::span<const int> val_rows,
                  std::span<const double> targets);

std::vector<double> predict(const DeepWideParams& params, const FeatureView& x,
                            std::span<const int> rows);

double mae(const DeepWideParams& params, const FeatureView& x, std::span<const int> rows,
           std::span<const double> targets);

}  // namespace dmlpanel
