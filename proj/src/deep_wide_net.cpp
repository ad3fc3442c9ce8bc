#include "dmlpanel/deep_wide_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dmlpanel/common.hpp"
#include "dmlpanel/rng.hpp"

namespace dmlpanel {

void DeepWideSpec::validate() const {
    if (deep_layers.empty()) throw Error::usage("deep-wide spec needs at least one deep layer");
    for (int l : deep_layers)
        if (l < 1) throw Error::usage("deep layer sizes must be positive");
    if (l2_penalty < 0.0) throw Error::usage("l2 penalty must be nonnegative");
}

void TrainConfig::validate() const {
    if (learning_rate <= 0.0) throw Error::usage("learning rate must be positive");
    if (moment1_decay <= 0.0 || moment1_decay >= 1.0 || moment2_decay <= 0.0 ||
        moment2_decay >= 1.0)
        throw Error::usage("moment decays must lie in (0, 1)");
    if (epsilon <= 0.0) throw Error::usage("epsilon must be positive");
    if (batch_size < 1) throw Error::usage("batch size must be positive");
    if (max_epochs < 1) throw Error::usage("max epochs must be positive");
    if (patience < 1) throw Error::usage("patience must be positive");
    if (selection_window < 0.0) throw Error::usage("selection window must be nonnegative");
}

namespace {

std::size_t layer_param_count(const DeepWideParams& p, int layer) {
    std::size_t in = static_cast<std::size_t>(p.layer_input_dim(layer));
    std::size_t out = static_cast<std::size_t>(p.layer_sizes[static_cast<std::size_t>(layer)]);
    return in * out + out;
}

}  // namespace

std::size_t DeepWideParams::weight_offset(int layer) const {
    std::size_t off = 0;
    for (int l = 0; l < layer; ++l) off += layer_param_count(*this, l);
    return off;
}

std::size_t DeepWideParams::bias_offset(int layer) const {
    std::size_t in = static_cast<std::size_t>(layer_input_dim(layer));
    std::size_t out = static_cast<std::size_t>(layer_sizes[static_cast<std::size_t>(layer)]);
    return weight_offset(layer) + in * out;
}

std::size_t DeepWideParams::wide_offset() const {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer_sizes.size(); ++l)
        off += layer_param_count(*this, static_cast<int>(l));
    return off;
}

std::size_t DeepWideParams::merge_offset() const {
    return wide_offset() + static_cast<std::size_t>(fe_dim);
}

std::size_t DeepWideParams::final_bias_offset() const {
    return merge_offset() + static_cast<std::size_t>(layer_sizes.back());
}

double DeepWideParams::deep_weight_sum_sq() const {
    double acc = 0.0;
    for (std::size_t l = 0; l < layer_sizes.size(); ++l) {
        std::size_t in = static_cast<std::size_t>(layer_input_dim(static_cast<int>(l)));
        std::size_t out = static_cast<std::size_t>(layer_sizes[l]);
        acc += kernels::sum_sq(values.data() + weight_offset(static_cast<int>(l)), in * out);
    }
    return acc;
}

DeepWideParams DeepWideParams::zeros(const DeepWideSpec& spec, int k, int f) {
    spec.validate();
    if (k < 0) throw Error::usage("control count must be nonnegative");
    if (f < 1) throw Error::usage("fixed-effect column count must be positive");
    DeepWideParams p;
    p.input_dim = k;
    p.fe_dim = f;
    p.layer_sizes = spec.deep_layers;
    p.values.assign(p.final_bias_offset() + 1, 0.0);
    return p;
}

DeepWideParams init_params(const DeepWideSpec& spec, int k, int f, std::uint64_t seed) {
    if (k < 1) throw Error::usage("init_params: control count must be positive");
    DeepWideParams p = DeepWideParams::zeros(spec, k, f);
    Rng rng(derive_seed(seed, 0x1417));

    for (std::size_t l = 0; l < p.layer_sizes.size(); ++l) {
        std::size_t in = static_cast<std::size_t>(p.layer_input_dim(static_cast<int>(l)));
        std::size_t out = static_cast<std::size_t>(p.layer_sizes[l]);
        double bound = std::sqrt(6.0 / static_cast<double>(in + out));
        double* w = p.values.data() + p.weight_offset(static_cast<int>(l));
        for (std::size_t i = 0; i < in * out; ++i) w[i] = rng.uniform(-bound, bound);
        // biases stay zero
    }
    // Wide weights stay zero: fixed effects are learned purely from data.
    std::size_t merge_in = static_cast<std::size_t>(p.layer_sizes.back());
    double merge_bound = std::sqrt(6.0 / static_cast<double>(merge_in + 1));
    double* merge = p.values.data() + p.merge_offset();
    for (std::size_t i = 0; i < merge_in; ++i) merge[i] = rng.uniform(-merge_bound, merge_bound);
    return p;
}

namespace {

// Per-call scratch for forward/backward passes.
struct Workspace {
    std::vector<std::vector<double>> pre;    // per layer, pre-activation
    std::vector<std::vector<double>> act;    // per layer, post-ReLU
    std::vector<std::vector<double>> delta;  // per layer, backprop buffer

    explicit Workspace(const DeepWideParams& p) {
        std::size_t layers = p.layer_sizes.size();
        pre.resize(layers);
        act.resize(layers);
        delta.resize(layers);
        for (std::size_t l = 0; l < layers; ++l) {
            std::size_t width = static_cast<std::size_t>(p.layer_sizes[l]);
            pre[l].resize(width);
            act[l].resize(width);
            delta[l].resize(width);
        }
    }
};

double forward_ws(const DeepWideParams& p, const double* controls_row, const double* fe_row,
                  Workspace& ws) {
    std::size_t layers = p.layer_sizes.size();
    const double* input = controls_row;
    for (std::size_t l = 0; l < layers; ++l) {
        std::size_t in = static_cast<std::size_t>(p.layer_input_dim(static_cast<int>(l)));
        std::size_t out = static_cast<std::size_t>(p.layer_sizes[l]);
        const double* w = p.values.data() + p.weight_offset(static_cast<int>(l));
        const double* b = p.values.data() + p.bias_offset(static_cast<int>(l));
        for (std::size_t j = 0; j < out; ++j)
            ws.pre[l][j] = kernels::dot(w + j * in, input, in) + b[j];
        kernels::relu(ws.pre[l].data(), ws.act[l].data(), out);
        input = ws.act[l].data();
    }
    std::size_t top = static_cast<std::size_t>(p.layer_sizes.back());
    double out = kernels::dot(p.values.data() + p.merge_offset(), ws.act[layers - 1].data(), top);
    out += kernels::dot(p.values.data() + p.wide_offset(), fe_row,
                        static_cast<std::size_t>(p.fe_dim));
    out += p.values[p.final_bias_offset()];
    return out;
}

// Accumulates the gradient of go * output into grad for one sample.
void backward_ws(const DeepWideParams& p, const double* controls_row, const double* fe_row,
                 double go, Workspace& ws, std::vector<double>& grad) {
    std::size_t layers = p.layer_sizes.size();
    std::size_t top = static_cast<std::size_t>(p.layer_sizes.back());

    grad[p.final_bias_offset()] += go;
    kernels::axpy(go, ws.act[layers - 1].data(), grad.data() + p.merge_offset(), top);
    kernels::axpy(go, fe_row, grad.data() + p.wide_offset(), static_cast<std::size_t>(p.fe_dim));

    // d(output)/d(act_top) = merge weights
    std::vector<double>& dtop = ws.delta[layers - 1];
    for (std::size_t j = 0; j < top; ++j)
        dtop[j] = go * p.values[p.merge_offset() + j];
    kernels::relu_backward(ws.pre[layers - 1].data(), dtop.data(), dtop.data(), top);

    for (int l = static_cast<int>(layers) - 1; l >= 0; --l) {
        std::size_t in = static_cast<std::size_t>(p.layer_input_dim(l));
        std::size_t out = static_cast<std::size_t>(p.layer_sizes[static_cast<std::size_t>(l)]);
        const double* input = l == 0 ? controls_row : ws.act[static_cast<std::size_t>(l - 1)].data();
        const std::vector<double>& d = ws.delta[static_cast<std::size_t>(l)];
        double* gw = grad.data() + p.weight_offset(l);
        double* gb = grad.data() + p.bias_offset(l);
        for (std::size_t j = 0; j < out; ++j) {
            kernels::axpy(d[j], input, gw + j * in, in);
            gb[j] += d[j];
        }
        if (l > 0) {
            std::vector<double>& dprev = ws.delta[static_cast<std::size_t>(l - 1)];
            std::fill(dprev.begin(), dprev.end(), 0.0);
            const double* w = p.values.data() + p.weight_offset(l);
            for (std::size_t j = 0; j < out; ++j)
                kernels::axpy(d[j], w + j * in, dprev.data(), in);
            kernels::relu_backward(ws.pre[static_cast<std::size_t>(l - 1)].data(), dprev.data(),
                                   dprev.data(), in);
        }
    }
}

double sign_or_zero(double r) {
    if (r > 0.0) return 1.0;
    if (r < 0.0) return -1.0;
    return 0.0;
}

}  // namespace

double forward(const DeepWideParams& params, const double* controls_row, const double* fe_row) {
    Workspace ws(params);
    return forward_ws(params, controls_row, fe_row, ws);
}

LossGrad loss_and_gradient(const DeepWideParams& params, const FeatureView& x,
                           std::span<const int> rows, std::span<const double> targets, double l2) {
    if (rows.empty()) throw Error::usage("loss_and_gradient: empty batch");
    if (x.controls->cols() != static_cast<std::size_t>(params.input_dim) ||
        x.fe->cols() != static_cast<std::size_t>(params.fe_dim))
        throw Error::usage("loss_and_gradient: feature dimensions do not match parameters");

    LossGrad out;
    out.grad.assign(params.size(), 0.0);
    Workspace ws(params);

    double inv_b = 1.0 / static_cast<double>(rows.size());
    double abs_sum = 0.0;
    for (int row : rows) {
        std::size_t r = static_cast<std::size_t>(row);
        double pred = forward_ws(params, x.controls->row(r), x.fe->row(r), ws);
        double resid = pred - targets[r];
        abs_sum += std::fabs(resid);
        double go = sign_or_zero(resid) * inv_b;
        if (go != 0.0) backward_ws(params, x.controls->row(r), x.fe->row(r), go, ws, out.grad);
    }
    out.data_loss = abs_sum * inv_b;

    out.penalty = l2 * params.deep_weight_sum_sq();
    if (l2 > 0.0) {
        for (std::size_t l = 0; l < params.layer_sizes.size(); ++l) {
            std::size_t in = static_cast<std::size_t>(params.layer_input_dim(static_cast<int>(l)));
            std::size_t outn = static_cast<std::size_t>(params.layer_sizes[l]);
            std::size_t off = params.weight_offset(static_cast<int>(l));
            kernels::axpy(2.0 * l2, params.values.data() + off, out.grad.data() + off, in * outn);
        }
    }
    out.loss = out.data_loss + out.penalty;
    return out;
}

void adam_step(DeepWideParams& params, const std::vector<double>& grad, AdamState& state, int t,
               const TrainConfig& cfg) {
    if (t < 1) throw Error::usage("adam_step: step index must be >= 1");
    if (grad.size() != params.size() || state.m.size() != params.size() ||
        state.v.size() != params.size())
        throw Error::usage("adam_step: shape mismatch");
    double bias1 = 1.0 - std::pow(cfg.moment1_decay, t);
    double bias2 = 1.0 - std::pow(cfg.moment2_decay, t);
    kernels::adam_update(params.values.data(), state.m.data(), state.v.data(), grad.data(),
                         params.size(), cfg.learning_rate, cfg.moment1_decay, cfg.moment2_decay,
                         cfg.epsilon, bias1, bias2);
}

double mae(const DeepWideParams& params, const FeatureView& x, std::span<const int> rows,
           std::span<const double> targets) {
    Workspace ws(params);
    double acc = 0.0;
    for (int row : rows) {
        std::size_t r = static_cast<std::size_t>(row);
        acc += std::fabs(forward_ws(params, x.controls->row(r), x.fe->row(r), ws) - targets[r]);
    }
    return acc / static_cast<double>(rows.size());
}

TrainResult train(const DeepWideSpec& spec, const TrainConfig& cfg, const FeatureView& x,
                  std::span<const int> train_rows, std::span<const int> val_rows,
                  std::span<const double> targets) {
    spec.validate();
    cfg.validate();
    if (train_rows.empty() || val_rows.empty())
        throw Error::usage("train: training and validation sets must be non-empty");

    DeepWideParams params = init_params(spec, static_cast<int>(x.controls->cols()),
                                        static_cast<int>(x.fe->cols()),
                                        derive_seed(cfg.seed, 0x1A17));
    AdamState state(params.size());
    Rng shuffle_rng(derive_seed(cfg.seed, 0x5AFF));

    struct Candidate {
        int epoch;
        double train_mae;
        double val_mae;
        std::vector<double> values;
    };
    std::vector<Candidate> candidates;
    double best_val = std::numeric_limits<double>::infinity();
    int stall = 0;
    int t = 0;

    TrainTrace trace;
    std::vector<int> order(train_rows.begin(), train_rows.end());

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t len = std::min(static_cast<std::size_t>(cfg.batch_size),
                                       order.size() - start);
            std::span<const int> batch(order.data() + start, len);
            LossGrad lg = loss_and_gradient(params, x, batch, targets, spec.l2_penalty);
            if (!std::isfinite(lg.loss))
                throw Error::compute("training diverged at epoch " + std::to_string(epoch));
            adam_step(params, lg.grad, state, ++t, cfg);
        }

        double train_mae = mae(params, x, train_rows, targets);
        double val_mae = mae(params, x, val_rows, targets);
        if (!std::isfinite(train_mae) || !std::isfinite(val_mae))
            throw Error::compute("training diverged at epoch " + std::to_string(epoch));
        trace.train_loss.push_back(train_mae);
        trace.val_loss.push_back(val_mae);

        if (val_mae < best_val) {
            best_val = val_mae;
            stall = 0;
            double cutoff = best_val * (1.0 + cfg.selection_window);
            std::erase_if(candidates, [&](const Candidate& c) { return c.val_mae > cutoff; });
        } else {
            ++stall;
        }
        if (val_mae <= best_val * (1.0 + cfg.selection_window))
            candidates.push_back({epoch, train_mae, val_mae, params.values});

        if (stall >= cfg.patience) break;
    }
    trace.epochs_run = static_cast<int>(trace.train_loss.size());

    double cutoff = best_val * (1.0 + cfg.selection_window);
    const Candidate* chosen = nullptr;
    for (const Candidate& c : candidates) {
        if (c.val_mae > cutoff) continue;
        if (chosen == nullptr ||
            std::fabs(c.train_mae - c.val_mae) < std::fabs(chosen->train_mae - chosen->val_mae))
            chosen = &c;
    }
    // best_val always qualifies, so a candidate exists
    trace.selected_epoch = chosen->epoch;
    TrainResult result;
    result.params = params;
    result.params.values = chosen->values;
    result.trace = std::move(trace);
    return result;
}

std::vector<double> predict(const DeepWideParams& params, const FeatureView& x,
                            std::span<const int> rows) {
    if (x.controls->cols() != static_cast<std::size_t>(params.input_dim) ||
        x.fe->cols() != static_cast<std::size_t>(params.fe_dim))
        throw Error::usage("predict: feature dimensions do not match parameters");
    Workspace ws(params);
    std::vector<double> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::size_t r = static_cast<std::size_t>(rows[i]);
        out[i] = forward_ws(params, x.controls->row(r), x.fe->row(r), ws);
    }
    return out;
}

}  // namespace dmlpanel
