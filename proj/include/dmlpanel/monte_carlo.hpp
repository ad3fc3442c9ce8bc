#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmlpanel/panel_data.hpp"

namespace dmlpanel {

// Sigmoid-index data generating process. Outcome and treatment are
//   tau = w_m (2 sigma(s m'x) - 1) + delta_j + xi_t + v
//   p   = theta0 tau + w_g (2 sigma(s g'x) - 1) + gamma_j + eta_t + u
// with per-coordinate coefficient sd coef_sd/sqrt(k), (g, m) correlated at
// coef_corr, the entity/period effect pairs correlated at fe_corr, and
// s = index_scale.
struct DGPConfig {
    int k = 947;
    int T = 7;
    int J = 290;
    double theta0 = -0.5;
    double coef_corr = 0.25;
    double fe_corr = 0.25;
    int replications = 100;
    double noise_sd_u = 0.5;
    double noise_sd_v = 0.5;
    double coef_sd = 1.0;
    double index_scale = 1.0;
    double outer_weight_g = 1.0;
    double outer_weight_m = 1.0;
    double fe_sd = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
};

struct DGPTruth {
    double theta0 = 0.0;
    std::vector<double> g_coef, m_coef;  // length k
    std::vector<double> gamma, delta;    // length J
    std::vector<double> eta, xi;         // length T
    std::vector<double> u, v;            // length N
};

struct DGPDraw {
    PanelDataset panel;
    DGPTruth truth;
};

// Deterministic in (cfg.seed, replication).
DGPDraw draw_dgp(const DGPConfig& cfg, int replication);

enum class Estimator { ols_subset, dml_lasso, dml_dw };

std::string estimator_name(Estimator e);
Estimator estimator_from_name(const std::string& name);

struct KdeResult {
    std::vector<double> grid;
    std::vector<double> density;
};

// Gaussian kernel, Silverman bandwidth 0.9 min(sd, IQR/1.34) n^(-1/5),
// grid spanning [min - 3h, max + 3h].
KdeResult kde(std::span<const double> samples, int grid_size);

struct EstimatorBias {
    std::string name;
    std::vector<double> biases;  // theta_hat - theta0 per replication
    double mean_bias = 0.0;
    double sd_bias = 0.0;
    double median_bias = 0.0;
    int failures = 0;
    KdeResult kde;
};

struct BiasReport {
    DGPConfig config;
    int dml_repetitions = 0;
    int ols_subset_size = 0;
    std::vector<EstimatorBias> estimators;
};

struct ExperimentOptions {
    int dml_repetitions = 11;  // odd
    int ols_subset_size = 3;
    int kde_grid_size = 256;
    int threads = 1;
};

// One shared draw per replication, every requested estimator run on it.
// Per-replication failures are recorded and excluded; aborts when more than
// 10% of replications fail for any estimator.
BiasReport run_experiment(const DGPConfig& cfg, const std::vector<Estimator>& estimators,
                          const ExperimentOptions& opts);

// Writes the panel CSV plus "<path>.schema.json" and "<path>.truth.json".
void export_dgp_csv(const DGPDraw& draw, const std::string& csv_path);

nlohmann::json bias_report_json(const BiasReport& report);

struct SimProfile {
    std::string name;
    DGPConfig dgp;
    int dml_repetitions = 11;
};

// Desk scale: k=50, J=100, T=7, 100 replications, 11 DML repetitions.
SimProfile desk_profile();
// Paper scale: k=947, J=290, T=7, 100 replications, 51 DML repetitions.
SimProfile paper_profile();
SimProfile profile_by_name(const std::string& name);

}  // namespace dmlpanel
