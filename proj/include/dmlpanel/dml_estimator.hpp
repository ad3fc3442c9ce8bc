#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmlpanel/deep_wide_net.hpp"
#include "dmlpanel/matrix.hpp"
#include "dmlpanel/panel_data.hpp"

namespace dmlpanel {

struct OlsNuisance {};

struct LassoNuisance {
    std::optional<double> fixed_lambda;  // CV when absent
    int cv_folds = 5;
    int grid_size = 50;
    double grid_min_ratio = 1e-4;
};

struct DeepWideNuisance {
    DeepWideSpec spec{};
    TrainConfig train{};
};

using NuisanceKind = std::variant<OlsNuisance, LassoNuisance, DeepWideNuisance>;

std::string nuisance_name(const NuisanceKind& kind);
nlohmann::json nuisance_json(const NuisanceKind& kind);

// Row-aligned inputs for one estimation run. The fixed-effect design carries
// the intercept; controls may be empty (fixed-effects-only nuisances).
struct EstimationSample {
    const Matrix* controls;
    const Matrix* fe;
    std::span<const double> outcome;
    std::span<const double> treatment;

    std::size_t n_rows() const { return outcome.size(); }
};

// Fitted nuisance predictors: g maps rows to predicted outcome, m to
// predicted treatment. Both were trained only on the auxiliary sample.
struct NuisanceModels {
    std::function<std::vector<double>(std::span<const int>)> predict_outcome;
    std::function<std::vector<double>(std::span<const int>)> predict_treatment;
};

NuisanceModels fit_nuisances(const EstimationSample& sample, std::span<const int> aux_rows,
                             const NuisanceKind& kind, std::uint64_t seed);

struct FoldTheta {
    double theta = 0.0;
    std::vector<double> v_hat;          // treatment residual tau - m_hat
    std::vector<double> outcome_resid;  // p - g_hat
    std::vector<double> treatment;      // tau on the fold
    double score = 0.0;                 // orthogonal score evaluated at theta
};

// theta = (sum v tau)^-1 sum v (p - g_hat) over the main sample. Throws when
// |sum v tau| <= 1e-10 * n (no identifying treatment variation) and checks
// that the score at theta vanishes to 1e-8 * n.
FoldTheta theta_on_split(std::span<const double> outcome, std::span<const double> treatment,
                         std::span<const double> g_hat, std::span<const double> m_hat);

struct CrossFitResult {
    double theta = 0.0;
    double se = 0.0;
    double theta_main = 0.0;     // models on I^c, evaluated on I
    double theta_swapped = 0.0;  // models on I, evaluated on I^c
    double max_fold_score = 0.0;
};

// Average of both fold estimates; influence-function SE pooled over folds.
CrossFitResult theta_crossfit(const EstimationSample& sample, const NuisanceKind& kind,
                              std::uint64_t seed);

struct DMLConfig {
    int repetitions = 51;  // must be odd
    NuisanceKind nuisance{OlsNuisance{}};
    std::uint64_t seed = 0;
};

struct RepetitionOutcome {
    std::uint64_t seed = 0;
    double theta = 0.0;
    double se = 0.0;
    double max_fold_score = 0.0;
};

struct DMLResult {
    double theta_median = 0.0;
    double standard_error = 0.0;
    std::vector<double> per_repetition_thetas;
    std::vector<double> per_repetition_ses;
    std::vector<RepetitionOutcome> repetitions;
    int n_obs = 0;
    int failed_repetitions = 0;
    std::vector<std::string> failure_messages;
    double max_fold_score = 0.0;
};

// Runs theta_crossfit with seeds seed+1..seed+R; reports the median theta and
// the median-adjusted standard error. Aborts when more than 20% of
// repetitions fail.
DMLResult dml_estimate(const EstimationSample& sample, const DMLConfig& cfg, int threads = 1);

// Exact lower-median order statistic (the middle element for odd n).
double exact_median(std::vector<double> values);

// Generic entry point: any column can play outcome or treatment ("outcome"
// and "treatment" address the schema roles; otherwise a control column name).
// Controls come from the named group tags only; outcome, treatment, and
// controls are standardized before estimation.
DMLResult estimate_effect(const PanelDataset& d, const std::string& outcome_col,
                          const std::string& treatment_col,
                          const std::set<std::string>& include_groups, const DMLConfig& cfg,
                          int threads = 1);

nlohmann::json dml_result_json(const DMLResult& result, const DMLConfig& cfg);

}  // namespace dmlpanel
