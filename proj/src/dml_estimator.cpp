#include "dmlpanel/dml_estimator.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dmlpanel/common.hpp"
#include "dmlpanel/linear_models.hpp"
#include "dmlpanel/parallel.hpp"
#include "dmlpanel/rng.hpp"

namespace dmlpanel {

std::string nuisance_name(const NuisanceKind& kind) {
    if (std::holds_alternative<OlsNuisance>(kind)) return "ols";
    if (std::holds_alternative<LassoNuisance>(kind)) return "lasso";
    return "deep_wide";
}

nlohmann::json nuisance_json(const NuisanceKind& kind) {
    nlohmann::json j;
    j["kind"] = nuisance_name(kind);
    if (const auto* lasso = std::get_if<LassoNuisance>(&kind)) {
        if (lasso->fixed_lambda)
            j["lambda"] = *lasso->fixed_lambda;
        else
            j["lambda"] = "cv";
        j["cv_folds"] = lasso->cv_folds;
        j["grid_size"] = lasso->grid_size;
        j["grid_min_ratio"] = lasso->grid_min_ratio;
    } else if (const auto* dw = std::get_if<DeepWideNuisance>(&kind)) {
        j["deep_layers"] = dw->spec.deep_layers;
        j["l2_penalty"] = dw->spec.l2_penalty;
        j["learning_rate"] = dw->train.learning_rate;
        j["moment1_decay"] = dw->train.moment1_decay;
        j["moment2_decay"] = dw->train.moment2_decay;
        j["epsilon"] = dw->train.epsilon;
        j["batch_size"] = dw->train.batch_size;
        j["max_epochs"] = dw->train.max_epochs;
        j["patience"] = dw->train.patience;
        j["selection_window"] = dw->train.selection_window;
    }
    return j;
}

namespace {

// Linear predictor over [fe | controls]; used for the OLS nuisance and as the
// fixed-effects-only fallback when the control matrix is empty.
std::function<std::vector<double>(std::span<const int>)> linear_predictor(
    const EstimationSample& sample, std::span<const int> aux_rows, std::span<const double> target) {
    std::size_t fe_cols = sample.fe->cols();
    std::size_t k = sample.controls->cols();
    Matrix design(aux_rows.size(), fe_cols + k);
    for (std::size_t i = 0; i < aux_rows.size(); ++i) {
        std::size_t r = static_cast<std::size_t>(aux_rows[i]);
        double* dst = design.row(i);
        const double* fe = sample.fe->row(r);
        for (std::size_t j = 0; j < fe_cols; ++j) dst[j] = fe[j];
        const double* c = sample.controls->row(r);
        for (std::size_t j = 0; j < k; ++j) dst[fe_cols + j] = c[j];
    }
    std::vector<double> y = gather<double>(target, aux_rows);
    LeastSquares ls = lstsq(design, y);
    std::vector<double> beta = std::move(ls.coefficients);

    const Matrix* fe = sample.fe;
    const Matrix* controls = sample.controls;
    return [beta = std::move(beta), fe, controls, fe_cols, k](std::span<const int> rows) {
        std::vector<double> out(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::size_t r = static_cast<std::size_t>(rows[i]);
            double acc = kernels::dot(beta.data(), fe->row(r), fe_cols);
            acc += kernels::dot(beta.data() + fe_cols, controls->row(r), k);
            out[i] = acc;
        }
        return out;
    };
}

// Lasso features: controls plus fixed-effect dummies (no intercept column;
// the lasso carries its own). Columns are standardized on the auxiliary
// sample; in-fold constant columns are dropped.
struct LassoFeatureMap {
    std::vector<double> mean, sd;   // per feature
    std::vector<bool> keep;
    std::size_t k = 0, fe_cols = 0;

    std::size_t n_features() const { return k + fe_cols - 1; }

    double raw(const EstimationSample& s, std::size_t row, std::size_t j) const {
        if (j < k) return (*s.controls)(row, j);
        return (*s.fe)(row, j - k + 1);  // skip intercept
    }
};

std::function<std::vector<double>(std::span<const int>)> lasso_predictor(
    const EstimationSample& sample, std::span<const int> aux_rows, std::span<const double> target,
    const LassoNuisance& cfg, std::uint64_t seed) {
    LassoFeatureMap map;
    map.k = sample.controls->cols();
    map.fe_cols = sample.fe->cols();
    std::size_t p = map.n_features();
    std::size_t n = aux_rows.size();

    map.mean.assign(p, 0.0);
    map.sd.assign(p, 1.0);
    map.keep.assign(p, false);
    std::vector<std::size_t> active;
    for (std::size_t j = 0; j < p; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            mean += map.raw(sample, static_cast<std::size_t>(aux_rows[i]), j);
        mean /= static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = map.raw(sample, static_cast<std::size_t>(aux_rows[i]), j) - mean;
            ss += d * d;
        }
        double sd = std::sqrt(ss / static_cast<double>(n - 1));
        if (sd > 1e-12) {
            map.mean[j] = mean;
            map.sd[j] = sd;
            map.keep[j] = true;
            active.push_back(j);
        }
    }

    Matrix x(n, active.size());
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t r = static_cast<std::size_t>(aux_rows[i]);
        for (std::size_t a = 0; a < active.size(); ++a) {
            std::size_t j = active[a];
            x(i, a) = (map.raw(sample, r, j) - map.mean[j]) / map.sd[j];
        }
    }
    std::vector<double> y = gather<double>(target, aux_rows);

    double lambda;
    if (cfg.fixed_lambda) {
        lambda = *cfg.fixed_lambda;
    } else {
        double lmax = lasso_lambda_max(x, y);
        if (lmax <= 0.0) lmax = 1.0;
        std::vector<double> grid = lasso_lambda_grid(lmax, cfg.grid_size, cfg.grid_min_ratio);
        lambda = lasso_lambda_cv(x, y, cfg.cv_folds, grid, derive_seed(seed, 0x1A550));
    }
    LassoFit fit = lasso_fit(x, y, lambda);

    const EstimationSample* s = &sample;
    return [fit = std::move(fit), map = std::move(map), active = std::move(active),
            s](std::span<const int> rows) {
        std::vector<double> out(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::size_t r = static_cast<std::size_t>(rows[i]);
            double acc = fit.intercept;
            for (std::size_t a = 0; a < active.size(); ++a) {
                std::size_t j = active[a];
                acc += fit.coefficients[a] * ((map.raw(*s, r, j) - map.mean[j]) / map.sd[j]);
            }
            out[i] = acc;
        }
        return out;
    };
}

std::function<std::vector<double>(std::span<const int>)> deep_wide_predictor(
    const EstimationSample& sample, std::span<const int> aux_rows, std::span<const double> target,
    const DeepWideNuisance& cfg, std::uint64_t seed) {
    TrainValSplit tv = split_train_val(aux_rows, derive_seed(seed, 0x7A1));
    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = derive_seed(seed, 0x7A2);
    FeatureView x{sample.controls, sample.fe};
    TrainResult result = train(cfg.spec, train_cfg, x, tv.train, tv.validation, target);

    const Matrix* controls = sample.controls;
    const Matrix* fe = sample.fe;
    return [params = std::move(result.params), controls, fe](std::span<const int> rows) {
        FeatureView view{controls, fe};
        return predict(params, view, rows);
    };
}

}  // namespace

NuisanceModels fit_nuisances(const EstimationSample& sample, std::span<const int> aux_rows,
                             const NuisanceKind& kind, std::uint64_t seed) {
    if (aux_rows.empty()) throw Error::usage("fit_nuisances: empty auxiliary sample");

    NuisanceModels models;
    bool fe_only = sample.controls->cols() == 0;
    if (fe_only || std::holds_alternative<OlsNuisance>(kind)) {
        models.predict_outcome = linear_predictor(sample, aux_rows, sample.outcome);
        models.predict_treatment = linear_predictor(sample, aux_rows, sample.treatment);
    } else if (const auto* lasso = std::get_if<LassoNuisance>(&kind)) {
        models.predict_outcome =
            lasso_predictor(sample, aux_rows, sample.outcome, *lasso, derive_seed(seed, 1));
        models.predict_treatment =
            lasso_predictor(sample, aux_rows, sample.treatment, *lasso, derive_seed(seed, 2));
    } else {
        const auto& dw = std::get<DeepWideNuisance>(kind);
        models.predict_outcome =
            deep_wide_predictor(sample, aux_rows, sample.outcome, dw, derive_seed(seed, 1));
        models.predict_treatment =
            deep_wide_predictor(sample, aux_rows, sample.treatment, dw, derive_seed(seed, 2));
    }
    return models;
}

FoldTheta theta_on_split(std::span<const double> outcome, std::span<const double> treatment,
                         std::span<const double> g_hat, std::span<const double> m_hat) {
    std::size_t n = outcome.size();
    if (n == 0 || treatment.size() != n || g_hat.size() != n || m_hat.size() != n)
        throw Error::usage("theta_on_split: mismatched sample lengths");

    FoldTheta fold;
    fold.v_hat.resize(n);
    fold.outcome_resid.resize(n);
    fold.treatment.assign(treatment.begin(), treatment.end());
    double denom = 0.0;
    double numer = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        fold.v_hat[i] = treatment[i] - m_hat[i];
        fold.outcome_resid[i] = outcome[i] - g_hat[i];
        denom += fold.v_hat[i] * treatment[i];
        numer += fold.v_hat[i] * fold.outcome_resid[i];
    }
    if (std::fabs(denom) <= 1e-10 * static_cast<double>(n))
        throw Error::compute(
            "theta_on_split: treatment residual is degenerate (no identifying variation)");
    fold.theta = numer / denom;

    // The estimate is the exact zero of the orthogonal score in theta.
    double score = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        score += fold.v_hat[i] * (fold.outcome_resid[i] - treatment[i] * fold.theta);
    fold.score = score;
    if (std::fabs(score) >= 1e-8 * static_cast<double>(n))
        throw Error::compute("theta_on_split: orthogonal score failed to vanish (|score| = " +
                             std::to_string(std::fabs(score)) + ")");
    return fold;
}

CrossFitResult theta_crossfit(const EstimationSample& sample, const NuisanceKind& kind,
                              std::uint64_t seed) {
    std::size_t n = sample.n_rows();
    if (n < 2) throw Error::usage("theta_crossfit: need at least 2 rows");
    if (sample.treatment.size() != n || sample.fe->rows() != n || sample.controls->rows() != n)
        throw Error::usage("theta_crossfit: mismatched sample lengths");

    CrossFitSplit split = split_crossfit(static_cast<int>(n), seed);

    auto eval_fold = [&](std::span<const int> aux, std::span<const int> main,
                         std::uint64_t fold_seed) {
        NuisanceModels models = fit_nuisances(sample, aux, kind, fold_seed);
        std::vector<double> g_hat = models.predict_outcome(main);
        std::vector<double> m_hat = models.predict_treatment(main);
        std::vector<double> y = gather<double>(sample.outcome, main);
        std::vector<double> tau = gather<double>(sample.treatment, main);
        return theta_on_split(y, tau, g_hat, m_hat);
    };

    FoldTheta fold_main = eval_fold(split.aux, split.main, derive_seed(seed, 0xF01));
    FoldTheta fold_swapped = eval_fold(split.main, split.aux, derive_seed(seed, 0xF02));

    CrossFitResult result;
    result.theta_main = fold_main.theta;
    result.theta_swapped = fold_swapped.theta;
    result.theta = 0.5 * (fold_main.theta + fold_swapped.theta);
    result.max_fold_score = std::max(std::fabs(fold_main.score), std::fabs(fold_swapped.score));

    // Influence-function variance pooled over both folds at the combined theta:
    // sigma^2 = J0^-2 (1/N) sum psi^2 with psi = v (p - g - tau theta),
    // J0 = (1/N) sum v tau.
    double j0 = 0.0;
    double psi_sq = 0.0;
    for (const FoldTheta* fold : {&fold_main, &fold_swapped}) {
        for (std::size_t i = 0; i < fold->v_hat.size(); ++i) {
            double psi = fold->v_hat[i] *
                         (fold->outcome_resid[i] - fold->treatment[i] * result.theta);
            psi_sq += psi * psi;
            j0 += fold->v_hat[i] * fold->treatment[i];
        }
    }
    double n_d = static_cast<double>(n);
    j0 /= n_d;
    double sigma_sq = psi_sq / n_d / (j0 * j0);
    result.se = std::sqrt(sigma_sq / n_d);
    return result;
}

double exact_median(std::vector<double> values) {
    if (values.empty()) throw Error::usage("median of empty set");
    std::sort(values.begin(), values.end());
    // Lower middle for even counts, so the median is an attained value.
    return values[(values.size() - 1) / 2];
}

DMLResult dml_estimate(const EstimationSample& sample, const DMLConfig& cfg, int threads) {
    if (cfg.repetitions < 1 || cfg.repetitions % 2 == 0)
        throw Error::usage("dml_estimate: repetitions must be a positive odd count");

    std::size_t reps = static_cast<std::size_t>(cfg.repetitions);
    std::vector<std::optional<RepetitionOutcome>> slots(reps);
    std::vector<std::string> errors(reps);

    parallel_for(reps, threads, [&](std::size_t r) {
        std::uint64_t rep_seed = cfg.seed + r + 1;
        try {
            CrossFitResult cf = theta_crossfit(sample, cfg.nuisance, rep_seed);
            slots[r] = RepetitionOutcome{rep_seed, cf.theta, cf.se, cf.max_fold_score};
        } catch (const std::exception& e) {
            errors[r] = e.what();
        }
    });

    DMLResult result;
    result.n_obs = static_cast<int>(sample.n_rows());
    for (std::size_t r = 0; r < reps; ++r) {
        if (slots[r]) {
            result.repetitions.push_back(*slots[r]);
            result.per_repetition_thetas.push_back(slots[r]->theta);
            result.per_repetition_ses.push_back(slots[r]->se);
            result.max_fold_score = std::max(result.max_fold_score, slots[r]->max_fold_score);
        } else {
            ++result.failed_repetitions;
            result.failure_messages.push_back("repetition " + std::to_string(r + 1) + ": " +
                                              errors[r]);
        }
    }

    if (result.failed_repetitions * 5 > cfg.repetitions) {
        std::ostringstream msg;
        msg << "dml_estimate: " << result.failed_repetitions << " of " << cfg.repetitions
            << " repetitions failed:";
        for (const auto& m : result.failure_messages) msg << "\n  " << m;
        throw Error::compute(msg.str());
    }

    result.theta_median = exact_median(result.per_repetition_thetas);
    // Median-aggregation variance correction: adjust each repetition SE for
    // the spread of its theta around the median, then take the median.
    std::vector<double> adjusted;
    adjusted.reserve(result.repetitions.size());
    for (const RepetitionOutcome& rep : result.repetitions) {
        double d = rep.theta - result.theta_median;
        adjusted.push_back(std::sqrt(rep.se * rep.se + d * d));
    }
    result.standard_error = exact_median(adjusted);
    return result;
}

DMLResult estimate_effect(const PanelDataset& d, const std::string& outcome_col,
                          const std::string& treatment_col,
                          const std::set<std::string>& include_groups, const DMLConfig& cfg,
                          int threads) {
    auto resolve = [&](const std::string& name) -> std::vector<double> {
        if (name == "outcome") return d.outcome;
        if (name == "treatment") return d.treatment;
        int j = d.control_column(name);
        if (j < 0) throw Error::usage("estimate_effect: unknown column '" + name + "'");
        std::vector<double> out(d.n_rows());
        for (std::size_t i = 0; i < d.n_rows(); ++i)
            out[i] = d.controls(i, static_cast<std::size_t>(j));
        return out;
    };

    std::set<std::string> known_tags;
    for (const auto& [col, tag] : d.control_groups) known_tags.insert(tag);
    for (const auto& tag : include_groups)
        if (!known_tags.count(tag))
            throw Error::usage("estimate_effect: unknown control group tag '" + tag + "'");

    PanelDataset work = d;
    work.outcome = resolve(outcome_col);
    work.treatment = resolve(treatment_col);

    std::vector<int> selected;
    for (std::size_t j = 0; j < d.control_names.size(); ++j) {
        const std::string& name = d.control_names[j];
        if (name == outcome_col || name == treatment_col) continue;
        auto it = d.control_groups.find(name);
        if (it == d.control_groups.end()) continue;
        if (include_groups.count(it->second)) selected.push_back(static_cast<int>(j));
    }

    Matrix controls(d.n_rows(), selected.size());
    std::vector<std::string> names;
    std::map<std::string, std::string> groups;
    for (std::size_t a = 0; a < selected.size(); ++a) {
        std::size_t j = static_cast<std::size_t>(selected[a]);
        for (std::size_t i = 0; i < d.n_rows(); ++i) controls(i, a) = d.controls(i, j);
        names.push_back(d.control_names[j]);
        groups[d.control_names[j]] = d.control_groups.at(d.control_names[j]);
    }
    work.controls = std::move(controls);
    work.control_names = std::move(names);
    work.control_groups = std::move(groups);

    auto [standardized, stats] = standardize(work, ColumnSelection::everything());
    FixedEffectDesign fe = encode_fixed_effects(standardized);

    EstimationSample sample{&standardized.controls, &fe.design, standardized.outcome,
                            standardized.treatment};
    return dml_estimate(sample, cfg, threads);
}

nlohmann::json dml_result_json(const DMLResult& result, const DMLConfig& cfg) {
    nlohmann::json j;
    j["theta_median"] = result.theta_median;
    j["se"] = result.standard_error;
    j["n"] = result.n_obs;
    j["failed_repetitions"] = result.failed_repetitions;
    j["config"] = {{"repetitions", cfg.repetitions},
                   {"seed", cfg.seed},
                   {"nuisance", nuisance_json(cfg.nuisance)}};
    nlohmann::json reps = nlohmann::json::array();
    for (const RepetitionOutcome& rep : result.repetitions)
        reps.push_back({{"seed", rep.seed}, {"theta", rep.theta}, {"se", rep.se}});
    j["repetitions"] = reps;
    return j;
}

}  // namespace dmlpanel
