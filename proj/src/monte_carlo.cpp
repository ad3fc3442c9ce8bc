#include "dmlpanel/monte_carlo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>

#include "dmlpanel/common.hpp"
#include "dmlpanel/dml_estimator.hpp"
#include "dmlpanel/linear_models.hpp"
#include "dmlpanel/parallel.hpp"
#include "dmlpanel/rng.hpp"

namespace dmlpanel {

void DGPConfig::validate() const {
    if (k < 1 || T < 2 || J < 2) throw Error::usage("DGP needs k >= 1, T >= 2, J >= 2");
    if (std::fabs(coef_corr) >= 1.0 || std::fabs(fe_corr) >= 1.0)
        throw Error::usage("DGP correlations must lie in (-1, 1)");
    // zero noise / fixed-effect scale is allowed (noiseless reduction runs)
    if (noise_sd_u < 0.0 || noise_sd_v < 0.0 || fe_sd < 0.0 || coef_sd <= 0.0)
        throw Error::usage("DGP standard deviations must be nonnegative (coef_sd positive)");
    if (index_scale <= 0.0) throw Error::usage("DGP index scale must be positive");
    if (replications < 1) throw Error::usage("DGP replications must be positive");
}

nlohmann::json DGPConfig::to_json() const {
    return {{"k", k},
            {"T", T},
            {"J", J},
            {"theta0", theta0},
            {"coef_corr", coef_corr},
            {"fe_corr", fe_corr},
            {"replications", replications},
            {"noise_sd_u", noise_sd_u},
            {"noise_sd_v", noise_sd_v},
            {"coef_sd", coef_sd},
            {"index_scale", index_scale},
            {"outer_weight_g", outer_weight_g},
            {"outer_weight_m", outer_weight_m},
            {"fe_sd", fe_sd},
            {"seed", seed}};
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string padded_label(const char* prefix, int index, int count) {
    int width = 1;
    for (int v = count; v >= 10; v /= 10) ++width;
    std::string digits = std::to_string(index + 1);
    std::string out = prefix;
    out.append(static_cast<std::size_t>(width) - std::min<std::size_t>(digits.size(), static_cast<std::size_t>(width)), '0');
    out += digits;
    return out;
}

}  // namespace

DGPDraw draw_dgp(const DGPConfig& cfg, int replication) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, 0xD6B0000ull + static_cast<std::uint64_t>(replication)));

    std::size_t k = static_cast<std::size_t>(cfg.k);
    std::size_t j_count = static_cast<std::size_t>(cfg.J);
    std::size_t t_count = static_cast<std::size_t>(cfg.T);
    std::size_t n = j_count * t_count;

    DGPDraw draw;
    DGPTruth& truth = draw.truth;
    truth.theta0 = cfg.theta0;

    // Coefficient pairs with correlation coef_corr, sd coef_sd/sqrt(k) so the
    // index stays at unit order regardless of k.
    double s = cfg.coef_sd / std::sqrt(static_cast<double>(cfg.k));
    double cross = std::sqrt(1.0 - cfg.coef_corr * cfg.coef_corr);
    truth.g_coef.resize(k);
    truth.m_coef.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        double z1 = rng.normal();
        double z2 = rng.normal();
        truth.g_coef[i] = s * z1;
        truth.m_coef[i] = s * (cfg.coef_corr * z1 + cross * z2);
    }

    double fe_cross = std::sqrt(1.0 - cfg.fe_corr * cfg.fe_corr);
    truth.gamma.resize(j_count);
    truth.delta.resize(j_count);
    for (std::size_t j = 0; j < j_count; ++j) {
        double z1 = rng.normal();
        double z2 = rng.normal();
        truth.gamma[j] = cfg.fe_sd * z1;
        truth.delta[j] = cfg.fe_sd * (cfg.fe_corr * z1 + fe_cross * z2);
    }
    truth.eta.resize(t_count);
    truth.xi.resize(t_count);
    for (std::size_t t = 0; t < t_count; ++t) {
        double z1 = rng.normal();
        double z2 = rng.normal();
        truth.eta[t] = cfg.fe_sd * z1;
        truth.xi[t] = cfg.fe_sd * (cfg.fe_corr * z1 + fe_cross * z2);
    }

    PanelDataset& panel = draw.panel;
    panel.entities.reserve(j_count);
    for (std::size_t j = 0; j < j_count; ++j)
        panel.entities.push_back(padded_label("E", static_cast<int>(j), cfg.J));
    panel.periods.reserve(t_count);
    for (std::size_t t = 0; t < t_count; ++t)
        panel.periods.push_back(padded_label("P", static_cast<int>(t), cfg.T));

    panel.controls = Matrix(n, k);
    panel.control_names.reserve(k);
    for (std::size_t c = 0; c < k; ++c) {
        std::string name = padded_label("x", static_cast<int>(c), cfg.k);
        panel.control_names.push_back(name);
        panel.control_groups[name] = "standard";
    }

    panel.entity_index.resize(n);
    panel.period_index.resize(n);
    panel.outcome.resize(n);
    panel.treatment.resize(n);
    truth.u.resize(n);
    truth.v.resize(n);

    std::size_t row = 0;
    for (std::size_t j = 0; j < j_count; ++j) {
        for (std::size_t t = 0; t < t_count; ++t, ++row) {
            panel.entity_index[row] = static_cast<int>(j);
            panel.period_index[row] = static_cast<int>(t);
            double* x = panel.controls.row(row);
            for (std::size_t c = 0; c < k; ++c) x[c] = rng.normal();
            truth.u[row] = cfg.noise_sd_u * rng.normal();
            truth.v[row] = cfg.noise_sd_v * rng.normal();

            double index_g = cfg.index_scale * kernels::dot(truth.g_coef.data(), x, k);
            double index_m = cfg.index_scale * kernels::dot(truth.m_coef.data(), x, k);
            double nonlin_g = cfg.outer_weight_g * (2.0 * sigmoid(index_g) - 1.0);
            double nonlin_m = cfg.outer_weight_m * (2.0 * sigmoid(index_m) - 1.0);

            double tau = nonlin_m + truth.delta[j] + truth.xi[t] + truth.v[row];
            panel.treatment[row] = tau;
            panel.outcome[row] =
                cfg.theta0 * tau + nonlin_g + truth.gamma[j] + truth.eta[t] + truth.u[row];
        }
    }
    return draw;
}

std::string estimator_name(Estimator e) {
    switch (e) {
        case Estimator::ols_subset: return "ols_subset";
        case Estimator::dml_lasso: return "dml_lasso";
        case Estimator::dml_dw: return "dml_dw";
    }
    throw Error::usage("unknown estimator");
}

Estimator estimator_from_name(const std::string& name) {
    if (name == "ols_subset") return Estimator::ols_subset;
    if (name == "dml_lasso") return Estimator::dml_lasso;
    if (name == "dml_dw") return Estimator::dml_dw;
    throw Error::usage("unknown estimator '" + name + "' (expected ols_subset, dml_lasso, dml_dw)");
}

namespace {

double quantile_type7(const std::vector<double>& sorted, double p) {
    if (sorted.size() == 1) return sorted[0];
    double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    std::size_t lo = static_cast<std::size_t>(std::floor(h));
    std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    double frac = h - std::floor(h);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

KdeResult kde(std::span<const double> samples, int grid_size) {
    std::size_t n = samples.size();
    if (n < 2) throw Error::usage("kde: need at least 2 samples");
    if (grid_size < 2) throw Error::usage("kde: grid size must be at least 2");

    double mean = 0.0;
    for (double x : samples) mean += x;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double x : samples) ss += (x - mean) * (x - mean);
    double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd <= 0.0) throw Error::data("kde: zero-variance samples");

    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    double iqr = quantile_type7(sorted, 0.75) - quantile_type7(sorted, 0.25);
    double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
    double h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);

    double lo = sorted.front() - 3.0 * h;
    double hi = sorted.back() + 3.0 * h;
    KdeResult out;
    out.grid.resize(static_cast<std::size_t>(grid_size));
    out.density.resize(static_cast<std::size_t>(grid_size));
    const double norm = 1.0 / (static_cast<double>(n) * h * std::sqrt(2.0 * std::numbers::pi));
    for (int gi = 0; gi < grid_size; ++gi) {
        double g = lo + (hi - lo) * static_cast<double>(gi) / static_cast<double>(grid_size - 1);
        double acc = 0.0;
        for (double x : samples) {
            double z = (g - x) / h;
            acc += std::exp(-0.5 * z * z);
        }
        out.grid[static_cast<std::size_t>(gi)] = g;
        out.density[static_cast<std::size_t>(gi)] = norm * acc;
    }
    return out;
}

namespace {

struct ReplicationOutcome {
    std::optional<double> bias;
    std::string error;
};

double ols_subset_theta(const DGPDraw& draw, const FixedEffectDesign& fe, int subset_size,
                        std::uint64_t seed) {
    const PanelDataset& panel = draw.panel;
    std::size_t n = panel.n_rows();
    std::size_t fe_cols = fe.design.cols();
    int k = panel.n_controls();
    int subset = std::min(subset_size, k);

    Rng rng(derive_seed(seed, 0x0151));
    std::vector<int> perm = rng.permutation(k);
    std::vector<int> chosen(perm.begin(), perm.begin() + subset);
    std::sort(chosen.begin(), chosen.end());

    Matrix design(n, fe_cols + static_cast<std::size_t>(subset) + 1);
    for (std::size_t i = 0; i < n; ++i) {
        double* dst = design.row(i);
        const double* fe_row = fe.design.row(i);
        for (std::size_t j = 0; j < fe_cols; ++j) dst[j] = fe_row[j];
        for (int a = 0; a < subset; ++a)
            dst[fe_cols + static_cast<std::size_t>(a)] =
                panel.controls(i, static_cast<std::size_t>(chosen[static_cast<std::size_t>(a)]));
        dst[fe_cols + static_cast<std::size_t>(subset)] = panel.treatment[i];
    }
    OLSFit fit = ols_fit(design, panel.outcome);
    return fit.coefficients.back();
}

}  // namespace

BiasReport run_experiment(const DGPConfig& cfg, const std::vector<Estimator>& estimators,
                          const ExperimentOptions& opts) {
    cfg.validate();
    if (estimators.empty()) throw Error::usage("run_experiment: need at least one estimator");
    if (opts.dml_repetitions < 1 || opts.dml_repetitions % 2 == 0)
        throw Error::usage("run_experiment: DML repetitions must be a positive odd count");

    std::size_t reps = static_cast<std::size_t>(cfg.replications);
    std::vector<std::vector<ReplicationOutcome>> outcomes(
        estimators.size(), std::vector<ReplicationOutcome>(reps));

    parallel_for(reps, opts.threads, [&](std::size_t r) {
        DGPDraw draw = draw_dgp(cfg, static_cast<int>(r));
        FixedEffectDesign fe = encode_fixed_effects(draw.panel);
        EstimationSample sample{&draw.panel.controls, &fe.design, draw.panel.outcome,
                                draw.panel.treatment};
        std::uint64_t rep_seed = derive_seed(cfg.seed, 0xE57000ull + r);

        for (std::size_t e = 0; e < estimators.size(); ++e) {
            ReplicationOutcome& slot = outcomes[e][r];
            try {
                double theta = 0.0;
                switch (estimators[e]) {
                    case Estimator::ols_subset:
                        theta = ols_subset_theta(draw, fe, opts.ols_subset_size, rep_seed);
                        break;
                    case Estimator::dml_lasso: {
                        DMLConfig dml{opts.dml_repetitions, LassoNuisance{}, rep_seed};
                        theta = dml_estimate(sample, dml, 1).theta_median;
                        break;
                    }
                    case Estimator::dml_dw: {
                        DMLConfig dml{opts.dml_repetitions, DeepWideNuisance{}, rep_seed};
                        theta = dml_estimate(sample, dml, 1).theta_median;
                        break;
                    }
                }
                slot.bias = theta - cfg.theta0;
            } catch (const std::exception& ex) {
                slot.error = ex.what();
            }
        }
    });

    BiasReport report;
    report.config = cfg;
    report.dml_repetitions = opts.dml_repetitions;
    report.ols_subset_size = opts.ols_subset_size;

    for (std::size_t e = 0; e < estimators.size(); ++e) {
        EstimatorBias eb;
        eb.name = estimator_name(estimators[e]);
        std::vector<std::string> messages;
        for (std::size_t r = 0; r < reps; ++r) {
            const ReplicationOutcome& slot = outcomes[e][r];
            if (slot.bias) {
                eb.biases.push_back(*slot.bias);
            } else {
                ++eb.failures;
                messages.push_back("replication " + std::to_string(r) + ": " + slot.error);
            }
        }
        if (eb.failures * 10 > cfg.replications) {
            std::ostringstream msg;
            msg << "run_experiment: estimator " << eb.name << " failed in " << eb.failures
                << " of " << cfg.replications << " replications:";
            for (const auto& m : messages) msg << "\n  " << m;
            throw Error::compute(msg.str());
        }

        std::size_t m = eb.biases.size();
        double mean = 0.0;
        for (double b : eb.biases) mean += b;
        mean /= static_cast<double>(m);
        double ss = 0.0;
        for (double b : eb.biases) ss += (b - mean) * (b - mean);
        eb.mean_bias = mean;
        eb.sd_bias = m > 1 ? std::sqrt(ss / static_cast<double>(m - 1)) : 0.0;
        eb.median_bias = exact_median(eb.biases);
        if (m >= 2) eb.kde = kde(eb.biases, opts.kde_grid_size);
        report.estimators.push_back(std::move(eb));
    }
    return report;
}

void export_dgp_csv(const DGPDraw& draw, const std::string& csv_path) {
    if (csv_path.empty()) throw Error::usage("export_dgp_csv: empty output path");
    const PanelDataset& panel = draw.panel;

    std::ofstream csv(csv_path);
    if (!csv) throw Error::io("cannot open for writing: " + csv_path);

    csv << "entity,period,outcome,treatment";
    for (const auto& name : panel.control_names) csv << ',' << name;
    csv << '\n';

    char buf[32];
    auto write_value = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        csv << buf;
    };
    for (std::size_t i = 0; i < panel.n_rows(); ++i) {
        csv << panel.entities[static_cast<std::size_t>(panel.entity_index[i])] << ','
            << panel.periods[static_cast<std::size_t>(panel.period_index[i])] << ',';
        write_value(panel.outcome[i]);
        csv << ',';
        write_value(panel.treatment[i]);
        for (std::size_t c = 0; c < panel.controls.cols(); ++c) {
            csv << ',';
            write_value(panel.controls(i, c));
        }
        csv << '\n';
    }
    if (!csv) throw Error::io("failed while writing: " + csv_path);
    csv.close();

    Schema schema;
    schema.entity = "entity";
    schema.period = "period";
    schema.outcome = "outcome";
    schema.treatment = "treatment";
    schema.groups = panel.control_groups;
    std::ofstream schema_out(csv_path + ".schema.json");
    if (!schema_out) throw Error::io("cannot open for writing: " + csv_path + ".schema.json");
    schema_out << schema.to_json_string() << '\n';

    nlohmann::json truth;
    truth["theta0"] = draw.truth.theta0;
    truth["g_coef"] = draw.truth.g_coef;
    truth["m_coef"] = draw.truth.m_coef;
    truth["gamma"] = draw.truth.gamma;
    truth["delta"] = draw.truth.delta;
    truth["eta"] = draw.truth.eta;
    truth["xi"] = draw.truth.xi;
    truth["u"] = draw.truth.u;
    truth["v"] = draw.truth.v;
    std::ofstream truth_out(csv_path + ".truth.json");
    if (!truth_out) throw Error::io("cannot open for writing: " + csv_path + ".truth.json");
    truth_out << truth.dump(2) << '\n';
}

nlohmann::json bias_report_json(const BiasReport& report) {
    nlohmann::json j;
    j["config"] = report.config.to_json();
    j["dml_repetitions"] = report.dml_repetitions;
    j["ols_subset_size"] = report.ols_subset_size;
    nlohmann::json est = nlohmann::json::array();
    for (const EstimatorBias& eb : report.estimators) {
        nlohmann::json e;
        e["name"] = eb.name;
        e["biases"] = eb.biases;
        e["mean_bias"] = eb.mean_bias;
        e["sd_bias"] = eb.sd_bias;
        e["median_bias"] = eb.median_bias;
        e["failures"] = eb.failures;
        e["kde"] = {{"grid", eb.kde.grid}, {"density", eb.kde.density}};
        est.push_back(std::move(e));
    }
    j["estimators"] = est;
    return j;
}

SimProfile desk_profile() {
    SimProfile p;
    p.name = "desk";
    p.dgp.k = 50;
    p.dgp.J = 100;
    p.dgp.T = 7;
    p.dgp.replications = 100;
    p.dml_repetitions = 11;
    return p;
}

SimProfile paper_profile() {
    SimProfile p;
    p.name = "paper";
    p.dgp.k = 947;
    p.dgp.J = 290;
    p.dgp.T = 7;
    p.dgp.replications = 100;
    p.dml_repetitions = 51;
    return p;
}

SimProfile profile_by_name(const std::string& name) {
    if (name == "desk") return desk_profile();
    if (name == "paper") return paper_profile();
    throw Error::usage("unknown profile '" + name + "' (expected desk or paper)");
}

}  // namespace dmlpanel
