// Acceptance suite: one criterion per numbered check, each printing a
// PASS/FAIL line. Run all with no arguments or a subset by number.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dmlpanel/dml_estimator.hpp"
#include "dmlpanel/linear_models.hpp"
#include "dmlpanel/monte_carlo.hpp"
#include "dmlpanel/panel_data.hpp"
#include "dmlpanel/parallel.hpp"
#include "dmlpanel/rng.hpp"
#include "test_helpers.hpp"

using namespace dmlpanel;

#ifndef DMLPANEL_CLI_PATH
#define DMLPANEL_CLI_PATH ""
#endif

namespace {

struct Criterion {
    int id;
    std::string name;
    std::function<bool(std::ostream&)> run;
};

// ---------------------------------------------------------------------------
// 1. Monte Carlo bias ordering at desk scale
// ---------------------------------------------------------------------------
bool criterion_bias_ordering(std::ostream& log) {
    SimProfile profile = desk_profile();
    DGPConfig cfg = profile.dgp;  // k=50, J=100, T=7, 100 replications, pinned defaults
    cfg.seed = 20240101;
    ExperimentOptions opts;
    opts.dml_repetitions = profile.dml_repetitions;  // 11
    opts.threads = hardware_threads();

    BiasReport report = run_experiment(
        cfg, {Estimator::ols_subset, Estimator::dml_lasso, Estimator::dml_dw}, opts);

    std::map<std::string, double> mean_bias;
    for (const EstimatorBias& eb : report.estimators) {
        mean_bias[eb.name] = std::fabs(eb.mean_bias);
        log << "    " << eb.name << ": mean bias " << eb.mean_bias << " (sd " << eb.sd_bias
            << ", failures " << eb.failures << ")\n";
    }
    double dw = mean_bias.at("dml_dw");
    double lasso = mean_bias.at("dml_lasso");
    double ols = mean_bias.at("ols_subset");
    double threshold = 0.05 * std::fabs(cfg.theta0);
    log << "    |dml_dw| = " << dw << " vs threshold " << threshold << ", |ols_subset| = " << ols
        << ", |dml_lasso| = " << lasso << "\n";
    return dw < threshold && dw < ols && dw < lasso;
}

// ---------------------------------------------------------------------------
// 2. Oracle-nuisance unbiasedness
// ---------------------------------------------------------------------------
bool criterion_oracle_unbiasedness(std::ostream& log) {
    DGPConfig cfg = desk_profile().dgp;  // N = 700
    cfg.seed = 424242;
    const int reps = 500;
    std::vector<double> thetas;
    thetas.reserve(reps);
    for (int r = 0; r < reps; ++r) {
        DGPDraw draw = draw_dgp(cfg, r);
        std::size_t n = draw.panel.n_rows();
        // true nuisance parts: everything except theta0 * tau and the noise
        std::vector<double> g_true(n), m_true(n);
        for (std::size_t i = 0; i < n; ++i) {
            m_true[i] = draw.panel.treatment[i] - draw.truth.v[i];
            g_true[i] = draw.panel.outcome[i] - cfg.theta0 * draw.panel.treatment[i] -
                        draw.truth.u[i];
        }
        FoldTheta fold =
            theta_on_split(draw.panel.outcome, draw.panel.treatment, g_true, m_true);
        thetas.push_back(fold.theta);
    }
    double mean = 0.0;
    for (double t : thetas) mean += t;
    mean /= static_cast<double>(reps);
    double ss = 0.0;
    for (double t : thetas) ss += (t - mean) * (t - mean);
    double sd = std::sqrt(ss / static_cast<double>(reps - 1));
    double bound = 2.0 * sd / std::sqrt(static_cast<double>(reps));
    log << "    mean theta " << mean << ", |mean - theta0| = " << std::fabs(mean - cfg.theta0)
        << ", bound " << bound << "\n";
    return std::fabs(mean - cfg.theta0) < bound;
}

// ---------------------------------------------------------------------------
// 3. Gradient check against central finite differences
// ---------------------------------------------------------------------------
bool criterion_gradient_check(std::ostream& log) {
    Rng rng(31337);
    DeepWideSpec spec;
    spec.deep_layers = {4, 3};
    const double h = 1e-6;
    int checked = 0, attempts = 0, worst_count = 0;
    double worst = 0.0;
    while (checked < 50 && attempts < 600) {
        ++attempts;
        std::size_t n = 6;
        int k = 3, f = 2;
        Matrix controls(n, static_cast<std::size_t>(k));
        Matrix fe(n, static_cast<std::size_t>(f));
        for (auto& v : controls.data()) v = rng.normal();
        for (std::size_t i = 0; i < n; ++i) {
            fe(i, 0) = 1.0;
            fe(i, 1) = rng.uniform() < 0.4 ? 1.0 : 0.0;
        }
        std::vector<double> targets(n);
        for (auto& t : targets) t = rng.normal();
        std::vector<int> rows;
        for (std::size_t i = 0; i < n; ++i) rows.push_back(static_cast<int>(i));

        DeepWideParams params = init_params(spec, k, f, rng.next_u64());
        for (int j = 0; j < f; ++j)
            params.values[params.wide_offset() + static_cast<std::size_t>(j)] = rng.normal();

        // skip instances near ReLU or MAE kinks
        bool skip = false;
        {
            FeatureView view{&controls, &fe};
            std::vector<double> preds = predict(params, view, rows);
            for (std::size_t i = 0; i < n && !skip; ++i)
                if (std::fabs(preds[i] - targets[i]) < 1e-4) skip = true;
            for (std::size_t i = 0; i < n && !skip; ++i) {
                const double* input = controls.row(i);
                std::vector<double> hbuf(input, input + k);
                for (std::size_t l = 0; l < params.layer_sizes.size() && !skip; ++l) {
                    std::size_t in = static_cast<std::size_t>(
                        params.layer_input_dim(static_cast<int>(l)));
                    std::size_t out = static_cast<std::size_t>(params.layer_sizes[l]);
                    const double* w = params.values.data() + params.weight_offset(static_cast<int>(l));
                    const double* b = params.values.data() + params.bias_offset(static_cast<int>(l));
                    std::vector<double> next(out);
                    for (std::size_t q = 0; q < out; ++q) {
                        double pre = b[q];
                        for (std::size_t x2 = 0; x2 < in; ++x2) pre += w[q * in + x2] * hbuf[x2];
                        if (std::fabs(pre) < 1e-4) {
                            skip = true;
                            break;
                        }
                        next[q] = pre > 0.0 ? pre : 0.0;
                    }
                    hbuf = next;
                }
            }
        }
        if (skip) continue;

        FeatureView view{&controls, &fe};
        LossGrad lg = loss_and_gradient(params, view, rows, targets, 0.05);
        bool ok = true;
        for (std::size_t i = 0; i < params.size(); ++i) {
            DeepWideParams up = params, down = params;
            up.values[i] += h;
            down.values[i] -= h;
            double fu = loss_and_gradient(up, view, rows, targets, 0.05).loss;
            double fd = loss_and_gradient(down, view, rows, targets, 0.05).loss;
            double numeric = (fu - fd) / (2.0 * h);
            double diff = std::fabs(numeric - lg.grad[i]);
            double denom = std::max(std::fabs(numeric), std::fabs(lg.grad[i]));
            double rel = denom > 0.0 ? diff / denom : 0.0;
            if (diff > 1e-8 && rel > 1e-5) {
                ok = false;
                worst = std::max(worst, rel);
            }
        }
        if (!ok) ++worst_count;
        ++checked;
    }
    log << "    instances checked: " << checked << ", failures: " << worst_count
        << (worst_count > 0 ? " (worst rel " + std::to_string(worst) + ")" : "") << "\n";
    return checked >= 50 && worst_count == 0;
}

// ---------------------------------------------------------------------------
// 4. OLS equals the normal-equations oracle
// ---------------------------------------------------------------------------
bool criterion_ols_oracle(std::ostream& log) {
    Rng rng(10007);
    int failures = 0;
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        std::size_t p = 1 + static_cast<std::size_t>(rng.uniform_int(5));
        std::size_t n = p + 5 + static_cast<std::size_t>(rng.uniform_int(60));
        Matrix x(n, p);
        for (auto& v : x.data()) v = rng.normal();
        std::vector<double> y(n);
        for (auto& v : y) v = rng.normal();
        OLSFit fit = ols_fit(x, y);
        std::vector<double> oracle = testutil::normal_equations_solve(x, y);
        for (std::size_t j = 0; j < p; ++j) {
            double diff = std::fabs(fit.coefficients[j] - oracle[j]);
            worst = std::max(worst, diff);
            if (diff > 1e-8) ++failures;
        }
    }
    log << "    worst |QR - normal equations| = " << worst << "\n";
    return failures == 0;
}

// ---------------------------------------------------------------------------
// 5. LASSO limits
// ---------------------------------------------------------------------------
bool criterion_lasso_limits(std::ostream& log) {
    Rng rng(50021);
    int failures = 0;
    for (int rep = 0; rep < 100; ++rep) {
        std::size_t n = 40 + static_cast<std::size_t>(rng.uniform_int(60));
        std::size_t p = 2 + static_cast<std::size_t>(rng.uniform_int(6));
        Matrix x(n, p);
        for (auto& v : x.data()) v = rng.normal();
        for (std::size_t j = 0; j < p; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += x(i, j);
            mean /= static_cast<double>(n);
            double ss = 0.0;
            for (std::size_t i = 0; i < n; ++i) ss += (x(i, j) - mean) * (x(i, j) - mean);
            double sd = std::sqrt(ss / static_cast<double>(n - 1));
            for (std::size_t i = 0; i < n; ++i) x(i, j) = (x(i, j) - mean) / sd;
        }
        std::vector<double> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = 0.5 * rng.normal();
            for (std::size_t j = 0; j < p; ++j)
                y[i] += x(i, j) * 0.3 * (j % 2 == 0 ? 1.0 : -1.0);
        }

        // lambda = 0 matches OLS with intercept
        LassoFit l0 = lasso_fit(x, y, 0.0, 1e-10, 200000);
        Matrix xi(n, p + 1);
        for (std::size_t i = 0; i < n; ++i) {
            xi(i, 0) = 1.0;
            for (std::size_t j = 0; j < p; ++j) xi(i, j + 1) = x(i, j);
        }
        OLSFit ols = ols_fit(xi, y);
        if (std::fabs(l0.intercept - ols.coefficients[0]) > 1e-6) ++failures;
        for (std::size_t j = 0; j < p; ++j)
            if (std::fabs(l0.coefficients[j] - ols.coefficients[j + 1]) > 1e-6) ++failures;

        // lambda >= lambda_max zeroes every slope exactly
        double lmax = lasso_lambda_max(x, y);
        LassoFit lz = lasso_fit(x, y, lmax);
        for (double b : lz.coefficients)
            if (b != 0.0) ++failures;

        // objective non-increasing sweep to sweep
        LassoFit mid = lasso_fit(x, y, 0.3 * lmax);
        for (std::size_t s = 1; s < mid.objective_trace.size(); ++s)
            if (mid.objective_trace[s] >
                mid.objective_trace[s - 1] + 1e-12 * (1.0 + std::fabs(mid.objective_trace[s - 1])))
                ++failures;
    }
    log << "    violations: " << failures << "\n";
    return failures == 0;
}

// ---------------------------------------------------------------------------
// 6. DML orthogonal score vanishes on every fold
// ---------------------------------------------------------------------------
bool criterion_score_zero(std::ostream& log) {
    double worst_ratio = 0.0;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        testutil::LinearPanel lp =
            testutil::make_linear_panel(40, 6, 4, -0.5, 0.5, 0.5, 6000 + seed);
        EstimationSample sample{&lp.panel.controls, &lp.fe_design, lp.panel.outcome,
                                lp.panel.treatment};
        for (const NuisanceKind& kind :
             {NuisanceKind{OlsNuisance{}}, NuisanceKind{LassoNuisance{}}}) {
            DMLConfig cfg;
            cfg.repetitions = 11;
            cfg.seed = seed;
            cfg.nuisance = kind;
            DMLResult result = dml_estimate(sample, cfg, hardware_threads());
            // max_fold_score is checked inside the estimator at 1e-8*n; it is
            // re-asserted here against the same bound
            double ratio = result.max_fold_score / static_cast<double>(result.n_obs);
            worst_ratio = std::max(worst_ratio, ratio);
            if (result.failed_repetitions != 0) return false;
        }
    }
    log << "    worst |score|/n = " << worst_ratio << " (bound 1e-8)\n";
    return worst_ratio < 1e-8;
}

// ---------------------------------------------------------------------------
// 7. CLI determinism across runs and thread counts
// ---------------------------------------------------------------------------
std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool criterion_cli_determinism(std::ostream& log) {
    std::string cli = DMLPANEL_CLI_PATH;
    if (cli.empty() || !std::filesystem::exists(cli)) {
        log << "    CLI binary not found at '" << cli << "'\n";
        return false;
    }
    std::string base = "/tmp/dmlpanel_acceptance";
    std::filesystem::remove_all(base);
    std::filesystem::create_directories(base);

    auto run = [&](const std::string& args) {
        std::string cmd = cli + " " + args + " > /dev/null 2>&1";
        return std::system(cmd.c_str()) == 0;
    };

    // simulate: two runs, thread counts 1 and 4
    std::string sim_common =
        "simulate --profile desk --k 8 --entities 24 --periods 4 --reps 8 --dml-reps 3 "
        "--estimators ols_subset,dml_lasso --seed 99 --out ";
    if (!run(sim_common + base + "/sim_a --threads 1")) return false;
    if (!run(sim_common + base + "/sim_b --threads 4")) return false;
    if (!run(sim_common + base + "/sim_c --threads 1")) return false;
    bool sim_ok =
        read_file(base + "/sim_a/bias_report.json") == read_file(base + "/sim_b/bias_report.json") &&
        read_file(base + "/sim_a/bias_report.json") == read_file(base + "/sim_c/bias_report.json") &&
        !read_file(base + "/sim_a/bias_report.json").empty() &&
        read_file(base + "/sim_a/kde_ols_subset.csv") == read_file(base + "/sim_b/kde_ols_subset.csv");
    log << "    simulate outputs byte-identical: " << (sim_ok ? "yes" : "no") << "\n";

    // estimate: generate a panel, then two runs at thread counts 1 and 4
    if (!run("dgp-gen --profile desk --k 6 --entities 20 --periods 4 --seed 3 --out " + base +
             "/panel.csv"))
        return false;
    std::string est_common = "estimate --input " + base + "/panel.csv --schema " + base +
                             "/panel.csv.schema.json --estimator dml-lasso --reps 5 --seed 42 "
                             "--out ";
    if (!run(est_common + base + "/est_a --threads 1")) return false;
    if (!run(est_common + base + "/est_b --threads 4")) return false;
    if (!run(est_common + base + "/est_c --threads 1")) return false;
    bool est_ok =
        read_file(base + "/est_a/estimate.json") == read_file(base + "/est_b/estimate.json") &&
        read_file(base + "/est_a/estimate.json") == read_file(base + "/est_c/estimate.json") &&
        !read_file(base + "/est_a/estimate.json").empty();
    log << "    estimate outputs byte-identical: " << (est_ok ? "yes" : "no") << "\n";
    return sim_ok && est_ok;
}

// ---------------------------------------------------------------------------
// 8. KDE oracle on standard normal samples
// ---------------------------------------------------------------------------
bool criterion_kde_oracle(std::ostream& log) {
    Rng rng(662607);
    std::vector<double> samples(10000);
    for (auto& s : samples) s = rng.normal();
    KdeResult k = kde(samples, 512);
    double max_err = 0.0;
    for (std::size_t i = 0; i < k.grid.size(); ++i) {
        double x = k.grid[i];
        if (x < -2.0 || x > 2.0) continue;
        double truth = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
        max_err = std::max(max_err, std::fabs(k.density[i] - truth));
    }
    double integral = 0.0;
    for (std::size_t i = 1; i < k.grid.size(); ++i)
        integral += 0.5 * (k.density[i] + k.density[i - 1]) * (k.grid[i] - k.grid[i - 1]);
    log << "    max |kde - pdf| on [-2,2] = " << max_err << ", integral = " << integral << "\n";
    return max_err < 0.02 && integral > 0.99 && integral < 1.01;
}

// ---------------------------------------------------------------------------
// 9. Noiseless linear DGP recovery by OLS-FE
// ---------------------------------------------------------------------------
bool criterion_noiseless_recovery(std::ostream& log) {
    DGPConfig cfg = desk_profile().dgp;
    cfg.noise_sd_u = 0.0;
    cfg.noise_sd_v = 0.0;
    cfg.outer_weight_g = 0.0;
    cfg.seed = 90909;
    DGPDraw d = draw_dgp(cfg, 0);
    FixedEffectDesign fe = encode_fixed_effects(d.panel);
    Matrix design(d.panel.n_rows(), fe.design.cols() + 1);
    for (std::size_t i = 0; i < d.panel.n_rows(); ++i) {
        for (std::size_t c = 0; c < fe.design.cols(); ++c) design(i, c) = fe.design(i, c);
        design(i, fe.design.cols()) = d.panel.treatment[i];
    }
    OLSFit fit = ols_fit(design, d.panel.outcome);
    double err = std::fabs(fit.coefficients.back() - cfg.theta0);
    log << "    |theta_hat - theta0| = " << err << "\n";
    return err < 1e-8;
}

// ---------------------------------------------------------------------------
// 10. Coverage of theta0 by theta_hat +- 1.96 SE
// ---------------------------------------------------------------------------
bool criterion_coverage(std::ostream& log) {
    const double theta0 = -0.5;
    const int reps = 200;
    std::vector<int> hits(reps, 0);
    parallel_for(static_cast<std::size_t>(reps), hardware_threads(), [&](std::size_t rep) {
        testutil::LinearPLM plm = testutil::make_linear_plm(
            2000, 5, theta0, 1.0, 1.0, 70000 + static_cast<std::uint64_t>(rep));
        EstimationSample sample{&plm.controls, &plm.fe, plm.outcome, plm.treatment};
        CrossFitResult cf = theta_crossfit(sample, OlsNuisance{}, 11);
        if (std::fabs(cf.theta - theta0) < 1.96 * cf.se) hits[rep] = 1;
    });
    int covered = 0;
    for (int h : hits) covered += h;
    log << "    covered " << covered << " / " << reps << " (need >= 180)\n";
    return covered >= 180;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<Criterion> criteria = {
        {1, "Monte Carlo bias ordering (desk profile)", criterion_bias_ordering},
        {2, "oracle-nuisance unbiasedness", criterion_oracle_unbiasedness},
        {3, "gradient check vs central finite differences", criterion_gradient_check},
        {4, "OLS matches normal-equations oracle", criterion_ols_oracle},
        {5, "LASSO limits (OLS match, lambda_max, monotone objective)", criterion_lasso_limits},
        {6, "DML orthogonal score vanishes per fold", criterion_score_zero},
        {7, "CLI determinism across runs and thread counts", criterion_cli_determinism},
        {8, "KDE matches the standard normal pdf", criterion_kde_oracle},
        {9, "noiseless DGP recovery by OLS-FE", criterion_noiseless_recovery},
        {10, "coverage of the 1.96 SE interval", criterion_coverage},
    };

    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

    bool all_ok = true;
    for (const Criterion& c : criteria) {
        if (!selected.empty() &&
            std::find(selected.begin(), selected.end(), c.id) == selected.end())
            continue;
        std::ostringstream log;
        bool ok = false;
        try {
            ok = c.run(log);
        } catch (const std::exception& e) {
            log << "    exception: " << e.what() << "\n";
        }
        std::cout << (ok ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.name << "\n"
                  << log.str();
        std::cout.flush();
        all_ok = all_ok && ok;
    }
    return all_ok ? 0 : 1;
}
