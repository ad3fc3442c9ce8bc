#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "dmlpanel/common.hpp"
#include "dmlpanel/dml_estimator.hpp"
#include "dmlpanel/linear_models.hpp"
#include "dmlpanel/rng.hpp"
#include "test_helpers.hpp"

using namespace dmlpanel;

namespace {

EstimationSample sample_of(const testutil::LinearPanel& lp) {
    return {&lp.panel.controls, &lp.fe_design, lp.panel.outcome, lp.panel.treatment};
}

std::vector<int> all_rows(std::size_t n) {
    std::vector<int> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = static_cast<int>(i);
    return rows;
}

double r_squared(std::span<const double> truth, std::span<const double> pred) {
    double mean = 0.0;
    for (double v : truth) mean += v;
    mean /= static_cast<double>(truth.size());
    double ss_tot = 0.0, ss_res = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ss_tot += (truth[i] - mean) * (truth[i] - mean);
        ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    }
    return 1.0 - ss_res / ss_tot;
}

}  // namespace

TEST_CASE("fit_nuisances: OLS nuisance recovers linear structure out of sample") {
    testutil::LinearPanel lp = testutil::make_linear_panel(400, 5, 5, -0.5, 0.1, 0.1, 2024);
    EstimationSample sample = sample_of(lp);
    std::size_t n = sample.n_rows();
    CHECK(n == 2000);

    CrossFitSplit split = split_crossfit(static_cast<int>(n), 5);
    NuisanceModels models = fit_nuisances(sample, split.aux, OlsNuisance{}, 1);
    std::vector<double> g_hat = models.predict_outcome(split.main);
    std::vector<double> m_hat = models.predict_treatment(split.main);

    std::vector<double> y_true = gather<double>(sample.outcome, split.main);
    std::vector<double> tau_true = gather<double>(sample.treatment, split.main);
    CHECK(r_squared(y_true, g_hat) > 0.9);
    CHECK(r_squared(tau_true, m_hat) > 0.9);
}

TEST_CASE("fit_nuisances: deterministic in the seed") {
    testutil::LinearPanel lp = testutil::make_linear_panel(30, 4, 3, -0.5, 0.3, 0.3, 11);
    EstimationSample sample = sample_of(lp);
    CrossFitSplit split = split_crossfit(static_cast<int>(sample.n_rows()), 3);

    DeepWideNuisance dw;
    dw.train.max_epochs = 10;
    NuisanceModels a = fit_nuisances(sample, split.aux, dw, 9);
    NuisanceModels b = fit_nuisances(sample, split.aux, dw, 9);
    std::vector<double> pa = a.predict_outcome(split.main);
    std::vector<double> pb = b.predict_outcome(split.main);
    CHECK(pa == pb);
}

TEST_CASE("theta_on_split: zero nuisances reduce to the no-control slope") {
    testutil::LinearPanel lp = testutil::make_linear_panel(20, 4, 2, -0.5, 0.3, 0.3, 5);
    std::size_t n = lp.panel.n_rows();
    std::vector<double> zeros(n, 0.0);
    FoldTheta fold = theta_on_split(lp.panel.outcome, lp.panel.treatment, zeros, zeros);

    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        num += lp.panel.treatment[i] * lp.panel.outcome[i];
        den += lp.panel.treatment[i] * lp.panel.treatment[i];
    }
    CHECK(std::fabs(fold.theta - num / den) < 1e-12);
}

TEST_CASE("theta_on_split: oracle nuisances give an unbiased estimate") {
    // True nuisance parts injected; residual is theta*tau + u against v.
    const double theta0 = -0.5;
    std::vector<double> errors;
    int covered = 0;
    const int reps = 200;
    for (int rep = 0; rep < reps; ++rep) {
        testutil::LinearPanel lp =
            testutil::make_linear_panel(100, 7, 3, theta0, 0.5, 0.5, 9000 + static_cast<std::uint64_t>(rep));
        std::size_t n = lp.panel.n_rows();
        FoldTheta fold = theta_on_split(lp.panel.outcome, lp.panel.treatment, lp.g_part, lp.m_part);

        // influence-function SE at the fold estimate
        double j0 = 0.0, psi_sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double psi = fold.v_hat[i] * (fold.outcome_resid[i] - fold.treatment[i] * fold.theta);
            psi_sq += psi * psi;
            j0 += fold.v_hat[i] * fold.treatment[i];
        }
        j0 /= static_cast<double>(n);
        double se = std::sqrt(psi_sq / static_cast<double>(n) / (j0 * j0) /
                              static_cast<double>(n));
        if (std::fabs(fold.theta - theta0) < 3.0 * se) ++covered;
        errors.push_back(fold.theta - theta0);
    }
    CHECK(covered >= 190);  // 3-sigma misses should be rare

    double mean = 0.0;
    for (double e : errors) mean += e;
    mean /= static_cast<double>(errors.size());
    double ss = 0.0;
    for (double e : errors) ss += (e - mean) * (e - mean);
    double mc_se = std::sqrt(ss / static_cast<double>(errors.size() - 1)) /
                   std::sqrt(static_cast<double>(errors.size()));
    CHECK(std::fabs(mean) < 3.0 * mc_se);
}

TEST_CASE("theta_on_split: constant treatment residual is a degenerate error") {
    std::size_t n = 50;
    std::vector<double> outcome(n, 1.0), treatment(n, 2.0), g(n, 0.0), m(n, 2.0);
    CHECK_THROWS_AS(theta_on_split(outcome, treatment, g, m), Error);
}

TEST_CASE("theta_crossfit: average identity and fold-swap symmetry") {
    testutil::LinearPanel lp = testutil::make_linear_panel(60, 6, 4, -0.5, 0.4, 0.4, 31);
    EstimationSample sample = sample_of(lp);
    CrossFitResult cf = theta_crossfit(sample, OlsNuisance{}, 12);
    CHECK(cf.theta == doctest::Approx(0.5 * (cf.theta_main + cf.theta_swapped)).epsilon(1e-14));
    CHECK(cf.max_fold_score < 1e-8 * static_cast<double>(sample.n_rows()));

    CrossFitResult again = theta_crossfit(sample, OlsNuisance{}, 12);
    CHECK(cf.theta == again.theta);
    CHECK(cf.se == again.se);
}

TEST_CASE("theta_crossfit: coverage on the linear DGP with OLS nuisances") {
    // Cross-sectional partially linear model: the nuisance dimension is tiny
    // relative to n, so the influence-function SE is honest.
    const double theta0 = -0.5;
    int covered = 0;
    const int reps = 50;
    for (int rep = 0; rep < reps; ++rep) {
        testutil::LinearPLM plm = testutil::make_linear_plm(
            1000, 5, theta0, 1.0, 1.0, 40000 + static_cast<std::uint64_t>(rep));
        EstimationSample sample{&plm.controls, &plm.fe, plm.outcome, plm.treatment};
        CrossFitResult cf = theta_crossfit(sample, OlsNuisance{}, 7);
        if (std::fabs(cf.theta - theta0) < 1.96 * cf.se) ++covered;
    }
    CHECK(covered >= 43);  // nominal 95% with finite-sample slack
}

TEST_CASE("dml_estimate: one repetition equals theta_crossfit") {
    testutil::LinearPanel lp = testutil::make_linear_panel(40, 5, 3, -0.5, 0.4, 0.4, 77);
    EstimationSample sample = sample_of(lp);
    DMLConfig cfg;
    cfg.repetitions = 1;
    cfg.seed = 100;
    DMLResult result = dml_estimate(sample, cfg);
    CrossFitResult cf = theta_crossfit(sample, OlsNuisance{}, 101);  // seed + 1
    CHECK(result.theta_median == cf.theta);
    CHECK(result.per_repetition_thetas.size() == 1);
    CHECK(result.standard_error == cf.se);
}

TEST_CASE("dml_estimate: 51 repetitions, median is the 26th order statistic") {
    testutil::LinearPanel lp = testutil::make_linear_panel(30, 5, 2, -0.5, 0.4, 0.4, 88);
    EstimationSample sample = sample_of(lp);
    DMLConfig cfg;
    cfg.repetitions = 51;
    cfg.seed = 7;
    DMLResult result = dml_estimate(sample, cfg, 2);
    REQUIRE(result.per_repetition_thetas.size() == 51);
    std::vector<double> sorted = result.per_repetition_thetas;
    std::sort(sorted.begin(), sorted.end());
    CHECK(result.theta_median == sorted[25]);

    // median is order-invariant
    std::vector<double> shuffled = result.per_repetition_thetas;
    Rng rng(5);
    rng.shuffle(shuffled);
    CHECK(exact_median(shuffled) == result.theta_median);

    // repetitions are keyed by seed regardless of scheduling
    DMLResult serial = dml_estimate(sample, cfg, 1);
    CHECK(serial.per_repetition_thetas == result.per_repetition_thetas);

    // even repetitions rejected
    DMLConfig bad = cfg;
    bad.repetitions = 10;
    CHECK_THROWS_AS(dml_estimate(sample, bad), Error);
}

TEST_CASE("dml_estimate: median unchanged by corrupting up to 25 of 51 values upward") {
    Rng rng(13);
    std::vector<double> thetas(51);
    for (auto& t : thetas) t = rng.normal();
    double median = exact_median(thetas);
    std::vector<double> corrupted = thetas;
    std::vector<int> order = rng.permutation(51);
    int changed = 0;
    std::vector<double> sorted = thetas;
    std::sort(sorted.begin(), sorted.end());
    for (int idx : order) {
        if (changed == 25) break;
        if (corrupted[static_cast<std::size_t>(idx)] > median) {
            corrupted[static_cast<std::size_t>(idx)] += 1e6;
            ++changed;
        }
    }
    CHECK(changed == 25);
    CHECK(exact_median(corrupted) == median);
}

TEST_CASE("dml_estimate: aborts when too many repetitions fail") {
    // constant treatment -> every repetition hits the degenerate denominator
    std::size_t n = 40;
    Matrix controls(n, 0);
    Matrix fe(n, 2, 0.0);
    std::vector<double> outcome(n), treatment(n, 1.0);
    Rng rng(3);
    for (std::size_t i = 0; i < n; ++i) {
        fe(i, 0) = 1.0;
        fe(i, 1) = (i % 2) ? 1.0 : 0.0;
        outcome[i] = rng.normal();
    }
    EstimationSample sample{&controls, &fe, outcome, treatment};
    DMLConfig cfg;
    cfg.repetitions = 5;
    CHECK_THROWS_AS(dml_estimate(sample, cfg), Error);
}

TEST_CASE("scale equivariance: doubling the outcome doubles every repetition theta") {
    testutil::LinearPanel lp = testutil::make_linear_panel(40, 5, 3, -0.5, 0.4, 0.4, 99);
    EstimationSample sample = sample_of(lp);
    DMLConfig cfg;
    cfg.repetitions = 5;
    cfg.seed = 9;
    DMLResult base = dml_estimate(sample, cfg);

    std::vector<double> doubled(lp.panel.outcome);
    for (double& v : doubled) v *= 2.0;
    EstimationSample scaled{&lp.panel.controls, &lp.fe_design, doubled, lp.panel.treatment};
    DMLResult twice = dml_estimate(scaled, cfg);
    for (std::size_t r = 0; r < 5; ++r)
        CHECK(twice.per_repetition_thetas[r] ==
              doctest::Approx(2.0 * base.per_repetition_thetas[r]).epsilon(1e-14));
    CHECK(twice.theta_median == doctest::Approx(2.0 * base.theta_median).epsilon(1e-14));
}

TEST_CASE("treatment shift: v_hat is invariant for intercept-bearing nuisances") {
    testutil::LinearPanel lp = testutil::make_linear_panel(40, 5, 3, -0.5, 0.4, 0.4, 101);
    EstimationSample sample = sample_of(lp);
    std::size_t n = sample.n_rows();
    CrossFitSplit split = split_crossfit(static_cast<int>(n), 4);

    std::vector<double> shifted(lp.panel.treatment);
    for (double& v : shifted) v += 10.0;
    EstimationSample moved{&lp.panel.controls, &lp.fe_design, lp.panel.outcome, shifted};

    for (const NuisanceKind& kind : {NuisanceKind{OlsNuisance{}}, NuisanceKind{LassoNuisance{}}}) {
        NuisanceModels before = fit_nuisances(sample, split.aux, kind, 8);
        NuisanceModels after = fit_nuisances(moved, split.aux, kind, 8);
        std::vector<double> m0 = before.predict_treatment(split.main);
        std::vector<double> m1 = after.predict_treatment(split.main);
        // predictions shift by exactly the added constant, so v_hat is unchanged
        for (std::size_t i = 0; i < m0.size(); ++i)
            CHECK(std::fabs((m1[i] - m0[i]) - 10.0) < 1e-8);
    }
}

TEST_CASE("treatment shift: theta invariant when the fold residuals sum to zero") {
    // With in-sample nuisances the OLS residuals sum to exactly zero, so the
    // shift drops out of Eq-style numerator and denominator alike.
    testutil::LinearPanel lp = testutil::make_linear_panel(40, 5, 3, -0.5, 0.4, 0.4, 113);
    EstimationSample sample = sample_of(lp);
    std::size_t n = sample.n_rows();
    std::vector<int> rows = all_rows(n);

    NuisanceModels in_sample = fit_nuisances(sample, rows, OlsNuisance{}, 3);
    FoldTheta base = theta_on_split(lp.panel.outcome, lp.panel.treatment,
                                    in_sample.predict_outcome(rows),
                                    in_sample.predict_treatment(rows));

    std::vector<double> shifted(lp.panel.treatment);
    for (double& v : shifted) v += 10.0;
    EstimationSample moved{&lp.panel.controls, &lp.fe_design, lp.panel.outcome, shifted};
    NuisanceModels in_sample2 = fit_nuisances(moved, rows, OlsNuisance{}, 3);
    FoldTheta after = theta_on_split(lp.panel.outcome, shifted, in_sample2.predict_outcome(rows),
                                     in_sample2.predict_treatment(rows));
    CHECK(std::fabs(after.theta - base.theta) < 1e-8);
}

TEST_CASE("constant nuisance predictions still yield a valid theta step") {
    testutil::LinearPanel lp = testutil::make_linear_panel(20, 4, 2, -0.5, 0.4, 0.4, 55);
    std::size_t n = lp.panel.n_rows();
    // an all-zero network predicts a constant (its bias, here 0)
    DeepWideSpec spec;
    DeepWideParams zeros = DeepWideParams::zeros(spec, 2, static_cast<int>(lp.fe_design.cols()));
    FeatureView view{&lp.panel.controls, &lp.fe_design};
    std::vector<int> idx = all_rows(n);
    std::vector<double> constant_pred = predict(zeros, view, idx);
    for (double v : constant_pred) CHECK(v == 0.0);
    FoldTheta fold =
        theta_on_split(lp.panel.outcome, lp.panel.treatment, constant_pred, constant_pred);
    CHECK(std::isfinite(fold.theta));
}

TEST_CASE("estimate_effect: group selection and generic columns") {
    testutil::LinearPanel lp = testutil::make_linear_panel(40, 5, 4, -0.5, 0.3, 0.3, 202);
    PanelDataset d = lp.panel;
    d.control_groups["x0"] = "housing";
    d.control_groups["x1"] = "housing";
    d.control_groups["x2"] = "economic";
    d.control_groups["x3"] = "migration";

    DMLConfig cfg;
    cfg.repetitions = 3;
    cfg.seed = 4;

    DMLResult housing = estimate_effect(d, "outcome", "treatment", {"housing"}, cfg);
    CHECK(housing.n_obs == 200);
    CHECK(std::isfinite(housing.theta_median));

    DMLResult all = estimate_effect(d, "outcome", "treatment",
                                    {"housing", "economic", "migration"}, cfg);
    CHECK(std::isfinite(all.theta_median));

    // treatment -> a control column as outcome (tax -> migration style)
    DMLResult alt = estimate_effect(d, "x3", "treatment", {"housing"}, cfg);
    CHECK(std::isfinite(alt.theta_median));

    CHECK_THROWS_AS(estimate_effect(d, "outcome", "treatment", {"schooling"}, cfg), Error);
    CHECK_THROWS_AS(estimate_effect(d, "nope", "treatment", {"housing"}, cfg), Error);
}

TEST_CASE("estimate_effect: empty control set agrees with OLS-FE on linear data") {
    const double theta0 = -0.5;
    testutil::LinearPanel lp = testutil::make_linear_panel(60, 6, 0, theta0, 0.3, 0.3, 303);
    PanelDataset d = lp.panel;

    DMLConfig cfg;
    cfg.repetitions = 11;
    cfg.seed = 12;
    DMLResult dml = estimate_effect(d, "outcome", "treatment", {}, cfg, 2);

    // OLS-FE benchmark on standardized variables
    auto [std_d, stats] = standardize(d, ColumnSelection::everything());
    FixedEffectDesign fe = encode_fixed_effects(std_d);
    Matrix design(std_d.n_rows(), fe.design.cols() + 1);
    for (std::size_t i = 0; i < std_d.n_rows(); ++i) {
        for (std::size_t j = 0; j < fe.design.cols(); ++j) design(i, j) = fe.design(i, j);
        design(i, fe.design.cols()) = std_d.treatment[i];
    }
    OLSFit ols = ols_fit(design, std_d.outcome);
    double ols_theta = ols.coefficients.back();
    double ols_se = ols.se(design.cols() - 1);
    double joint = 3.0 * std::sqrt(ols_se * ols_se + dml.standard_error * dml.standard_error);
    CHECK(std::fabs(dml.theta_median - ols_theta) < joint);
}

TEST_CASE("nuisance name and config echo") {
    CHECK(nuisance_name(OlsNuisance{}) == "ols");
    CHECK(nuisance_name(LassoNuisance{}) == "lasso");
    CHECK(nuisance_name(DeepWideNuisance{}) == "deep_wide");
    nlohmann::json j = nuisance_json(DeepWideNuisance{});
    CHECK(j["deep_layers"] == nlohmann::json::array({16, 8}));
    CHECK(j["l2_penalty"] == 0.05);
}
