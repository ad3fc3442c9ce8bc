// dmlpanel: reproducible batch runs for panel estimation and simulation.
//
// Exit codes: 0 success, 2 usage/validation, 3 I/O, 4 data validation,
// 5 computation (divergence, degeneracy, rank).
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dmlpanel/common.hpp"
#include "dmlpanel/dml_estimator.hpp"
#include "dmlpanel/linear_models.hpp"
#include "dmlpanel/monte_carlo.hpp"
#include "dmlpanel/panel_data.hpp"
#include "dmlpanel/parallel.hpp"

namespace {

using namespace dmlpanel;

int exit_code(ErrKind kind) {
    switch (kind) {
        case ErrKind::usage: return 2;
        case ErrKind::io: return 3;
        case ErrKind::data: return 4;
        case ErrKind::compute: return 5;
    }
    return 5;
}

std::uint64_t default_seed() {
    if (const char* env = std::getenv("DMLPANEL_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw Error::usage("DMLPANEL_SEED is not a valid integer: " + std::string(env));
        }
    }
    return 0;
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw Error::io("cannot open for writing: " + path);
    out << content;
    if (!out) throw Error::io("failed while writing: " + path);
}

NuisanceKind nuisance_from_flag(const std::string& name) {
    if (name == "ols") return OlsNuisance{};
    if (name == "dml-lasso") return LassoNuisance{};
    if (name == "dml-dw") return DeepWideNuisance{};
    throw Error::usage("unknown estimator '" + name + "' (expected ols, dml-lasso, dml-dw)");
}

struct TableRow {
    std::string label;
    double theta = 0.0;
    double se = 0.0;
    int n = 0;
    std::string se_note;
    std::string controls_note;
};

std::string format_table(const std::vector<TableRow>& rows) {
    std::ostringstream out;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-24s %14s %12s %10s %7s %5s  %s\n", "specification",
                  "treatment", "(SE)", "p-value", "N", "SEs", "controls");
    out << buf;
    out << std::string(100, '-') << '\n';
    for (const TableRow& r : rows) {
        double p = two_sided_p(r.theta / r.se);
        std::string coef = [&] {
            char c[48];
            std::snprintf(c, sizeof(c), "%.4f%s", r.theta, significance_stars(p).c_str());
            return std::string(c);
        }();
        std::string se = [&] {
            char c[48];
            std::snprintf(c, sizeof(c), "(%.4f)", r.se);
            return std::string(c);
        }();
        std::snprintf(buf, sizeof(buf), "%-24s %14s %12s %10.4f %7d %5s  %s\n", r.label.c_str(),
                      coef.c_str(), se.c_str(), p, r.n, r.se_note.c_str(),
                      r.controls_note.c_str());
        out << buf;
    }
    out << std::string(100, '-') << '\n';
    out << "* p<.1, ** p<.05, *** p<.01\n";
    return out.str();
}

nlohmann::json row_json(const TableRow& r) {
    double p = two_sided_p(r.theta / r.se);
    return {{"specification", r.label}, {"theta", r.theta},   {"se", r.se},
            {"p_value", p},             {"stars", significance_stars(p)},
            {"n", r.n},                 {"se_type", r.se_note}, {"controls", r.controls_note}};
}

// OLS of standardized outcome on treatment + fixed effects (+ extra control
// columns), entity-clustered SEs; returns the treatment row of the table.
TableRow ols_fe_row(const PanelDataset& d, const std::vector<int>& extra_controls,
                    const std::string& label, const std::string& controls_note) {
    auto [std_d, stats] = standardize(d, ColumnSelection::everything());
    FixedEffectDesign fe = encode_fixed_effects(std_d);
    std::size_t n = std_d.n_rows();
    std::size_t fe_cols = fe.design.cols();
    Matrix design(n, fe_cols + extra_controls.size() + 1);
    for (std::size_t i = 0; i < n; ++i) {
        double* dst = design.row(i);
        for (std::size_t c = 0; c < fe_cols; ++c) dst[c] = fe.design(i, c);
        for (std::size_t a = 0; a < extra_controls.size(); ++a)
            dst[fe_cols + a] = std_d.controls(i, static_cast<std::size_t>(extra_controls[a]));
        dst[fe_cols + extra_controls.size()] = std_d.treatment[i];
    }
    OLSFit fit = ols_fit(design, std_d.outcome);
    Matrix clustered = clustered_covariance(fit, design, std_d.entity_index);
    std::size_t tcol = design.cols() - 1;
    TableRow row;
    row.label = label;
    row.theta = fit.coefficients[tcol];
    row.se = std::sqrt(clustered(tcol, tcol));
    row.n = static_cast<int>(n);
    row.se_note = "CL";
    row.controls_note = controls_note;
    return row;
}

int cmd_estimate(const std::string& input, const std::string& schema_path,
                 const std::string& class_filter, const std::string& groups_flag,
                 const std::string& estimator_flag, int reps, std::uint64_t seed, int threads,
                 const std::string& out_dir) {
    Schema schema = Schema::from_json_file(schema_path);
    LoadResult loaded = load_csv(input, schema);
    for (const RowRejection& r : loaded.rejected)
        std::cerr << "warning: rejected row (line " << r.line << "): " << r.reason << "\n";

    PanelDataset data = std::move(loaded.data);
    if (class_filter != "all") data = subset_by_class(data, class_filter);

    std::set<std::string> all_tags;
    for (const auto& [col, tag] : data.control_groups) all_tags.insert(tag);
    std::set<std::string> groups;
    if (groups_flag.empty()) {
        groups = all_tags;
    } else if (groups_flag != "none") {
        for (const auto& tag : split_list(groups_flag)) groups.insert(tag);
    }

    std::vector<TableRow> rows;
    rows.push_back(ols_fe_row(data, {}, "ols_fe", "none"));

    std::vector<int> standard_cols;
    for (std::size_t j = 0; j < data.control_names.size(); ++j) {
        auto it = data.control_groups.find(data.control_names[j]);
        if (it != data.control_groups.end() && it->second == "standard")
            standard_cols.push_back(static_cast<int>(j));
    }
    rows.push_back(ols_fe_row(data, standard_cols, "ols_fe_standard", "standard"));

    DMLConfig cfg;
    cfg.repetitions = reps;
    cfg.seed = seed;
    cfg.nuisance = nuisance_from_flag(estimator_flag);
    DMLResult dml = estimate_effect(data, "outcome", "treatment", groups, cfg, threads);

    std::string group_list;
    for (const auto& g : groups) group_list += (group_list.empty() ? "" : ",") + g;
    TableRow dml_row;
    dml_row.label = "dml_" + nuisance_name(cfg.nuisance);
    dml_row.theta = dml.theta_median;
    dml_row.se = dml.standard_error;
    dml_row.n = dml.n_obs;
    dml_row.se_note = "-";
    dml_row.controls_note = group_list.empty() ? "none" : group_list;
    rows.push_back(dml_row);

    nlohmann::json out;
    out["command"] = "estimate";
    out["config"] = {{"input", input},
                     {"schema", schema_path},
                     {"class", class_filter},
                     {"groups", std::vector<std::string>(groups.begin(), groups.end())},
                     {"estimator", estimator_flag},
                     {"repetitions", reps},
                     {"seed", seed},
                     {"nuisance", nuisance_json(cfg.nuisance)}};
    out["rejected_rows"] = loaded.rejected.size();
    nlohmann::json specs = nlohmann::json::array();
    for (const TableRow& r : rows) specs.push_back(row_json(r));
    out["results"] = specs;
    out["dml"] = dml_result_json(dml, cfg);

    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/estimate.json", out.dump(2) + "\n");
    std::string table = format_table(rows);
    write_file(out_dir + "/estimate.txt", table);
    std::cout << table;
    return 0;
}

int cmd_simulate(const std::string& profile_name, int k, int entities, int periods, int reps,
                 int dml_reps, double theta0, double noise_u, double noise_v,
                 const std::string& estimators_flag, std::uint64_t seed, int threads,
                 const std::string& out_dir) {
    SimProfile profile = profile_by_name(profile_name);
    DGPConfig cfg = profile.dgp;
    if (k > 0) cfg.k = k;
    if (entities > 0) cfg.J = entities;
    if (periods > 0) cfg.T = periods;
    if (reps > 0) cfg.replications = reps;
    if (theta0 != 0.0) cfg.theta0 = theta0;
    if (noise_u >= 0.0) cfg.noise_sd_u = noise_u;
    if (noise_v >= 0.0) cfg.noise_sd_v = noise_v;
    cfg.seed = seed;

    ExperimentOptions opts;
    opts.dml_repetitions = dml_reps > 0 ? dml_reps : profile.dml_repetitions;
    opts.threads = threads;

    std::vector<Estimator> estimators;
    for (const auto& name : split_list(estimators_flag))
        estimators.push_back(estimator_from_name(name));

    BiasReport report = run_experiment(cfg, estimators, opts);

    nlohmann::json out = bias_report_json(report);
    out["command"] = "simulate";
    out["profile"] = profile_name;

    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/bias_report.json", out.dump(2) + "\n");

    for (const EstimatorBias& eb : report.estimators) {
        std::ostringstream csv;
        csv << "grid,density\n";
        char buf[64];
        for (std::size_t i = 0; i < eb.kde.grid.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", eb.kde.grid[i], eb.kde.density[i]);
            csv << buf;
        }
        write_file(out_dir + "/kde_" + eb.name + ".csv", csv.str());
    }

    for (const EstimatorBias& eb : report.estimators)
        std::cout << eb.name << ": mean bias " << eb.mean_bias << ", sd " << eb.sd_bias
                  << ", median " << eb.median_bias << ", failures " << eb.failures << "\n";
    return 0;
}

int cmd_dgp_gen(const std::string& profile_name, int k, int entities, int periods,
                int replication, std::uint64_t seed, const std::string& out_path) {
    SimProfile profile = profile_by_name(profile_name);
    DGPConfig cfg = profile.dgp;
    if (k > 0) cfg.k = k;
    if (entities > 0) cfg.J = entities;
    if (periods > 0) cfg.T = periods;
    cfg.seed = seed;

    DGPDraw draw = draw_dgp(cfg, replication);
    export_dgp_csv(draw, out_path);
    std::cout << "wrote " << draw.panel.n_rows() << " rows, " << draw.panel.n_controls()
              << " controls to " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Panel-data treatment-effect estimation with cross-fitted nuisance learners"};
    app.require_subcommand(1);

    // estimate
    auto* estimate = app.add_subcommand("estimate", "Estimate the treatment effect on a panel CSV");
    std::string input, schema_path, out_dir = "out";
    std::string class_filter = "all", groups_flag, estimator_flag = "dml-dw";
    int reps = 51;
    int threads = hardware_threads();
    std::uint64_t seed = 0;
    bool seed_given = false;
    estimate->add_option("--input", input, "panel CSV path")->required();
    estimate->add_option("--schema", schema_path, "schema JSON path")->required();
    estimate->add_option("--class", class_filter, "entity class filter: all|urban|rural");
    estimate->add_option("--groups", groups_flag,
                         "comma list of control group tags (default: all; 'none' for empty)");
    estimate->add_option("--estimator", estimator_flag, "ols | dml-lasso | dml-dw");
    estimate->add_option("--reps", reps, "DML repetitions (odd)");
    estimate->add_option("--seed", seed, "master seed")->each([&](const std::string&) {
        seed_given = true;
    });
    estimate->add_option("--threads", threads, "worker thread cap");
    estimate->add_option("--out", out_dir, "output directory");

    // simulate
    auto* simulate = app.add_subcommand("simulate", "Run the estimator-bias simulation");
    std::string profile_name = "desk";
    std::string estimators_flag = "ols_subset,dml_lasso,dml_dw";
    int sim_k = 0, sim_j = 0, sim_t = 0, sim_reps = 0, dml_reps = 0;
    double theta0 = 0.0, noise_u = -1.0, noise_v = -1.0;
    simulate->add_option("--profile", profile_name, "desk | paper");
    simulate->add_option("--k", sim_k, "override control count");
    simulate->add_option("--entities", sim_j, "override entity count");
    simulate->add_option("--periods", sim_t, "override period count");
    simulate->add_option("--reps", sim_reps, "override replication count");
    simulate->add_option("--dml-reps", dml_reps, "override DML repetitions (odd)");
    simulate->add_option("--theta0", theta0, "override true theta");
    simulate->add_option("--noise-u", noise_u, "override outcome noise sd");
    simulate->add_option("--noise-v", noise_v, "override treatment noise sd");
    simulate->add_option("--estimators", estimators_flag,
                         "comma list: ols_subset,dml_lasso,dml_dw");
    simulate->add_option("--seed", seed, "master seed")->each([&](const std::string&) {
        seed_given = true;
    });
    simulate->add_option("--threads", threads, "worker thread cap");
    simulate->add_option("--out", out_dir, "output directory");

    // dgp-gen
    auto* dgp_gen = app.add_subcommand("dgp-gen", "Export one synthetic panel draw");
    int replication = 0;
    std::string dgp_out = "dgp.csv";
    dgp_gen->add_option("--profile", profile_name, "desk | paper");
    dgp_gen->add_option("--k", sim_k, "override control count");
    dgp_gen->add_option("--entities", sim_j, "override entity count");
    dgp_gen->add_option("--periods", sim_t, "override period count");
    dgp_gen->add_option("--replication", replication, "replication index of the draw");
    dgp_gen->add_option("--seed", seed, "master seed")->each([&](const std::string&) {
        seed_given = true;
    });
    dgp_gen->add_option("--out", dgp_out, "output CSV path");

    try {
        app.parse(argc, argv);
        if (!seed_given) seed = default_seed();
        if (threads < 1) throw Error::usage("--threads must be at least 1");

        if (estimate->parsed())
            return cmd_estimate(input, schema_path, class_filter, groups_flag, estimator_flag,
                                reps, seed, threads, out_dir);
        if (simulate->parsed())
            return cmd_simulate(profile_name, sim_k, sim_j, sim_t, sim_reps, dml_reps, theta0,
                                noise_u, noise_v, estimators_flag, seed, threads, out_dir);
        if (dgp_gen->parsed())
            return cmd_dgp_gen(profile_name, sim_k, sim_j, sim_t, replication, seed, dgp_out);
        return 2;
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    }
}
