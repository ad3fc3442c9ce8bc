#include "dmlpanel/panel_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "dmlpanel/common.hpp"
#include "dmlpanel/rng.hpp"

namespace dmlpanel {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

bool is_missing(const std::string& cell) {
    return cell.empty() || cell == "NA" || cell == "na" || cell == "NaN" || cell == "nan";
}

// Returns false for missing/non-finite, throws on unparseable text.
bool parse_cell(const std::string& cell, const std::string& column, std::size_t line,
                double* out) {
    if (is_missing(cell)) return false;
    std::size_t pos = 0;
    double v;
    try {
        v = std::stod(cell, &pos);
    } catch (const std::exception&) {
        throw Error::data("line " + std::to_string(line) + ": non-numeric value '" + cell +
                          "' in numeric column '" + column + "'");
    }
    if (pos != cell.size())
        throw Error::data("line " + std::to_string(line) + ": non-numeric value '" + cell +
                          "' in numeric column '" + column + "'");
    if (!std::isfinite(v)) return false;
    *out = v;
    return true;
}

}  // namespace

int PanelDataset::control_column(const std::string& name) const {
    for (std::size_t j = 0; j < control_names.size(); ++j)
        if (control_names[j] == name) return static_cast<int>(j);
    return -1;
}

void PanelDataset::validate() const {
    std::size_t n = n_rows();
    if (treatment.size() != n || entity_index.size() != n || period_index.size() != n ||
        controls.rows() != n)
        throw Error::data("panel field lengths are inconsistent");
    if (control_names.size() != controls.cols())
        throw Error::data("control name count does not match control matrix width");
    if (has_classes() && county_class.size() != entities.size())
        throw Error::data("county class labels must cover every entity");

    std::unordered_set<long long> seen;
    seen.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        int e = entity_index[i];
        int t = period_index[i];
        if (e < 0 || e >= n_entities() || t < 0 || t >= n_periods())
            throw Error::data("row " + std::to_string(i) + ": entity/period index out of range");
        long long key = static_cast<long long>(e) * 1000003LL + t;
        if (!seen.insert(key).second)
            throw Error::data("duplicate (entity, period) pair: (" + entities[e] + ", " +
                              periods[t] + ")");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(outcome[i]) || !std::isfinite(treatment[i]))
            throw Error::data("row " + std::to_string(i) + ": non-finite outcome/treatment");
        const double* c = controls.row(i);
        for (std::size_t j = 0; j < controls.cols(); ++j)
            if (!std::isfinite(c[j]))
                throw Error::data("row " + std::to_string(i) + ": non-finite control value in '" +
                                  control_names[j] + "'");
    }
}

Schema Schema::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error::io("cannot open schema file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw Error::data("invalid schema JSON in " + path + ": " + e.what());
    }
    Schema s;
    for (const char* key : {"entity", "period", "outcome", "treatment"})
        if (!j.contains(key)) throw Error::data("schema missing required key '" + std::string(key) + "'");
    s.entity = j.at("entity").get<std::string>();
    s.period = j.at("period").get<std::string>();
    s.outcome = j.at("outcome").get<std::string>();
    s.treatment = j.at("treatment").get<std::string>();
    if (j.contains("class_column") && !j.at("class_column").is_null())
        s.class_column = j.at("class_column").get<std::string>();
    if (j.contains("groups"))
        for (auto& [col, tag] : j.at("groups").items())
            s.groups[col] = tag.get<std::string>();
    return s;
}

std::string Schema::to_json_string() const {
    nlohmann::json j;
    j["entity"] = entity;
    j["period"] = period;
    j["outcome"] = outcome;
    j["treatment"] = treatment;
    if (class_column) j["class_column"] = *class_column;
    j["groups"] = groups;
    return j.dump(2);
}

LoadResult load_csv(const std::string& path, const Schema& schema) {
    std::ifstream in(path);
    if (!in) throw Error::io("cannot open panel CSV: " + path);

    std::string line;
    if (!std::getline(in, line)) throw Error::data("empty CSV: " + path);
    std::vector<std::string> header = split_csv_line(line);

    auto column_of = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            throw Error::data("schema column '" + name + "' not found in CSV header");
        return static_cast<std::size_t>(it - header.begin());
    };

    std::size_t entity_col = column_of(schema.entity);
    std::size_t period_col = column_of(schema.period);
    std::size_t outcome_col = column_of(schema.outcome);
    std::size_t treatment_col = column_of(schema.treatment);
    std::optional<std::size_t> class_col;
    if (schema.class_column) class_col = column_of(*schema.class_column);

    std::vector<std::size_t> control_cols;
    std::vector<std::string> control_names;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (c == entity_col || c == period_col || c == outcome_col || c == treatment_col) continue;
        if (class_col && c == *class_col) continue;
        control_cols.push_back(c);
        control_names.push_back(header[c]);
    }

    struct RawRow {
        std::string entity, period, cls;
        double outcome, treatment;
        std::vector<double> controls;
        std::size_t line;
    };
    std::vector<RawRow> rows;
    std::vector<RowRejection> rejected;

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            rejected.push_back({line_no, "expected " + std::to_string(header.size()) +
                                             " cells, got " + std::to_string(cells.size())});
            continue;
        }
        RawRow r;
        r.line = line_no;
        r.entity = cells[entity_col];
        r.period = cells[period_col];
        if (r.entity.empty() || r.period.empty()) {
            rejected.push_back({line_no, "missing entity or period label"});
            continue;
        }
        bool ok = parse_cell(cells[outcome_col], schema.outcome, line_no, &r.outcome) &&
                  parse_cell(cells[treatment_col], schema.treatment, line_no, &r.treatment);
        if (!ok) {
            rejected.push_back({line_no, "missing outcome or treatment value"});
            continue;
        }
        r.controls.resize(control_cols.size());
        std::string missing_control;
        for (std::size_t j = 0; j < control_cols.size(); ++j) {
            if (!parse_cell(cells[control_cols[j]], control_names[j], line_no, &r.controls[j])) {
                missing_control = control_names[j];
                break;
            }
        }
        if (!missing_control.empty()) {
            rejected.push_back({line_no, "missing value in control '" + missing_control + "'"});
            continue;
        }
        if (class_col) r.cls = cells[*class_col];
        rows.push_back(std::move(r));
    }

    if (rows.empty()) throw Error::data("no valid rows in " + path);

    std::set<std::string> entity_set, period_set;
    for (const auto& r : rows) {
        entity_set.insert(r.entity);
        period_set.insert(r.period);
    }
    if (entity_set.size() < 2) throw Error::data("fewer than 2 entities in " + path);
    if (period_set.size() < 2) throw Error::data("fewer than 2 periods in " + path);

    PanelDataset d;
    d.entities.assign(entity_set.begin(), entity_set.end());
    d.periods.assign(period_set.begin(), period_set.end());
    std::unordered_map<std::string, int> entity_of, period_of;
    for (std::size_t i = 0; i < d.entities.size(); ++i) entity_of[d.entities[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < d.periods.size(); ++i) period_of[d.periods[i]] = static_cast<int>(i);

    std::size_t n = rows.size();
    d.entity_index.resize(n);
    d.period_index.resize(n);
    d.outcome.resize(n);
    d.treatment.resize(n);
    d.controls = Matrix(n, control_cols.size());
    d.control_names = control_names;
    d.control_groups = schema.groups;

    for (std::size_t i = 0; i < n; ++i) {
        const RawRow& r = rows[i];
        d.entity_index[i] = entity_of[r.entity];
        d.period_index[i] = period_of[r.period];
        d.outcome[i] = r.outcome;
        d.treatment[i] = r.treatment;
        for (std::size_t j = 0; j < r.controls.size(); ++j) d.controls(i, j) = r.controls[j];
    }

    if (class_col) {
        d.county_class.assign(d.entities.size(), "");
        for (std::size_t i = 0; i < n; ++i) {
            int e = d.entity_index[i];
            const std::string& cls = rows[i].cls;
            if (d.county_class[e].empty()) {
                d.county_class[e] = cls;
            } else if (d.county_class[e] != cls) {
                throw Error::data("entity '" + d.entities[e] + "' has inconsistent class labels ('" +
                                  d.county_class[e] + "' vs '" + cls + "')");
            }
        }
    }

    d.validate();
    return {std::move(d), std::move(rejected)};
}

namespace {

MeanSd column_stats(std::span<const double> x, const std::string& name) {
    std::size_t n = x.size();
    if (n < 2) throw Error::data("cannot standardize column '" + name + "' with fewer than 2 rows");
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd <= 1e-14 * (1.0 + std::fabs(mean)))
        throw Error::data("zero-variance column '" + name + "' cannot be standardized");
    return {mean, sd};
}

void apply_standardization(std::vector<double>& x, const MeanSd& s) {
    for (double& v : x) v = (v - s.mean) / s.sd;
}

}  // namespace

std::pair<PanelDataset, StandardizationStats> standardize(const PanelDataset& d,
                                                          const ColumnSelection& sel) {
    PanelDataset out = d;
    StandardizationStats stats;

    if (sel.outcome) {
        MeanSd s = column_stats(out.outcome, "outcome");
        apply_standardization(out.outcome, s);
        stats.columns["outcome"] = s;
    }
    if (sel.treatment) {
        MeanSd s = column_stats(out.treatment, "treatment");
        apply_standardization(out.treatment, s);
        stats.columns["treatment"] = s;
    }

    std::vector<int> cols;
    if (sel.all_controls) {
        for (int j = 0; j < d.n_controls(); ++j) cols.push_back(j);
    } else {
        for (const auto& name : sel.controls) {
            int j = d.control_column(name);
            if (j < 0) throw Error::usage("unknown control column '" + name + "'");
            cols.push_back(j);
        }
    }
    std::size_t n = d.n_rows();
    std::vector<double> buf(n);
    for (int j : cols) {
        for (std::size_t i = 0; i < n; ++i) buf[i] = out.controls(i, static_cast<std::size_t>(j));
        MeanSd s = column_stats(buf, d.control_names[static_cast<std::size_t>(j)]);
        for (std::size_t i = 0; i < n; ++i)
            out.controls(i, static_cast<std::size_t>(j)) = (buf[i] - s.mean) / s.sd;
        stats.columns[d.control_names[static_cast<std::size_t>(j)]] = s;
    }
    return {std::move(out), std::move(stats)};
}

FixedEffectDesign encode_fixed_effects(const PanelDataset& d) {
    int j_count = d.n_entities();
    int t_count = d.n_periods();
    if (j_count < 2 || t_count < 2)
        throw Error::data("fixed-effect encoding needs at least 2 entities and 2 periods");

    std::size_t n = d.n_rows();
    std::size_t p = 1 + static_cast<std::size_t>(j_count - 1) + static_cast<std::size_t>(t_count - 1);
    FixedEffectDesign fe;
    fe.design = Matrix(n, p);
    fe.ref_entity = d.entities[0];
    fe.ref_period = d.periods[0];
    fe.column_names.reserve(p);
    fe.column_names.push_back("intercept");
    for (int j = 1; j < j_count; ++j) fe.column_names.push_back("entity:" + d.entities[static_cast<std::size_t>(j)]);
    for (int t = 1; t < t_count; ++t) fe.column_names.push_back("period:" + d.periods[static_cast<std::size_t>(t)]);

    for (std::size_t i = 0; i < n; ++i) {
        fe.design(i, 0) = 1.0;
        int e = d.entity_index[i];
        int t = d.period_index[i];
        if (e > 0) fe.design(i, static_cast<std::size_t>(e)) = 1.0;
        if (t > 0) fe.design(i, static_cast<std::size_t>(j_count - 1 + t)) = 1.0;
    }
    return fe;
}

CrossFitSplit split_crossfit(int n, std::uint64_t seed) {
    if (n < 2) throw Error::usage("cross-fit split needs at least 2 rows");
    Rng rng(derive_seed(seed, 0x501));
    std::vector<int> order = rng.permutation(n);
    std::size_t main_size = static_cast<std::size_t>((n + 1) / 2);
    CrossFitSplit s;
    s.main.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(main_size));
    s.aux.assign(order.begin() + static_cast<std::ptrdiff_t>(main_size), order.end());
    std::sort(s.main.begin(), s.main.end());
    std::sort(s.aux.begin(), s.aux.end());
    return s;
}

TrainValSplit split_train_val(std::span<const int> rows, std::uint64_t seed) {
    std::size_t n = rows.size();
    if (n < 5) throw Error::usage("train/validation split needs at least 5 rows");
    std::vector<int> order(rows.begin(), rows.end());
    Rng rng(derive_seed(seed, 0x701));
    rng.shuffle(order);
    std::size_t val_size = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n)));
    if (val_size == 0) val_size = 1;
    if (val_size >= n) val_size = n - 1;
    TrainValSplit s;
    s.train.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(val_size));
    s.validation.assign(order.end() - static_cast<std::ptrdiff_t>(val_size), order.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.validation.begin(), s.validation.end());
    return s;
}

PanelDataset subset_by_class(const PanelDataset& d, const std::string& county_class) {
    if (!d.has_classes()) throw Error::data("dataset has no county class labels");

    std::vector<int> keep_entities;
    for (int e = 0; e < d.n_entities(); ++e)
        if (d.county_class[static_cast<std::size_t>(e)] == county_class) keep_entities.push_back(e);
    if (keep_entities.empty())
        throw Error::data("no entities with class '" + county_class + "'; subset would be empty");

    std::vector<int> entity_map(d.entities.size(), -1);
    PanelDataset out;
    for (int e : keep_entities) {
        entity_map[static_cast<std::size_t>(e)] = static_cast<int>(out.entities.size());
        out.entities.push_back(d.entities[static_cast<std::size_t>(e)]);
        out.county_class.push_back(county_class);
    }

    std::vector<std::size_t> keep_rows;
    std::set<int> periods_present;
    for (std::size_t i = 0; i < d.n_rows(); ++i) {
        if (entity_map[static_cast<std::size_t>(d.entity_index[i])] >= 0) {
            keep_rows.push_back(i);
            periods_present.insert(d.period_index[i]);
        }
    }

    std::vector<int> period_map(d.periods.size(), -1);
    for (int t : periods_present) {
        period_map[static_cast<std::size_t>(t)] = static_cast<int>(out.periods.size());
        out.periods.push_back(d.periods[static_cast<std::size_t>(t)]);
    }

    std::size_t n = keep_rows.size();
    out.entity_index.resize(n);
    out.period_index.resize(n);
    out.outcome.resize(n);
    out.treatment.resize(n);
    out.controls = Matrix(n, d.controls.cols());
    out.control_names = d.control_names;
    out.control_groups = d.control_groups;

    for (std::size_t i = 0; i < n; ++i) {
        std::size_t src = keep_rows[i];
        out.entity_index[i] = entity_map[static_cast<std::size_t>(d.entity_index[src])];
        out.period_index[i] = period_map[static_cast<std::size_t>(d.period_index[src])];
        out.outcome[i] = d.outcome[src];
        out.treatment[i] = d.treatment[src];
        for (std::size_t j = 0; j < d.controls.cols(); ++j) out.controls(i, j) = d.controls(src, j);
    }
    return out;
}

}  // namespace dmlpanel
