#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmlpanel/matrix.hpp"

namespace dmlpanel {

// Rectangular entity x period panel. Entity and period label lists are kept
// sorted; reference categories and dummy encodings derive from that order.
struct PanelDataset {
    std::vector<std::string> entities;  // J distinct labels, sorted
    std::vector<std::string> periods;   // T distinct labels, sorted
    std::vector<int> entity_index;      // per row, into entities
    std::vector<int> period_index;      // per row, into periods
    std::vector<double> outcome;
    std::vector<double> treatment;
    Matrix controls;  // N x k
    std::vector<std::string> control_names;
    std::map<std::string, std::string> control_groups;  // column name -> group tag
    std::vector<std::string> county_class;              // per entity; empty when absent

    std::size_t n_rows() const { return outcome.size(); }
    int n_entities() const { return static_cast<int>(entities.size()); }
    int n_periods() const { return static_cast<int>(periods.size()); }
    int n_controls() const { return static_cast<int>(controls.cols()); }
    bool has_classes() const { return !county_class.empty(); }

    int control_column(const std::string& name) const;  // -1 when absent

    // Checks the type invariants: unique (entity, period) pairs, finite
    // values, consistent lengths. Throws Error::data on violation.
    void validate() const;
};

struct Schema {
    std::string entity;
    std::string period;
    std::string outcome;
    std::string treatment;
    std::optional<std::string> class_column;
    std::map<std::string, std::string> groups;  // control column -> group tag

    static Schema from_json_file(const std::string& path);
    std::string to_json_string() const;
};

struct RowRejection {
    std::size_t line;  // 1-based line number in the CSV
    std::string reason;
};

struct LoadResult {
    PanelDataset data;
    std::vector<RowRejection> rejected;
};

// Rows with missing required fields (empty / NA / non-finite cells) are
// rejected and reported; non-numeric text in a numeric column is an error.
LoadResult load_csv(const std::string& path, const Schema& schema);

struct MeanSd {
    double mean = 0.0;
    double sd = 1.0;
};

struct StandardizationStats {
    // Keys: "outcome", "treatment", or a control column name.
    std::map<std::string, MeanSd> columns;

    static double apply(const MeanSd& s, double x) { return (x - s.mean) / s.sd; }
    static double invert(const MeanSd& s, double z) { return z * s.sd + s.mean; }
};

struct ColumnSelection {
    bool outcome = false;
    bool treatment = false;
    bool all_controls = false;
    std::vector<std::string> controls;  // used when !all_controls

    static ColumnSelection everything() { return {true, true, true, {}}; }
};

// Sample standard deviation (denominator N-1) throughout.
std::pair<PanelDataset, StandardizationStats> standardize(const PanelDataset& d,
                                                          const ColumnSelection& sel);

struct FixedEffectDesign {
    Matrix design;  // N x (1 + J-1 + T-1): intercept, entity dummies, period dummies
    std::vector<std::string> column_names;
    std::string ref_entity;
    std::string ref_period;
};

// Drop-first reference coding with an explicit intercept.
FixedEffectDesign encode_fixed_effects(const PanelDataset& d);

struct CrossFitSplit {
    std::vector<int> main;  // I
    std::vector<int> aux;   // I^c
};

// Uniform random halves; |I| = ceil(n/2), |I^c| = floor(n/2).
CrossFitSplit split_crossfit(int n, std::uint64_t seed);

struct TrainValSplit {
    std::vector<int> train;
    std::vector<int> validation;
};

// Validation size = round(0.2 * n), remainder to training.
TrainValSplit split_train_val(std::span<const int> rows, std::uint64_t seed);

PanelDataset subset_by_class(const PanelDataset& d, const std::string& county_class);

}  // namespace dmlpanel
