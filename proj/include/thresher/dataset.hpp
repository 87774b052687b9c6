#ifndef THRESHER_DATASET_HPP
#define THRESHER_DATASET_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "thresher/core.hpp"
#include "thresher/csv.hpp"
#include "thresher/interpret.hpp"

namespace thresher::dataset {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
inline constexpr double kVifAdvisoryThreshold = 5.0;

enum class VariableLevel { person, household, zone };
enum class VariableKind { numeric, categorical };

inline std::string to_string(VariableLevel level) {
    switch (level) {
        case VariableLevel::person: return "person";
        case VariableLevel::household: return "household";
        case VariableLevel::zone: return "zone";
    }
    return "?";
}

inline VariableLevel level_from_string(const std::string& s) {
    if (s == "person") return VariableLevel::person;
    if (s == "household") return VariableLevel::household;
    if (s == "zone") return VariableLevel::zone;
    throw std::invalid_argument("unknown variable level '" + s + "'");
}

struct VariableSpec {
    std::string name;
    VariableLevel level = VariableLevel::person;
    VariableKind kind = VariableKind::numeric;
    std::vector<std::string> categories;  // categorical only, in display order
    std::string reference;                // categorical only
    std::string units;

    void validate() const {
        if (name.empty()) throw std::invalid_argument("variable with empty name");
        if (kind == VariableKind::categorical) {
            if (categories.size() < 2)
                throw std::invalid_argument("categorical variable '" + name +
                                            "' needs >= 2 categories");
            std::set<std::string> seen(categories.begin(), categories.end());
            if (seen.size() != categories.size())
                throw std::invalid_argument("duplicate category in variable '" + name + "'");
            if (!seen.count(reference))
                throw std::invalid_argument("reference '" + reference + "' of variable '" + name +
                                            "' is not one of its categories");
        }
    }
};

class Schema {
public:
    Schema() = default;
    explicit Schema(std::vector<VariableSpec> vars) : vars_(std::move(vars)) {
        std::set<std::string> names;
        for (const auto& v : vars_) {
            v.validate();
            if (!names.insert(v.name).second)
                throw std::invalid_argument("duplicate variable name '" + v.name + "' in schema");
        }
    }

    const std::vector<VariableSpec>& variables() const { return vars_; }

    const VariableSpec& require(const std::string& name) const {
        for (const auto& v : vars_)
            if (v.name == name) return v;
        throw std::invalid_argument("unknown variable '" + name + "'");
    }

    bool has(const std::string& name) const {
        for (const auto& v : vars_)
            if (v.name == name) return true;
        return false;
    }

    std::vector<VariableSpec> at_level(VariableLevel level) const {
        std::vector<VariableSpec> out;
        for (const auto& v : vars_)
            if (v.level == level) out.push_back(v);
        return out;
    }

private:
    std::vector<VariableSpec> vars_;
};

// ---------------------------------------------------------------------------
// One level of the hierarchy: rows with an id, optional parent id, and
// schema-variable columns. Extra numeric columns (e.g. raw zone counts) ride
// along untouched.
// ---------------------------------------------------------------------------
struct LevelTable {
    std::vector<std::string> ids;
    std::vector<std::string> parent_ids;  // empty when the level has no parent
    std::map<std::string, std::vector<double>> numeric;
    std::map<std::string, std::vector<std::string>> categorical;

    std::size_t size() const { return ids.size(); }

    std::size_t index_of(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw std::runtime_error("unknown id '" + id + "'");
        return it->second;
    }

    bool has_id(const std::string& id) const { return index_.count(id) > 0; }

    void rebuild_index() {
        index_.clear();
        index_.reserve(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) index_.emplace(ids[i], i);
    }

    void keep_rows(const std::vector<bool>& keep) {
        const auto filter_ids = [&](std::vector<std::string>& v) {
            std::vector<std::string> out;
            out.reserve(v.size());
            for (std::size_t i = 0; i < v.size(); ++i)
                if (keep[i]) out.push_back(std::move(v[i]));
            v = std::move(out);
        };
        filter_ids(ids);
        if (!parent_ids.empty()) filter_ids(parent_ids);
        for (auto& [name, col] : numeric) {
            std::vector<double> out;
            out.reserve(col.size());
            for (std::size_t i = 0; i < col.size(); ++i)
                if (keep[i]) out.push_back(col[i]);
            col = std::move(out);
        }
        for (auto& [name, col] : categorical) filter_ids(col);
        rebuild_index();
    }

private:
    std::unordered_map<std::string, std::size_t> index_;
};

struct HierarchicalWave {
    std::string label;
    Schema schema;
    LevelTable persons;     // parent = household_id
    LevelTable households;  // parent = zone_id
    LevelTable zones;
    std::vector<double> response;  // aligned with persons rows, NaN = missing
    std::string response_name = "VMT_Person";

    // Joined value of a numeric variable per person row.
    std::vector<double> joined_numeric(const std::string& variable) const {
        const VariableSpec& spec = schema.require(variable);
        if (spec.kind != VariableKind::numeric)
            throw std::invalid_argument("variable '" + variable + "' is not numeric");
        return join_numeric_column(spec.level, variable);
    }

    std::vector<std::string> joined_categorical(const std::string& variable) const {
        const VariableSpec& spec = schema.require(variable);
        if (spec.kind != VariableKind::categorical)
            throw std::invalid_argument("variable '" + variable + "' is not categorical");
        const LevelTable& table = level_table(spec.level);
        const auto& col = table.categorical.at(variable);
        std::vector<std::string> out(persons.size());
        for (std::size_t i = 0; i < persons.size(); ++i) out[i] = col[row_at_level(i, spec.level)];
        return out;
    }

    const LevelTable& level_table(VariableLevel level) const {
        switch (level) {
            case VariableLevel::person: return persons;
            case VariableLevel::household: return households;
            case VariableLevel::zone: return zones;
        }
        throw std::logic_error("bad level");
    }

    LevelTable& level_table(VariableLevel level) {
        switch (level) {
            case VariableLevel::person: return persons;
            case VariableLevel::household: return households;
            case VariableLevel::zone: return zones;
        }
        throw std::logic_error("bad level");
    }

    // Row index in the level's table that backs person row i.
    std::size_t row_at_level(std::size_t person_row, VariableLevel level) const {
        if (level == VariableLevel::person) return person_row;
        const std::size_t hh = households.index_of(persons.parent_ids[person_row]);
        if (level == VariableLevel::household) return hh;
        return zones.index_of(households.parent_ids[hh]);
    }

    void validate_nesting() const {
        for (std::size_t i = 0; i < persons.size(); ++i)
            if (!households.has_id(persons.parent_ids[i]))
                throw std::runtime_error("person '" + persons.ids[i] +
                                         "' references absent household '" +
                                         persons.parent_ids[i] + "'");
        for (std::size_t i = 0; i < households.size(); ++i)
            if (!zones.has_id(households.parent_ids[i]))
                throw std::runtime_error("household '" + households.ids[i] +
                                         "' references absent zone '" + households.parent_ids[i] +
                                         "'");
    }

private:
    std::vector<double> join_numeric_column(VariableLevel level, const std::string& name) const {
        const auto& col = level_table(level).numeric.at(name);
        std::vector<double> out(persons.size());
        for (std::size_t i = 0; i < persons.size(); ++i) out[i] = col[row_at_level(i, level)];
        return out;
    }
};

// ---------------------------------------------------------------------------
// load_wave: three CSV files -> validated wave.
// ---------------------------------------------------------------------------
namespace detail {

inline void check_unique_ids(const std::vector<std::string>& ids, const std::string& table) {
    std::set<std::string> seen;
    for (const auto& id : ids)
        if (!seen.insert(id).second)
            throw std::runtime_error("duplicate id '" + id + "' in " + table + " table");
}

inline double parse_cell(const std::string& cell, const std::string& column, std::size_t row) {
    if (cell.empty()) return kMissing;
    try {
        return parse_double(cell);
    } catch (const std::exception&) {
        throw std::runtime_error("column '" + column + "' row " + std::to_string(row + 2) +
                                 ": cannot parse '" + cell + "' as a number");
    }
}

inline LevelTable load_level(const csv::Table& table, const std::string& id_column,
                             const std::string& parent_column,
                             const std::vector<VariableSpec>& variables,
                             const std::string& table_name,
                             const std::set<std::string>& optional_variables) {
    LevelTable out;
    const std::size_t id_col = table.column_index(id_column);
    const std::size_t n = table.rows.size();
    out.ids.reserve(n);
    for (const auto& row : table.rows) out.ids.push_back(row[id_col]);
    check_unique_ids(out.ids, table_name);

    if (!parent_column.empty()) {
        const std::size_t pc = table.column_index(parent_column);
        out.parent_ids.reserve(n);
        for (const auto& row : table.rows) out.parent_ids.push_back(row[pc]);
    }

    for (const auto& var : variables) {
        if (!table.has_column(var.name) && optional_variables.count(var.name)) {
            // Filled in by a later derive pass.
            if (var.kind == VariableKind::numeric)
                out.numeric[var.name] = std::vector<double>(n, kMissing);
            else
                out.categorical[var.name] = std::vector<std::string>(n, "");
            continue;
        }
        const std::size_t c = table.column_index(var.name);
        if (var.kind == VariableKind::numeric) {
            std::vector<double> col(n);
            for (std::size_t i = 0; i < n; ++i) col[i] = parse_cell(table.rows[i][c], var.name, i);
            out.numeric[var.name] = std::move(col);
        } else {
            std::vector<std::string> col(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::string& cell = table.rows[i][c];
                if (!cell.empty() &&
                    std::find(var.categories.begin(), var.categories.end(), cell) ==
                        var.categories.end())
                    throw std::runtime_error("variable '" + var.name + "' row " +
                                             std::to_string(i + 2) + ": unknown category '" +
                                             cell + "'");
                col[i] = cell;
            }
            out.categorical[var.name] = std::move(col);
        }
    }
    out.rebuild_index();
    return out;
}

}  // namespace detail

struct LoadOptions {
    std::string response_name = "VMT_Person";
    // When false, the response column may be absent (to be derived later).
    bool require_response = true;
    // Extra numeric zone columns to retain when present (raw counts etc.).
    std::vector<std::string> zone_extra_columns = {"households", "emp_basic", "emp_retail",
                                                   "emp_service"};
    // Schema variables a later derive pass will fill; they may be absent
    // from the files and load as all-missing columns.
    std::set<std::string> derived_variables;
};

inline HierarchicalWave load_wave(const std::string& person_csv, const std::string& household_csv,
                                  const std::string& zone_csv, const Schema& schema,
                                  const LoadOptions& options = {}, const std::string& label = "") {
    HierarchicalWave wave;
    wave.label = label;
    wave.schema = schema;
    wave.response_name = options.response_name;

    const csv::Table persons = csv::read_file(person_csv);
    const csv::Table households = csv::read_file(household_csv);
    const csv::Table zones = csv::read_file(zone_csv);

    wave.persons = detail::load_level(persons, "person_id", "household_id",
                                      schema.at_level(VariableLevel::person), "person",
                                      options.derived_variables);
    wave.households = detail::load_level(households, "household_id", "zone_id",
                                         schema.at_level(VariableLevel::household), "household",
                                         options.derived_variables);
    wave.zones = detail::load_level(zones, "zone_id", "", schema.at_level(VariableLevel::zone),
                                    "zone", options.derived_variables);

    for (const auto& extra : options.zone_extra_columns) {
        if (!zones.has_column(extra) || wave.zones.numeric.count(extra)) continue;
        const std::size_t c = zones.column_index(extra);
        std::vector<double> col(zones.rows.size());
        for (std::size_t i = 0; i < zones.rows.size(); ++i)
            col[i] = detail::parse_cell(zones.rows[i][c], extra, i);
        wave.zones.numeric[extra] = std::move(col);
    }

    if (persons.has_column(options.response_name)) {
        const std::size_t c = persons.column_index(options.response_name);
        wave.response.resize(persons.rows.size());
        for (std::size_t i = 0; i < persons.rows.size(); ++i)
            wave.response[i] = detail::parse_cell(persons.rows[i][c], options.response_name, i);
    } else if (options.require_response) {
        throw std::runtime_error("missing column '" + options.response_name + "'");
    } else {
        wave.response.assign(persons.rows.size(), kMissing);
    }

    wave.validate_nesting();
    return wave;
}

// ---------------------------------------------------------------------------
// clean: drop rows with missing schema values, drop persons with missing or
// negative response, optionally winsorize the response.
// ---------------------------------------------------------------------------
struct CleanPolicy {
    // Missing-value action is drop-row (the only supported policy); drops are
    // always logged.
    std::optional<double> winsorize_percentile;  // in (50, 100); empty = off
    // Variables the caller will fill in later (e.g. derived columns); their
    // missing values are ignored on this pass.
    std::set<std::string> exempt_variables;
    bool exempt_response = false;

    void validate() const {
        if (winsorize_percentile &&
            !(*winsorize_percentile > 50.0 && *winsorize_percentile < 100.0))
            throw std::invalid_argument("winsorize percentile must lie in (50, 100)");
    }
};

struct CleanLog {
    struct Drop {
        std::string table;
        std::string id;
        std::string reason;
    };
    struct WinsorizedCell {
        std::string person_id;
        double old_value;
        double new_value;
    };

    std::vector<Drop> drops;
    std::vector<WinsorizedCell> winsorized;

    bool empty() const { return drops.empty() && winsorized.empty(); }

    void write_csv(const std::string& path) const {
        csv::Writer w(path);
        w.row({"action", "table", "id", "reason", "old_value", "new_value"});
        for (const auto& d : drops) w.row({"drop", d.table, d.id, d.reason, "", ""});
        for (const auto& c : winsorized)
            w.row({"winsorize", "person", c.person_id, "response",
                   format_double(c.old_value), format_double(c.new_value)});
    }
};

namespace detail {

inline std::vector<bool> missing_mask(const LevelTable& table,
                                      const std::vector<VariableSpec>& variables,
                                      const std::set<std::string>& exempt,
                                      std::vector<std::string>* reasons) {
    std::vector<bool> missing(table.size(), false);
    reasons->assign(table.size(), "");
    for (const auto& var : variables) {
        if (exempt.count(var.name)) continue;
        if (var.kind == VariableKind::numeric) {
            const auto& col = table.numeric.at(var.name);
            for (std::size_t i = 0; i < col.size(); ++i)
                if (std::isnan(col[i]) && !missing[i]) {
                    missing[i] = true;
                    (*reasons)[i] = "missing:" + var.name;
                }
        } else {
            const auto& col = table.categorical.at(var.name);
            for (std::size_t i = 0; i < col.size(); ++i)
                if (col[i].empty() && !missing[i]) {
                    missing[i] = true;
                    (*reasons)[i] = "missing:" + var.name;
                }
        }
    }
    return missing;
}

}  // namespace detail

inline std::pair<HierarchicalWave, CleanLog> clean(const HierarchicalWave& input,
                                                   const CleanPolicy& policy) {
    policy.validate();
    HierarchicalWave wave = input;
    CleanLog log;

    std::vector<std::string> reasons;

    // Zones first, then cascade down.
    auto zone_missing = detail::missing_mask(wave.zones,
                                             wave.schema.at_level(VariableLevel::zone),
                                             policy.exempt_variables, &reasons);
    std::set<std::string> dropped_zones;
    for (std::size_t i = 0; i < wave.zones.size(); ++i)
        if (zone_missing[i]) {
            dropped_zones.insert(wave.zones.ids[i]);
            log.drops.push_back({"zone", wave.zones.ids[i], reasons[i]});
        }

    auto hh_missing = detail::missing_mask(wave.households,
                                           wave.schema.at_level(VariableLevel::household),
                                           policy.exempt_variables, &reasons);
    std::set<std::string> dropped_households;
    for (std::size_t i = 0; i < wave.households.size(); ++i) {
        std::string reason = reasons[i];
        bool drop = hh_missing[i];
        if (!drop && dropped_zones.count(wave.households.parent_ids[i])) {
            drop = true;
            reason = "zone_dropped:" + wave.households.parent_ids[i];
        }
        if (drop) {
            dropped_households.insert(wave.households.ids[i]);
            log.drops.push_back({"household", wave.households.ids[i], reason});
        }
    }

    auto person_missing = detail::missing_mask(wave.persons,
                                               wave.schema.at_level(VariableLevel::person),
                                               policy.exempt_variables, &reasons);
    std::vector<bool> keep_person(wave.persons.size(), true);
    for (std::size_t i = 0; i < wave.persons.size(); ++i) {
        std::string reason = reasons[i];
        bool drop = person_missing[i];
        if (!drop && dropped_households.count(wave.persons.parent_ids[i])) {
            drop = true;
            reason = "household_dropped:" + wave.persons.parent_ids[i];
        }
        if (!drop && !policy.exempt_response) {
            if (std::isnan(wave.response[i])) {
                drop = true;
                reason = "missing:" + wave.response_name;
            } else if (!std::isfinite(wave.response[i])) {
                drop = true;
                reason = "nonfinite_response";
            } else if (wave.response[i] < 0.0) {
                drop = true;
                reason = "negative_response";
            }
        }
        if (drop) {
            keep_person[i] = false;
            log.drops.push_back({"person", wave.persons.ids[i], reason});
        }
    }

    // Apply drops.
    std::vector<double> kept_response;
    kept_response.reserve(wave.persons.size());
    for (std::size_t i = 0; i < wave.persons.size(); ++i)
        if (keep_person[i]) kept_response.push_back(wave.response[i]);
    wave.persons.keep_rows(keep_person);
    wave.response = std::move(kept_response);

    std::vector<bool> keep_hh(wave.households.size(), true);
    for (std::size_t i = 0; i < wave.households.size(); ++i)
        if (dropped_households.count(wave.households.ids[i])) keep_hh[i] = false;
    wave.households.keep_rows(keep_hh);

    std::vector<bool> keep_zone(wave.zones.size(), true);
    for (std::size_t i = 0; i < wave.zones.size(); ++i)
        if (dropped_zones.count(wave.zones.ids[i])) keep_zone[i] = false;
    wave.zones.keep_rows(keep_zone);

    // Winsorize the response above the chosen percentile.
    if (policy.winsorize_percentile && !wave.response.empty() && !policy.exempt_response) {
        const double cap = percentile_nearest_rank(wave.response, *policy.winsorize_percentile);
        for (std::size_t i = 0; i < wave.response.size(); ++i) {
            if (wave.response[i] > cap) {
                log.winsorized.push_back({wave.persons.ids[i], wave.response[i], cap});
                wave.response[i] = cap;
            }
        }
    }

    return {std::move(wave), std::move(log)};
}

// ---------------------------------------------------------------------------
// Variance inflation factors. Column j is regressed on all other columns
// plus an intercept; vif_j = 1 / (1 - R^2_j). Exact collinearity is reported
// as +infinity, not an error.
// ---------------------------------------------------------------------------
struct VifRow {
    std::string variable;
    double vif = 1.0;
};

inline std::vector<VifRow> compute_vif(const Matrix& X, const std::vector<std::string>& names) {
    const std::size_t n = X.rows();
    const std::size_t p = X.cols();
    if (p < 2) throw std::invalid_argument("compute_vif: need >= 2 columns");
    if (n < p) throw std::invalid_argument("compute_vif: need rows >= columns");
    if (names.size() != p) throw std::invalid_argument("compute_vif: names/columns mismatch");

    Eigen::MatrixXd M(n, p);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) M(i, j) = X(i, j);

    std::vector<VifRow> out(p);
    for (std::size_t j = 0; j < p; ++j) {
        Eigen::MatrixXd design(n, p);  // intercept + other columns
        design.col(0).setOnes();
        std::size_t c = 1;
        for (std::size_t k = 0; k < p; ++k)
            if (k != j) design.col(c++) = M.col(k);

        const Eigen::VectorXd target = M.col(j);
        const double target_mean = target.mean();
        const double sst = (target.array() - target_mean).square().sum();

        out[j].variable = names[j];
        if (sst <= 0.0) {  // constant column: perfectly predicted by the intercept
            out[j].vif = std::numeric_limits<double>::infinity();
            continue;
        }
        const Eigen::VectorXd beta = design.colPivHouseholderQr().solve(target);
        const double sse = (target - design * beta).squaredNorm();
        const double r2 = 1.0 - sse / sst;
        if (r2 >= 1.0 - 1e-12) {
            out[j].vif = std::numeric_limits<double>::infinity();
        } else {
            out[j].vif = std::max(1.0, 1.0 / (1.0 - r2));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Design matrix for the inferential models.
// ---------------------------------------------------------------------------
enum class ColumnKind { intercept, linear, segment, indicator };

struct ColumnInfo {
    std::string name;      // display name, e.g. "Age [20-50]"
    std::string variable;  // source variable; "(Intercept)" for the intercept
    ColumnKind kind = ColumnKind::linear;
    int segment_index = -1;  // for segment columns
    double seg_lo = kMissing;
    double seg_hi = kMissing;     // NaN = open-ended
    std::string category;         // for indicator columns
};

struct TermSpec {
    std::string variable;
    bool piecewise = true;  // false forces a single linear column
};

struct DesignMatrix {
    std::vector<ColumnInfo> columns;
    Matrix X;
    std::vector<double> y;
    std::vector<int> hh_index;
    std::vector<int> zone_index;
    std::size_t n_households = 0;
    std::size_t n_zones = 0;
    std::vector<std::string> warnings;

    std::vector<std::string> column_names() const {
        std::vector<std::string> out;
        out.reserve(columns.size());
        for (const auto& c : columns) out.push_back(c.name);
        return out;
    }

    void check_nesting() const {
        std::vector<int> zone_of_hh(n_households, -1);
        for (std::size_t i = 0; i < hh_index.size(); ++i) {
            int& z = zone_of_hh[hh_index[i]];
            if (z < 0)
                z = zone_index[i];
            else if (z != zone_index[i])
                throw std::runtime_error("household group " + std::to_string(hh_index[i]) +
                                         " spans multiple zones");
        }
    }
};

namespace detail {

inline std::string segment_label(const std::string& variable, double lo, double hi,
                                 bool first, bool open_ended) {
    if (open_ended) return variable + " [>" + format_double(lo) + "]";
    if (first) return variable + " [" + format_double(std::max(0.0, lo)) + "-" +
                      format_double(hi) + "]";
    return variable + " [" + format_double(lo) + "-" + format_double(hi) + "]";
}

}  // namespace detail

inline DesignMatrix build_design(const HierarchicalWave& wave, const std::vector<TermSpec>& terms,
                                 const interpret::KnotSet& knots, bool include_intercept = true) {
    const std::size_t n = wave.persons.size();
    DesignMatrix design;
    design.y = wave.response;

    // Group indices by first appearance in person-row order.
    design.hh_index.resize(n);
    design.zone_index.resize(n);
    std::unordered_map<std::string, int> hh_ids, zone_ids;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string& hh = wave.persons.parent_ids[i];
        auto [hit, hnew] = hh_ids.emplace(hh, static_cast<int>(hh_ids.size()));
        design.hh_index[i] = hit->second;
        const std::string& zone = wave.households.parent_ids[wave.households.index_of(hh)];
        auto [zit, znew] = zone_ids.emplace(zone, static_cast<int>(zone_ids.size()));
        design.zone_index[i] = zit->second;
        (void)hnew;
        (void)znew;
    }
    design.n_households = hh_ids.size();
    design.n_zones = zone_ids.size();

    struct PendingColumn {
        ColumnInfo info;
        std::vector<double> values;
    };
    std::vector<PendingColumn> pending;

    if (include_intercept) {
        PendingColumn c;
        c.info = {"(Intercept)", "(Intercept)", ColumnKind::intercept, -1, kMissing, kMissing, ""};
        c.values.assign(n, 1.0);
        pending.push_back(std::move(c));
    }

    for (const auto& term : terms) {
        const VariableSpec& spec = wave.schema.require(term.variable);
        if (spec.kind == VariableKind::numeric) {
            const std::vector<double> x = wave.joined_numeric(term.variable);
            std::vector<double> var_knots =
                term.piecewise ? knots.knots_for(term.variable) : std::vector<double>{};

            if (!var_knots.empty() && n > 0) {
                const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
                for (double k : var_knots)
                    if (k <= *mn || k >= *mx)
                        design.warnings.push_back("knot " + format_double(k) + " for '" +
                                                  term.variable +
                                                  "' lies outside the observed range [" +
                                                  format_double(*mn) + ", " + format_double(*mx) +
                                                  "]");
            }

            const std::size_t n_cols = var_knots.size() + 1;
            std::vector<PendingColumn> cols(n_cols);
            for (std::size_t j = 0; j < n_cols; ++j) {
                ColumnInfo& info = cols[j].info;
                info.variable = term.variable;
                cols[j].values.resize(n);
                if (var_knots.empty()) {
                    info.name = term.variable;
                    info.kind = ColumnKind::linear;
                } else {
                    info.kind = ColumnKind::segment;
                    info.segment_index = static_cast<int>(j);
                    if (j == 0) {
                        info.seg_lo = 0.0;
                        info.seg_hi = var_knots[0];
                        info.name = detail::segment_label(term.variable, 0.0, var_knots[0], true,
                                                          false);
                    } else if (j < var_knots.size()) {
                        info.seg_lo = var_knots[j - 1];
                        info.seg_hi = var_knots[j];
                        info.name = detail::segment_label(term.variable, var_knots[j - 1],
                                                          var_knots[j], false, false);
                    } else {
                        info.seg_lo = var_knots.back();
                        info.seg_hi = kMissing;
                        info.name = detail::segment_label(term.variable, var_knots.back(), 0.0,
                                                          false, true);
                    }
                }
            }
            for (std::size_t i = 0; i < n; ++i) {
                const auto basis = interpret::spline_basis(x[i], var_knots);
                for (std::size_t j = 0; j < n_cols; ++j) cols[j].values[i] = basis[j];
            }
            for (auto& c : cols) pending.push_back(std::move(c));
        } else {
            const std::vector<std::string> x = wave.joined_categorical(term.variable);
            for (const auto& category : spec.categories) {
                if (category == spec.reference) continue;
                PendingColumn c;
                c.info.name = term.variable + " [" + category + "]";
                c.info.variable = term.variable;
                c.info.kind = ColumnKind::indicator;
                c.info.category = category;
                c.values.resize(n);
                for (std::size_t i = 0; i < n; ++i) c.values[i] = x[i] == category ? 1.0 : 0.0;
                pending.push_back(std::move(c));
            }
        }
    }

    // A constant non-intercept column carries no information and would make
    // the fixed-effects matrix singular; drop it with a warning.
    std::vector<PendingColumn> kept;
    for (auto& c : pending) {
        if (c.info.kind != ColumnKind::intercept && n > 0) {
            const double first = c.values.front();
            const bool constant =
                std::all_of(c.values.begin(), c.values.end(), [&](double v) { return v == first; });
            if (constant) {
                design.warnings.push_back("dropping constant column '" + c.info.name + "'");
                continue;
            }
        }
        kept.push_back(std::move(c));
    }

    design.X = Matrix(n, kept.size());
    design.columns.reserve(kept.size());
    for (std::size_t j = 0; j < kept.size(); ++j) {
        design.columns.push_back(kept[j].info);
        for (std::size_t i = 0; i < n; ++i) design.X(i, j) = kept[j].values[i];
    }
    design.check_nesting();
    return design;
}

// ---------------------------------------------------------------------------
// Raw feature matrix for the tree ensembles: numeric variables as-is,
// categorical variables one-hot over all categories.
// ---------------------------------------------------------------------------
struct FeatureMatrix {
    Matrix X;
    std::vector<double> y;
    std::vector<std::string> names;        // per column
    std::vector<std::string> variable_of;  // source variable per column
};

inline FeatureMatrix build_feature_matrix(const HierarchicalWave& wave) {
    const std::size_t n = wave.persons.size();
    FeatureMatrix fm;
    fm.y = wave.response;

    struct Column {
        std::string name, variable;
        std::vector<double> values;
    };
    std::vector<Column> cols;
    for (const auto& var : wave.schema.variables()) {
        if (var.kind == VariableKind::numeric) {
            cols.push_back({var.name, var.name, wave.joined_numeric(var.name)});
        } else {
            const auto x = wave.joined_categorical(var.name);
            for (const auto& category : var.categories) {
                Column c{var.name + "=" + category, var.name, std::vector<double>(n)};
                for (std::size_t i = 0; i < n; ++i) c.values[i] = x[i] == category ? 1.0 : 0.0;
                cols.push_back(std::move(c));
            }
        }
    }

    fm.X = Matrix(n, cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j) {
        fm.names.push_back(cols[j].name);
        fm.variable_of.push_back(cols[j].variable);
        for (std::size_t i = 0; i < n; ++i) fm.X(i, j) = cols[j].values[i];
    }
    return fm;
}

}  // namespace thresher::dataset

#endif  // THRESHER_DATASET_HPP
