#ifndef THRESHER_PIPELINE_HPP
#define THRESHER_PIPELINE_HPP

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "thresher/config.hpp"
#include "thresher/core.hpp"
#include "thresher/csv.hpp"
#include "thresher/dataset.hpp"
#include "thresher/derive.hpp"
#include "thresher/ensemble.hpp"
#include "thresher/interpret.hpp"
#include "thresher/mlm.hpp"
#include "thresher/svg.hpp"
#include "thresher/synth.hpp"

namespace thresher::pipeline {

class StageError : public std::runtime_error {
public:
    StageError(const std::string& stage, const std::string& wave, const std::string& message)
        : std::runtime_error("stage '" + stage + "'" +
                             (wave.empty() ? "" : " (wave " + wave + ")") + ": " + message),
          stage_(stage), wave_(wave) {}

    const std::string& stage() const { return stage_; }
    const std::string& wave() const { return wave_; }

private:
    std::string stage_, wave_;
};

namespace detail {

template <typename Fn>
auto in_stage(const std::string& stage, const std::string& wave, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, wave, e.what());
    }
}

inline std::string sanitize(const std::string& name) {
    std::string out;
    for (char c : name) out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Derived-variable stage: VMT from trips, distances to facilities,
// diversity from zone counts.
// ---------------------------------------------------------------------------
namespace detail {

inline derive::RoadGraph load_road_graph(const WaveInput& wave) {
    derive::RoadGraph graph;
    const csv::Table nodes = csv::read_file(wave.road_nodes_csv);
    const std::size_t id_c = nodes.column_index("node_id");
    const std::size_t lat_c = nodes.column_index("lat");
    const std::size_t lon_c = nodes.column_index("lon");
    for (const auto& row : nodes.rows)
        graph.add_node(static_cast<std::int64_t>(parse_double(row[id_c])),
                       {parse_double(row[lat_c]), parse_double(row[lon_c])});
    const csv::Table edges = csv::read_file(wave.road_edges_csv);
    const std::size_t u_c = edges.column_index("node_u");
    const std::size_t v_c = edges.column_index("node_v");
    const std::size_t len_c = edges.column_index("length_miles");
    for (const auto& row : edges.rows)
        graph.add_edge(static_cast<std::int64_t>(parse_double(row[u_c])),
                       static_cast<std::int64_t>(parse_double(row[v_c])),
                       parse_double(row[len_c]));
    return graph;
}

inline std::vector<derive::Coordinate> load_facilities(const std::string& path) {
    const csv::Table t = csv::read_file(path);
    const std::size_t lat_c = t.column_index("lat");
    const std::size_t lon_c = t.column_index("lon");
    std::vector<derive::Coordinate> out;
    for (const auto& row : t.rows)
        out.push_back({parse_double(row[lat_c]), parse_double(row[lon_c])});
    if (out.empty()) throw std::runtime_error(path + ": no facilities");
    return out;
}

// Zone centroids from the polygon file (zone_id, vertex_order, lat, lon).
inline std::map<std::string, derive::Coordinate> zone_centroids(const std::string& path) {
    const csv::Table t = csv::read_file(path);
    const std::size_t zone_c = t.column_index("zone_id");
    const std::size_t order_c = t.column_index("vertex_order");
    const std::size_t lat_c = t.column_index("lat");
    const std::size_t lon_c = t.column_index("lon");

    std::map<std::string, std::vector<std::pair<double, derive::Coordinate>>> rings;
    for (const auto& row : t.rows)
        rings[row[zone_c]].push_back({parse_double(row[order_c]),
                                      {parse_double(row[lat_c]), parse_double(row[lon_c])}});
    std::map<std::string, derive::Coordinate> out;
    for (auto& [zone, ring] : rings) {
        std::sort(ring.begin(), ring.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<derive::Coordinate> coords;
        for (const auto& [order, c] : ring) coords.push_back(c);
        out[zone] = derive::polygon_centroid(coords);
    }
    return out;
}

inline derive::TripMode mode_from(const std::map<std::string, std::string>& mode_map,
                                  const std::string& raw) {
    auto it = mode_map.find(raw);
    if (it == mode_map.end())
        throw std::runtime_error("trip mode '" + raw + "' missing from mode_map");
    if (it->second == "personal_motorized") return derive::TripMode::personal_motorized;
    if (it->second == "other") return derive::TripMode::other;
    throw std::runtime_error("mode_map value for '" + raw +
                             "' must be personal_motorized or other");
}

}  // namespace detail

inline void derive_variables(dataset::HierarchicalWave& wave, const WaveInput& input) {
    std::optional<derive::RoadGraph> graph;
    if (!input.road_nodes_csv.empty() && !input.road_edges_csv.empty())
        graph = detail::load_road_graph(input);

    // Household (or zone) locations for facility distances.
    std::map<std::string, derive::Coordinate> centroids;
    if (!input.zone_polygons_csv.empty()) centroids = detail::zone_centroids(input.zone_polygons_csv);

    const auto location_of_household = [&](std::size_t hh_row) -> derive::Coordinate {
        const auto lat_it = wave.households.numeric.find("lat");
        const auto lon_it = wave.households.numeric.find("lon");
        if (lat_it != wave.households.numeric.end() && lon_it != wave.households.numeric.end() &&
            !std::isnan(lat_it->second[hh_row]) && !std::isnan(lon_it->second[hh_row]))
            return {lat_it->second[hh_row], lon_it->second[hh_row]};
        const std::string& zone = wave.households.parent_ids[hh_row];
        auto it = centroids.find(zone);
        if (it != centroids.end()) return it->second;
        const auto zlat = wave.zones.numeric.find("lat");
        const auto zlon = wave.zones.numeric.find("lon");
        if (zlat != wave.zones.numeric.end() && zlon != wave.zones.numeric.end()) {
            const std::size_t zi = wave.zones.index_of(zone);
            if (!std::isnan(zlat->second[zi]) && !std::isnan(zlon->second[zi]))
                return {zlat->second[zi], zlon->second[zi]};
        }
        throw std::runtime_error("no location for household '" + wave.households.ids[hh_row] +
                                 "': need household lat/lon, zone lat/lon, or zone polygons");
    };

    const auto location_of_zone = [&](std::size_t zone_row) -> derive::Coordinate {
        auto it = centroids.find(wave.zones.ids[zone_row]);
        if (it != centroids.end()) return it->second;
        const auto zlat = wave.zones.numeric.find("lat");
        const auto zlon = wave.zones.numeric.find("lon");
        if (zlat != wave.zones.numeric.end() && zlon != wave.zones.numeric.end() &&
            !std::isnan(zlat->second[zone_row]) && !std::isnan(zlon->second[zone_row]))
            return {zlat->second[zone_row], zlon->second[zone_row]};
        throw std::runtime_error("no location for zone '" + wave.zones.ids[zone_row] + "'");
    };

    // Per-person VMT from the trip table.
    if (!input.trips_csv.empty()) {
        const csv::Table trips = csv::read_file(input.trips_csv);
        const std::size_t person_c = trips.column_index("person_id");
        const std::size_t mode_c = trips.column_index("mode");
        const std::size_t olat_c = trips.column_index("o_lat");
        const std::size_t olon_c = trips.column_index("o_lon");
        const std::size_t dlat_c = trips.column_index("d_lat");
        const std::size_t dlon_c = trips.column_index("d_lon");
        const bool has_distance = trips.has_column("distance_miles");
        const std::size_t dist_c = has_distance ? trips.column_index("distance_miles") : 0;

        std::map<std::string, std::vector<derive::TripRecord>> by_person;
        for (const auto& row : trips.rows) {
            derive::TripRecord trip;
            trip.person_id = row[person_c];
            if (!wave.persons.has_id(trip.person_id))
                throw std::runtime_error("trip references unknown person '" + trip.person_id + "'");
            trip.mode = detail::mode_from(input.mode_map, row[mode_c]);
            trip.origin = {parse_double(row[olat_c]), parse_double(row[olon_c])};
            trip.destination = {parse_double(row[dlat_c]), parse_double(row[dlon_c])};
            if (has_distance && !row[dist_c].empty()) {
                trip.distance_miles = parse_double(row[dist_c]);
            } else if (trip.mode == derive::TripMode::personal_motorized) {
                trip.distance_miles = graph ? derive::route_miles(*graph, trip.origin,
                                                                  trip.destination)
                                            : derive::haversine_miles(trip.origin,
                                                                      trip.destination);
            }
            by_person[trip.person_id].push_back(std::move(trip));
        }
        for (std::size_t i = 0; i < wave.persons.size(); ++i) {
            auto it = by_person.find(wave.persons.ids[i]);
            wave.response[i] =
                it == by_person.end() ? 0.0 : derive::person_daily_vmt(it->second);
        }
    }

    // Nearest-facility distances.
    for (const auto& f : input.facility_distances) {
        const dataset::VariableSpec& spec = wave.schema.require(f.variable);
        const auto facilities = detail::load_facilities(f.facilities_csv);
        const derive::Metric metric =
            f.use_route && graph ? derive::Metric::route(*graph) : derive::Metric::haversine();
        if (f.use_route && !graph)
            throw std::runtime_error("facility distance for '" + f.variable +
                                     "' wants route metric but the wave has no road graph");
        if (spec.level == dataset::VariableLevel::household) {
            auto& col = wave.households.numeric[f.variable];
            col.resize(wave.households.size());
            for (std::size_t h = 0; h < wave.households.size(); ++h)
                col[h] = derive::nearest_distance(location_of_household(h), facilities, metric);
        } else if (spec.level == dataset::VariableLevel::zone) {
            auto& col = wave.zones.numeric[f.variable];
            col.resize(wave.zones.size());
            for (std::size_t z = 0; z < wave.zones.size(); ++z)
                col[z] = derive::nearest_distance(location_of_zone(z), facilities, metric);
        } else {
            throw std::runtime_error("facility distance variable '" + f.variable +
                                     "' must live at household or zone level");
        }
    }

    // Diversity entropy from zone counts.
    if (!input.diversity_variable.empty()) {
        const dataset::VariableSpec& spec = wave.schema.require(input.diversity_variable);
        if (spec.level != dataset::VariableLevel::zone)
            throw std::runtime_error("diversity variable must be zone-level");
        static const char* count_cols[4] = {"households", "emp_basic", "emp_retail", "emp_service"};
        for (const char* c : count_cols)
            if (!wave.zones.numeric.count(c))
                throw std::runtime_error("diversity needs zone column '" + std::string(c) + "'");
        auto& col = wave.zones.numeric[input.diversity_variable];
        col.resize(wave.zones.size());
        for (std::size_t z = 0; z < wave.zones.size(); ++z) {
            try {
                col[z] = derive::entropy_diversity(wave.zones.numeric.at("households")[z],
                                                   wave.zones.numeric.at("emp_basic")[z],
                                                   wave.zones.numeric.at("emp_retail")[z],
                                                   wave.zones.numeric.at("emp_service")[z]);
            } catch (const std::exception& e) {
                throw std::runtime_error("zone '" + wave.zones.ids[z] + "': " + e.what());
            }
        }
    }
}

// ---------------------------------------------------------------------------
// prepare_wave: load -> clean -> derive -> final clean, per the paper's
// preprocessing order. Derive-supplied variables are exempt from the first
// cleaning pass because they do not exist yet.
// ---------------------------------------------------------------------------
struct PreparedWave {
    dataset::HierarchicalWave wave;
    dataset::CleanLog clean_log;
};

inline PreparedWave prepare_wave(const RunConfig& config, std::size_t wave_index) {
    const WaveInput& input = config.waves[wave_index];
    const bool derive_vmt = !input.trips_csv.empty();

    std::set<std::string> derived;
    for (const auto& f : input.facility_distances) derived.insert(f.variable);
    if (!input.diversity_variable.empty()) derived.insert(input.diversity_variable);

    PreparedWave out;
    detail::in_stage("load", input.label, [&] {
        dataset::LoadOptions options;
        options.response_name = config.response;
        options.require_response = !derive_vmt;
        options.zone_extra_columns = {"households", "emp_basic", "emp_retail", "emp_service",
                                      "lat", "lon"};
        options.derived_variables = derived;
        out.wave = dataset::load_wave(input.persons_csv, input.households_csv, input.zones_csv,
                                      config.dataset_schema(), options, input.label);
        return 0;
    });

    // Household coordinates, when present, ride along for facility distances.
    detail::in_stage("load", input.label, [&] {
        const csv::Table hh = csv::read_file(input.households_csv);
        for (const char* coord : {"lat", "lon"}) {
            if (!hh.has_column(coord) || out.wave.households.numeric.count(coord)) continue;
            const std::size_t c = hh.column_index(coord);
            std::vector<double> col(hh.rows.size());
            for (std::size_t i = 0; i < hh.rows.size(); ++i)
                col[i] = hh.rows[i][c].empty() ? dataset::kMissing : parse_double(hh.rows[i][c]);
            out.wave.households.numeric[coord] = std::move(col);
        }
        return 0;
    });

    const bool has_derive_work = derive_vmt || !derived.empty();

    detail::in_stage("clean", input.label, [&] {
        dataset::CleanPolicy policy;
        policy.exempt_variables = derived;
        policy.exempt_response = derive_vmt;
        if (!has_derive_work) policy.winsorize_percentile = config.clean.winsorize_percentile;
        auto [cleaned, log] = dataset::clean(out.wave, policy);
        out.wave = std::move(cleaned);
        out.clean_log = std::move(log);
        return 0;
    });

    if (has_derive_work) {
        detail::in_stage("derive", input.label, [&] {
            derive_variables(out.wave, input);
            return 0;
        });
        detail::in_stage("clean", input.label, [&] {
            dataset::CleanPolicy policy;
            policy.winsorize_percentile = config.clean.winsorize_percentile;
            auto [cleaned, log] = dataset::clean(out.wave, policy);
            out.wave = std::move(cleaned);
            for (const auto& d : log.drops) out.clean_log.drops.push_back(d);
            for (const auto& w : log.winsorized) out.clean_log.winsorized.push_back(w);
            return 0;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// ML stage: VIF screen, train/test split, grid search per algorithm, test
// metrics, importance, persisted models.
// ---------------------------------------------------------------------------
struct MlWaveResult {
    std::string label;
    std::vector<dataset::VifRow> vif;
    ensemble::TrainTestSplit split;
    std::map<std::string, ensemble::EnsembleModel> models;           // per algorithm
    std::map<std::string, ensemble::Metrics> metrics;                // per algorithm
    std::map<std::string, std::vector<ensemble::CvEntry>> cv_tables; // per algorithm
    std::map<std::string, std::size_t> best_candidate;               // per algorithm
    std::vector<std::pair<std::string, double>> variable_importance; // per variable
    std::map<std::string, double> group_importance;
};

namespace detail {

inline std::string gbdt_candidate_label(const ensemble::GbdtParams& p) {
    return "n_estimators=" + std::to_string(p.n_estimators) +
           " learning_rate=" + format_double(p.learning_rate) +
           " max_depth=" + std::to_string(p.max_depth) +
           " max_features=" + ensemble::to_string(p.max_features) +
           " subsample=" + format_double(p.subsample) +
           " min_samples_leaf=" + std::to_string(p.min_samples_leaf);
}

inline std::string rf_candidate_label(const ensemble::RfParams& p) {
    return "n_trees=" + std::to_string(p.n_trees) + " max_depth=" + std::to_string(p.max_depth) +
           " max_features=" + ensemble::to_string(p.max_features) +
           " min_samples_leaf=" + std::to_string(p.min_samples_leaf);
}

inline void write_cv_table(const std::string& path, const std::vector<ensemble::CvEntry>& table,
                           const std::vector<std::string>& labels, std::size_t best) {
    csv::Writer w(path);
    std::vector<std::string> header{"candidate", "params", "mean_mse", "selected"};
    if (!table.empty())
        for (std::size_t f = 0; f < table.front().fold_mse.size(); ++f)
            header.push_back("fold" + std::to_string(f + 1) + "_mse");
    w.row(header);
    for (std::size_t c = 0; c < table.size(); ++c) {
        std::vector<std::string> row{std::to_string(c), labels[c],
                                     format_double(table[c].mean_mse), c == best ? "1" : "0"};
        for (double v : table[c].fold_mse) row.push_back(format_double(v));
        w.row(row);
    }
}

}  // namespace detail

inline MlWaveResult run_ml_wave(const RunConfig& config, const dataset::HierarchicalWave& wave,
                                std::size_t wave_index, const std::string& out_dir) {
    const std::string& label = config.waves[wave_index].label;
    MlWaveResult result;
    result.label = label;

    // VIF screen on the linear design (dummies + linear numerics, no knots).
    detail::in_stage("vif", label, [&] {
        std::vector<dataset::TermSpec> terms;
        for (const auto& e : config.schema) terms.push_back({e.spec.name, false});
        const auto design = dataset::build_design(wave, terms, {}, true);
        Matrix X(design.X.rows(), design.X.cols() - 1);
        std::vector<std::string> names;
        for (std::size_t j = 1; j < design.X.cols(); ++j) {
            names.push_back(design.columns[j].name);
            for (std::size_t i = 0; i < design.X.rows(); ++i) X(i, j - 1) = design.X(i, j);
        }
        result.vif = dataset::compute_vif(X, names);
        csv::Writer w(out_dir + "/vif_" + detail::sanitize(label) + ".csv");
        w.row({"term", "vif", "exceeds_threshold"});
        for (const auto& row : result.vif)
            w.row({row.variable, format_double(row.vif),
                   row.vif > dataset::kVifAdvisoryThreshold ? "1" : "0"});
        return 0;
    });

    const dataset::FeatureMatrix fm = dataset::build_feature_matrix(wave);
    const std::uint64_t wave_seed = Rng(config.ml.seed).fork(wave_index).seed();
    result.split = ensemble::split_train_test(fm.X.rows(), config.ml.test_fraction, wave_seed);

    Matrix x_train = fm.X.select_rows(result.split.train);
    std::vector<double> y_train;
    for (std::size_t i : result.split.train) y_train.push_back(fm.y[i]);
    Matrix x_test = fm.X.select_rows(result.split.test);
    std::vector<double> y_test;
    for (std::size_t i : result.split.test) y_test.push_back(fm.y[i]);

    for (const auto& algorithm : config.ml.algorithms) {
        detail::in_stage("ml:" + algorithm, label, [&] {
            if (algorithm == "gbdt") {
                auto grid = config.ml.gbdt_grid;
                for (auto& p : grid) p.seed = wave_seed;
                auto search = ensemble::grid_search_cv(x_train, y_train, grid, config.ml.k_folds,
                                                       wave_seed, config.jobs);
                auto model = ensemble::fit_gbdt(x_train, y_train, search.best, fm.names);
                result.metrics[algorithm] =
                    ensemble::test_metrics(y_test, ensemble::predict(model, x_test));
                result.cv_tables[algorithm] = search.table;
                result.best_candidate[algorithm] = search.best_index;
                std::vector<std::string> labels;
                for (const auto& p : grid) labels.push_back(detail::gbdt_candidate_label(p));
                detail::write_cv_table(out_dir + "/cv_table_gbdt_" + detail::sanitize(label) +
                                           ".csv",
                                       search.table, labels, search.best_index);
                ensemble::save_model(model, out_dir + "/model_gbdt_" + detail::sanitize(label) +
                                                ".json");
                result.models[algorithm] = std::move(model);
            } else {
                auto grid = config.ml.rf_grid;
                for (auto& p : grid) {
                    p.seed = wave_seed;
                    p.jobs = config.jobs;
                }
                auto search = ensemble::grid_search_cv(x_train, y_train, grid, config.ml.k_folds,
                                                       wave_seed, 1);
                auto model = ensemble::fit_rf(x_train, y_train, search.best, fm.names);
                result.metrics[algorithm] =
                    ensemble::test_metrics(y_test, ensemble::predict(model, x_test));
                result.cv_tables[algorithm] = search.table;
                result.best_candidate[algorithm] = search.best_index;
                std::vector<std::string> labels;
                for (const auto& p : grid) labels.push_back(detail::rf_candidate_label(p));
                detail::write_cv_table(out_dir + "/cv_table_rf_" + detail::sanitize(label) +
                                           ".csv",
                                       search.table, labels, search.best_index);
                ensemble::save_model(model, out_dir + "/model_rf_" + detail::sanitize(label) +
                                                ".json");
                result.models[algorithm] = std::move(model);
            }
            return 0;
        });
    }

    // Importance from the configured source model, aggregated per variable
    // and per group.
    detail::in_stage("importance", label, [&] {
        auto it = result.models.find(config.ml.importance_from);
        if (it == result.models.end()) it = result.models.begin();
        if (it == result.models.end()) return 0;
        const auto shares = ensemble::impurity_importance(it->second);

        std::map<std::string, double> by_variable;
        for (std::size_t j = 0; j < shares.size(); ++j) by_variable[fm.variable_of[j]] += shares[j];
        // Keep schema order in the report.
        for (const auto& e : config.schema) {
            auto vit = by_variable.find(e.spec.name);
            if (vit != by_variable.end())
                result.variable_importance.push_back({e.spec.name, vit->second});
        }
        result.group_importance =
            interpret::group_importance(result.variable_importance, config.variable_groups());

        csv::Writer w(out_dir + "/importance_" + detail::sanitize(label) + ".csv");
        w.row({"variable", "share"});
        for (const auto& [variable, share] : result.variable_importance)
            w.row({variable, format_double(share)});
        csv::Writer gw(out_dir + "/importance_groups_" + detail::sanitize(label) + ".csv");
        gw.row({"group", "share"});
        for (const auto& [group, share] : result.group_importance)
            gw.row({group, format_double(share)});
        return 0;
    });

    return result;
}

// ---------------------------------------------------------------------------
// PDP stage.
// ---------------------------------------------------------------------------
inline std::vector<std::string> pdp_variable_list(const RunConfig& config) {
    if (!config.interpret_cfg.pdp_variables.empty()) return config.interpret_cfg.pdp_variables;
    std::vector<std::string> out;
    for (const auto& e : config.schema)
        if (e.spec.kind == dataset::VariableKind::numeric) out.push_back(e.spec.name);
    return out;
}

inline std::vector<interpret::PdpCurve> compute_wave_pdps(const RunConfig& config,
                                                          const dataset::HierarchicalWave& wave,
                                                          const ensemble::EnsembleModel& model,
                                                          const ensemble::TrainTestSplit& split) {
    const dataset::FeatureMatrix fm = dataset::build_feature_matrix(wave);

    // Background rows: the training rows, thinned with a deterministic stride.
    std::vector<std::size_t> rows = split.train;
    const std::size_t cap = config.interpret_cfg.pdp_max_background_rows;
    if (cap > 0 && rows.size() > cap) {
        std::vector<std::size_t> thinned;
        const double stride = static_cast<double>(rows.size()) / static_cast<double>(cap);
        for (std::size_t i = 0; i < cap; ++i)
            thinned.push_back(rows[static_cast<std::size_t>(static_cast<double>(i) * stride)]);
        rows = std::move(thinned);
    }
    const Matrix background = fm.X.select_rows(rows);

    interpret::GridSpec grid_spec;
    grid_spec.n_points = config.interpret_cfg.grid_points;
    grid_spec.quantile_lo = config.interpret_cfg.quantile_lo;
    grid_spec.quantile_hi = config.interpret_cfg.quantile_hi;

    std::vector<interpret::PdpCurve> curves;
    for (const auto& variable : pdp_variable_list(config)) {
        const auto it = std::find(fm.names.begin(), fm.names.end(), variable);
        if (it == fm.names.end())
            throw std::runtime_error("pdp variable '" + variable + "' is not a numeric feature");
        const std::size_t feature = static_cast<std::size_t>(it - fm.names.begin());
        curves.push_back(interpret::compute_pdp(model, background, feature, grid_spec, variable,
                                                wave.label, config.jobs));
    }
    return curves;
}

inline void write_pdp_csv(const std::string& path, const std::vector<interpret::PdpCurve>& curves) {
    csv::Writer w(path);
    w.row({"feature", "wave", "grid", "avg_pred"});
    for (const auto& c : curves)
        for (std::size_t i = 0; i < c.grid.size(); ++i)
            w.row({c.feature, c.wave, format_double(c.grid[i]), format_double(c.avg_pred[i])});
}

inline std::vector<interpret::PdpCurve> read_pdp_csv(const std::string& path) {
    const csv::Table t = csv::read_file(path);
    const std::size_t f_c = t.column_index("feature");
    const std::size_t w_c = t.column_index("wave");
    const std::size_t g_c = t.column_index("grid");
    const std::size_t a_c = t.column_index("avg_pred");
    std::vector<interpret::PdpCurve> curves;
    for (const auto& row : t.rows) {
        if (curves.empty() || curves.back().feature != row[f_c] || curves.back().wave != row[w_c]) {
            interpret::PdpCurve c;
            c.feature = row[f_c];
            c.wave = row[w_c];
            curves.push_back(c);
        }
        curves.back().grid.push_back(parse_double(row[g_c]));
        curves.back().avg_pred.push_back(parse_double(row[a_c]));
    }
    for (const auto& c : curves) c.validate();
    return curves;
}

// ---------------------------------------------------------------------------
// Knot stage: detection per curve, consolidation across waves, manual
// overrides.
// ---------------------------------------------------------------------------
struct KnotResults {
    std::map<std::string, std::map<std::string, std::vector<interpret::KnotCandidate>>>
        candidates;  // variable -> wave -> candidates
    interpret::KnotSet consolidated;
};

inline KnotResults detect_and_consolidate(
    const RunConfig& config, const std::vector<std::vector<interpret::PdpCurve>>& curves_per_wave,
    const std::vector<dataset::HierarchicalWave>& waves) {
    KnotResults out;

    for (const auto& curves : curves_per_wave)
        for (const auto& curve : curves) {
            auto cands = interpret::detect_knots(curve, config.interpret_cfg.max_knots,
                                                 config.interpret_cfg.penalty_override);
            out.candidates[curve.feature][curve.wave] = std::move(cands);
        }

    for (auto& [variable, per_wave] : out.candidates) {
        // Pooled observed range across waves.
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& wave : waves) {
            if (!wave.schema.has(variable)) continue;
            for (double v : wave.joined_numeric(variable)) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
        const double pooled_range = hi > lo ? hi - lo : 0.0;
        const auto merged = interpret::consolidate_knots(per_wave, pooled_range,
                                                         config.interpret_cfg.rel_tol,
                                                         config.interpret_cfg.rounding);
        std::vector<double> knots;
        for (const auto& c : merged)
            if (c.value > lo && c.value < hi) knots.push_back(c.value);
        if (!knots.empty()) out.consolidated.set(variable, knots);
    }

    // Manual overrides replace detected knots.
    for (const auto& [variable, knots] : config.interpret_cfg.manual_knots)
        out.consolidated.set(variable, knots);
    return out;
}

inline void write_knots_csv(const std::string& out_dir, const KnotResults& knots) {
    csv::Writer cw(out_dir + "/knot_candidates.csv");
    cw.row({"variable", "wave", "value", "score"});
    for (const auto& [variable, per_wave] : knots.candidates)
        for (const auto& [wave, cands] : per_wave)
            for (const auto& c : cands)
                cw.row({variable, wave, format_double(c.value), format_double(c.score)});

    csv::Writer w(out_dir + "/knots.csv");
    w.row({"variable", "knot"});
    for (const auto& [variable, values] : knots.consolidated.all())
        for (double v : values) w.row({variable, format_double(v)});
}

inline interpret::KnotSet read_knots_csv(const std::string& path) {
    const csv::Table t = csv::read_file(path);
    const std::size_t v_c = t.column_index("variable");
    const std::size_t k_c = t.column_index("knot");
    std::map<std::string, std::vector<double>> by_var;
    for (const auto& row : t.rows) by_var[row[v_c]].push_back(parse_double(row[k_c]));
    interpret::KnotSet out;
    for (auto& [variable, knots] : by_var) {
        std::sort(knots.begin(), knots.end());
        out.set(variable, knots);
    }
    return out;
}

// ---------------------------------------------------------------------------
// MLM stage outputs.
// ---------------------------------------------------------------------------
inline void write_coefficients_csv(const std::string& path, const mlm::StepModel& model,
                                   const dataset::DesignMatrix& design) {
    csv::Writer w(path);
    w.row({"section", "term", "variable", "kind", "estimate", "se", "z", "p", "stars"});
    for (std::size_t j = 0; j < model.fit.columns.size(); ++j) {
        const auto& col = model.fit.columns[j];
        const char* kind = col.kind == dataset::ColumnKind::intercept ? "intercept"
                           : col.kind == dataset::ColumnKind::linear  ? "linear"
                           : col.kind == dataset::ColumnKind::segment ? "segment"
                                                                      : "indicator";
        w.row({"fixed", col.name, col.variable, kind, format_double(model.fit.beta[j]),
               format_double(model.fit.se[j]), format_double(model.wald_rows[j].z),
               format_double(model.wald_rows[j].p), model.wald_rows[j].stars});
    }
    w.row({"random", "Individual (Residual)", "", "sd",
           format_double(model.fit.varcomps.sd_resid), "", "", "", ""});
    w.row({"random", "Household (Level 2)", "", "sd", format_double(model.fit.varcomps.sd_hh), "",
           "", "", ""});
    w.row({"random", "Zone (Level 3)", "", "sd", format_double(model.fit.varcomps.sd_zone), "",
           "", "", ""});
    w.row({"size", "Observation", "", "count", std::to_string(model.fit.n_obs), "", "", "", ""});
    w.row({"size", "Household", "", "count", std::to_string(design.n_households), "", "", "", ""});
    w.row({"size", "Zone", "", "count", std::to_string(design.n_zones), "", "", "", ""});
}

inline void write_fitstats_csv(const std::string& path, const mlm::StepwiseResult& result) {
    csv::Writer w(path);
    std::vector<std::string> header{"criteria"};
    for (const auto& m : result.models) header.push_back(m.name);
    w.row(header);
    const auto row_of = [&](const std::string& name, auto getter) {
        std::vector<std::string> row{name};
        for (const auto& m : result.models) row.push_back(format_double(getter(m)));
        w.row(row);
    };
    row_of("AIC", [](const mlm::StepModel& m) { return m.stats.aic; });
    row_of("BIC", [](const mlm::StepModel& m) { return m.stats.bic; });
    row_of("logLik", [](const mlm::StepModel& m) { return m.fit.loglik; });
    row_of("Marginal R2", [](const mlm::StepModel& m) { return m.stats.r2_marginal; });
    row_of("Conditional R2", [](const mlm::StepModel& m) { return m.stats.r2_conditional; });
    row_of("Individual (Residual)", [](const mlm::StepModel& m) { return m.fit.varcomps.sd_resid; });
    row_of("Household (Level 2)", [](const mlm::StepModel& m) { return m.fit.varcomps.sd_hh; });
    row_of("Zone (Level 3)", [](const mlm::StepModel& m) { return m.fit.varcomps.sd_zone; });
}

inline void write_elasticity_csv(const std::string& path,
                                 const std::vector<mlm::ElasticityRow>& rows) {
    csv::Writer w(path);
    w.row({"segment", "variable", "beta", "mean_x", "mean_y", "elasticity", "stars"});
    for (const auto& r : rows)
        w.row({r.label, r.variable, format_double(r.beta), format_double(r.mean_x),
               format_double(r.mean_y), format_double(r.elasticity), r.stars});
}

inline void write_trace_csv(const std::string& path, const mlm::StepwiseResult& result) {
    csv::Writer w(path);
    w.row({"model", "dropped_variable", "p"});
    for (const auto& d : result.trace)
        w.row({std::to_string(d.model), d.variable, format_double(d.p)});
}

// ---------------------------------------------------------------------------
// Standalone stage entry points. Each one rebuilds the cleaned waves from the
// config (cheap and deterministic) and reads earlier stages' artifacts from
// the output directory.
// ---------------------------------------------------------------------------
inline std::vector<PreparedWave> prepare_all(const RunConfig& config, const std::string& out_dir,
                                             bool write_logs) {
    std::filesystem::create_directories(out_dir);
    std::vector<PreparedWave> out;
    for (std::size_t w = 0; w < config.waves.size(); ++w) {
        PreparedWave prepared = prepare_wave(config, w);
        if (write_logs)
            prepared.clean_log.write_csv(out_dir + "/clean_log_" +
                                         detail::sanitize(config.waves[w].label) + ".csv");
        out.push_back(std::move(prepared));
    }
    return out;
}

inline void run_ml(const RunConfig& config, const std::string& out_dir) {
    const auto prepared = prepare_all(config, out_dir, true);
    std::vector<MlWaveResult> results;
    for (std::size_t w = 0; w < config.waves.size(); ++w)
        results.push_back(run_ml_wave(config, prepared[w].wave, w, out_dir));
    csv::Writer mw(out_dir + "/metrics.csv");
    mw.row({"wave", "algorithm", "rmse", "r2", "best_candidate"});
    for (const auto& ml : results)
        for (const auto& algorithm : config.ml.algorithms) {
            const auto& m = ml.metrics.at(algorithm);
            mw.row({ml.label, algorithm, format_double(m.rmse), format_double(m.r2),
                    std::to_string(ml.best_candidate.at(algorithm))});
        }
}

inline void run_pdp(const RunConfig& config, const std::string& out_dir) {
    const auto prepared = prepare_all(config, out_dir, false);
    for (std::size_t w = 0; w < config.waves.size(); ++w) {
        const std::string& label = config.waves[w].label;
        detail::in_stage("pdp", label, [&] {
            std::string algorithm = config.ml.importance_from;
            std::string path = out_dir + "/model_" + algorithm + "_" + detail::sanitize(label) +
                               ".json";
            if (!std::filesystem::exists(path)) {
                for (const auto& a : config.ml.algorithms) {
                    const std::string candidate =
                        out_dir + "/model_" + a + "_" + detail::sanitize(label) + ".json";
                    if (std::filesystem::exists(candidate)) {
                        path = candidate;
                        break;
                    }
                }
            }
            if (!std::filesystem::exists(path))
                throw std::runtime_error("no persisted model for wave '" + label +
                                         "'; run the ml stage first");
            const auto model = ensemble::load_model(path);
            const std::uint64_t wave_seed = Rng(config.ml.seed).fork(w).seed();
            const auto split = ensemble::split_train_test(prepared[w].wave.persons.size(),
                                                          config.ml.test_fraction, wave_seed);
            const auto curves = compute_wave_pdps(config, prepared[w].wave, model, split);
            write_pdp_csv(out_dir + "/pdp_" + detail::sanitize(label) + ".csv", curves);
            return 0;
        });
    }
}

inline void run_knots(const RunConfig& config, const std::string& out_dir) {
    const auto prepared = prepare_all(config, out_dir, false);
    detail::in_stage("knots", "", [&] {
        std::vector<std::vector<interpret::PdpCurve>> curves;
        std::vector<dataset::HierarchicalWave> waves;
        for (std::size_t w = 0; w < config.waves.size(); ++w) {
            const std::string path =
                out_dir + "/pdp_" + detail::sanitize(config.waves[w].label) + ".csv";
            if (!std::filesystem::exists(path))
                throw std::runtime_error("missing " + path + "; run the pdp stage first");
            curves.push_back(read_pdp_csv(path));
            waves.push_back(prepared[w].wave);
        }
        const auto knots = detect_and_consolidate(config, curves, waves);
        write_knots_csv(out_dir, knots);
        return 0;
    });
}

inline void run_mlm(const RunConfig& config, const std::string& out_dir) {
    const auto prepared = prepare_all(config, out_dir, false);
    interpret::KnotSet knots;
    const std::string knots_path = out_dir + "/knots.csv";
    if (std::filesystem::exists(knots_path)) {
        knots = read_knots_csv(knots_path);
    } else if (!config.interpret_cfg.manual_knots.empty()) {
        for (const auto& [variable, values] : config.interpret_cfg.manual_knots)
            knots.set(variable, values);
    } else {
        throw StageError("mlm", "", "missing " + knots_path + "; run the knots stage first");
    }

    for (std::size_t w = 0; w < config.waves.size(); ++w) {
        const std::string& label = config.waves[w].label;
        detail::in_stage("mlm", label, [&] {
            mlm::LmmSpec spec;
            spec.method = config.mlm_cfg.method;
            const auto result = mlm::stepwise_build(prepared[w].wave, knots,
                                                    config.built_environment_variables(),
                                                    config.mlm_cfg.alpha, spec);
            const std::string tag = detail::sanitize(label);
            write_coefficients_csv(out_dir + "/coefficients_" + tag + ".csv",
                                   result.models.back(), result.models.back().design);
            write_fitstats_csv(out_dir + "/fitstats_" + tag + ".csv", result);
            write_trace_csv(out_dir + "/stepwise_trace_" + tag + ".csv", result);
            const auto elasticity = mlm::elasticity_table(
                result.models.back().fit, prepared[w].wave,
                config.built_environment_variables());
            write_elasticity_csv(out_dir + "/elasticity_" + tag + ".csv", elasticity);
            return 0;
        });
    }
}

// Recompute the elasticity tables from the persisted coefficient files.
inline void run_elasticity(const RunConfig& config, const std::string& out_dir) {
    const auto prepared = prepare_all(config, out_dir, false);
    const auto be_vars = config.built_environment_variables();
    for (std::size_t w = 0; w < config.waves.size(); ++w) {
        const std::string& label = config.waves[w].label;
        detail::in_stage("elasticity", label, [&] {
            const std::string tag = detail::sanitize(label);
            const std::string path = out_dir + "/coefficients_" + tag + ".csv";
            if (!std::filesystem::exists(path))
                throw std::runtime_error("missing " + path + "; run the mlm stage first");
            const csv::Table t = csv::read_file(path);
            const std::size_t section_c = t.column_index("section");
            const std::size_t term_c = t.column_index("term");
            const std::size_t variable_c = t.column_index("variable");
            const std::size_t kind_c = t.column_index("kind");
            const std::size_t estimate_c = t.column_index("estimate");
            const std::size_t stars_c = t.column_index("stars");

            const double mean_y = mean(prepared[w].wave.response);
            std::vector<mlm::ElasticityRow> rows;
            for (const auto& row : t.rows) {
                if (row[section_c] != "fixed") continue;
                if (row[kind_c] != "linear" && row[kind_c] != "segment") continue;
                if (!be_vars.count(row[variable_c])) continue;
                mlm::ElasticityRow e;
                e.label = row[term_c];
                e.variable = row[variable_c];
                e.beta = parse_double(row[estimate_c]);
                e.mean_x = mean(prepared[w].wave.joined_numeric(e.variable));
                e.mean_y = mean_y;
                e.elasticity = mlm::elasticity_value(e.beta, e.mean_x, e.mean_y);
                e.stars = row[stars_c];
                rows.push_back(std::move(e));
            }
            write_elasticity_csv(out_dir + "/elasticity_" + tag + ".csv", rows);
            return 0;
        });
    }
}

// ---------------------------------------------------------------------------
// Synthetic-wave job: generate wave CSVs plus a ready-to-run config.
// ---------------------------------------------------------------------------
struct SynthJob {
    std::vector<synth::SynthConfig> waves;
    std::map<std::string, std::string> groups;  // variable -> reporting group
    nlohmann::json run_overrides;               // merged over the emitted run config
};

inline SynthJob parse_synth_job(const nlohmann::json& j) {
    SynthJob job;
    for (const auto& wj : j.at("waves")) {
        synth::SynthConfig config;
        config.label = wj.at("label").get<std::string>();
        config.seed = wj.value("seed", std::uint64_t{0});
        config.n_zones = wj.at("n_zones").get<std::size_t>();
        const auto range_of = [&](const char* key, std::pair<int, int> dflt) {
            if (!wj.contains(key)) return dflt;
            const auto& v = wj.at(key);
            if (v.is_number_integer()) return std::pair<int, int>{v.get<int>(), v.get<int>()};
            return std::pair<int, int>{v.at(0).get<int>(), v.at(1).get<int>()};
        };
        config.households_per_zone = range_of("households_per_zone", {3, 3});
        config.persons_per_household = range_of("persons_per_household", {2, 2});
        config.sd_zone = wj.value("sd_zone", 0.0);
        config.sd_hh = wj.value("sd_hh", 0.0);
        config.sd_resid = wj.value("sd_resid", 1.0);
        config.intercept = wj.value("intercept", 0.0);
        config.floor_response_at_zero = wj.value("floor_response_at_zero", false);
        config.covariate_correlation = wj.value("covariate_correlation", 0.0);
        config.response_name = wj.value("response", "VMT_Person");

        for (const auto& vj : wj.at("variables")) {
            synth::SynthVariable var;
            var.spec = detail::parse_variable(vj);
            job.groups[var.spec.name] = vj.value("group", "ungrouped");
            if (var.spec.kind == dataset::VariableKind::numeric) {
                if (vj.contains("dist")) {
                    const auto& dj = vj.at("dist");
                    var.dist.kind = dj.value("kind", "uniform") == "normal"
                                        ? synth::CovariateDist::Kind::normal
                                        : synth::CovariateDist::Kind::uniform;
                    var.dist.a = dj.value("a", 0.0);
                    var.dist.b = dj.value("b", 1.0);
                }
                if (vj.contains("knots"))
                    var.effect.knots = vj.at("knots").get<std::vector<double>>();
                if (vj.contains("slopes"))
                    var.effect.slopes = vj.at("slopes").get<std::vector<double>>();
            } else {
                var.category_probs = vj.at("probs").get<std::vector<double>>();
                if (vj.contains("effects"))
                    var.category_effects = vj.at("effects").get<std::vector<double>>();
            }
            config.variables.push_back(std::move(var));
        }
        job.waves.push_back(std::move(config));
    }
    if (j.contains("run_config")) job.run_overrides = j.at("run_config");
    return job;
}

inline SynthJob load_synth_job(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open synth config: " + path);
    nlohmann::json j;
    in >> j;
    return parse_synth_job(j);
}

// Generates every wave, writes the three-CSV layouts + truth sidecars, and
// emits run_config.json next to them. Returns the run-config path.
inline std::string run_synth_job(const SynthJob& job, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    if (job.waves.empty()) throw std::invalid_argument("synth job has no waves");

    nlohmann::ordered_json run;
    run["response"] = job.waves.front().response_name;
    nlohmann::ordered_json schema = nlohmann::ordered_json::array();
    for (const auto& v : job.waves.front().variables) {
        nlohmann::ordered_json e;
        e["name"] = v.spec.name;
        e["level"] = dataset::to_string(v.spec.level);
        e["kind"] = v.spec.kind == dataset::VariableKind::numeric ? "numeric" : "categorical";
        if (v.spec.kind == dataset::VariableKind::categorical) {
            e["categories"] = v.spec.categories;
            e["reference"] = v.spec.reference;
        }
        if (!v.spec.units.empty()) e["units"] = v.spec.units;
        auto it = job.groups.find(v.spec.name);
        e["group"] = it == job.groups.end() ? "ungrouped" : it->second;
        schema.push_back(std::move(e));
    }
    run["schema"] = std::move(schema);

    nlohmann::ordered_json waves = nlohmann::ordered_json::array();
    for (const auto& config : job.waves) {
        const auto [wave, truth] = synth::generate(config);
        const std::string stem = detail::sanitize(config.label);
        const auto files = synth::write_wave_csvs(wave, truth, out_dir, stem);
        nlohmann::ordered_json wj;
        wj["label"] = config.label;
        wj["persons_csv"] = stem + "_persons.csv";
        wj["households_csv"] = stem + "_households.csv";
        wj["zones_csv"] = stem + "_zones.csv";
        waves.push_back(std::move(wj));
    }
    run["waves"] = std::move(waves);

    if (!job.run_overrides.is_null())
        for (const auto& [key, value] : job.run_overrides.items()) run[key] = value;

    const std::string path = out_dir + "/run_config.json";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << run.dump(1) << '\n';
    return path;
}

// ---------------------------------------------------------------------------
// run-all: the whole procedure, every wave; emits the manifest last.
// ---------------------------------------------------------------------------
struct RunOutputs {
    std::vector<PreparedWave> prepared;
    std::vector<MlWaveResult> ml;
    std::vector<std::vector<interpret::PdpCurve>> pdps;
    KnotResults knots;
    std::vector<mlm::StepwiseResult> stepwise;
};

inline RunOutputs run_all(const RunConfig& config, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    using Clock = std::chrono::steady_clock;
    const auto t0 = Clock::now();
    nlohmann::ordered_json timings = nlohmann::ordered_json::object();
    const auto record_time = [&](const std::string& stage, Clock::time_point since) {
        timings[stage] =
            std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - since).count();
    };

    RunOutputs outputs;

    // Prepare + ML per wave.
    auto t_stage = Clock::now();
    for (std::size_t w = 0; w < config.waves.size(); ++w) {
        PreparedWave prepared = prepare_wave(config, w);
        prepared.clean_log.write_csv(out_dir + "/clean_log_" +
                                     detail::sanitize(config.waves[w].label) + ".csv");
        outputs.prepared.push_back(std::move(prepared));
    }
    record_time("prepare", t_stage);

    t_stage = Clock::now();
    for (std::size_t w = 0; w < config.waves.size(); ++w)
        outputs.ml.push_back(run_ml_wave(config, outputs.prepared[w].wave, w, out_dir));
    record_time("ml", t_stage);

    // Metrics summary across waves and algorithms.
    {
        csv::Writer mw(out_dir + "/metrics.csv");
        mw.row({"wave", "algorithm", "rmse", "r2", "best_candidate"});
        for (const auto& ml : outputs.ml)
            for (const auto& algorithm : config.ml.algorithms) {
                const auto& m = ml.metrics.at(algorithm);
                mw.row({ml.label, algorithm, format_double(m.rmse), format_double(m.r2),
                        std::to_string(ml.best_candidate.at(algorithm))});
            }
    }

    // PDPs per wave from the importance-source model.
    t_stage = Clock::now();
    for (std::size_t w = 0; w < config.waves.size(); ++w) {
        const std::string& label = config.waves[w].label;
        detail::in_stage("pdp", label, [&] {
            auto it = outputs.ml[w].models.find(config.ml.importance_from);
            if (it == outputs.ml[w].models.end()) it = outputs.ml[w].models.begin();
            outputs.pdps.push_back(compute_wave_pdps(config, outputs.prepared[w].wave, it->second,
                                                     outputs.ml[w].split));
            write_pdp_csv(out_dir + "/pdp_" + detail::sanitize(label) + ".csv", outputs.pdps[w]);
            return 0;
        });
    }
    record_time("pdp", t_stage);

    // Knot detection + consolidation.
    t_stage = Clock::now();
    detail::in_stage("knots", "", [&] {
        std::vector<dataset::HierarchicalWave> waves;
        for (const auto& p : outputs.prepared) waves.push_back(p.wave);
        outputs.knots = detect_and_consolidate(config, outputs.pdps, waves);
        write_knots_csv(out_dir, outputs.knots);
        return 0;
    });
    record_time("knots", t_stage);

    // Stepwise MLM per wave.
    t_stage = Clock::now();
    for (std::size_t w = 0; w < config.waves.size(); ++w) {
        const std::string& label = config.waves[w].label;
        detail::in_stage("mlm", label, [&] {
            mlm::LmmSpec spec;
            spec.method = config.mlm_cfg.method;
            auto result = mlm::stepwise_build(outputs.prepared[w].wave, outputs.knots.consolidated,
                                              config.built_environment_variables(),
                                              config.mlm_cfg.alpha, spec);
            const std::string tag = detail::sanitize(label);
            write_coefficients_csv(out_dir + "/coefficients_" + tag + ".csv",
                                   result.models.back(), result.models.back().design);
            write_fitstats_csv(out_dir + "/fitstats_" + tag + ".csv", result);
            write_trace_csv(out_dir + "/stepwise_trace_" + tag + ".csv", result);
            const auto elasticity =
                mlm::elasticity_table(result.models.back().fit, outputs.prepared[w].wave,
                                      config.built_environment_variables());
            write_elasticity_csv(out_dir + "/elasticity_" + tag + ".csv", elasticity);
            outputs.stepwise.push_back(std::move(result));
            return 0;
        });
    }
    record_time("mlm", t_stage);

    // SVG plots: one per PDP variable, a polyline per wave, consolidated
    // knots as vertical markers.
    t_stage = Clock::now();
    detail::in_stage("svg", "", [&] {
        for (const auto& variable : pdp_variable_list(config)) {
            std::vector<svg::Series> series;
            for (const auto& curves : outputs.pdps)
                for (const auto& c : curves)
                    if (c.feature == variable)
                        series.push_back({c.wave, c.grid, c.avg_pred});
            if (series.empty()) continue;
            std::string units;
            for (const auto& e : config.schema)
                if (e.spec.name == variable) units = e.spec.units;
            const std::string x_label = units.empty() ? variable : variable + " (" + units + ")";
            svg::write_line_chart(out_dir + "/pdp_" + detail::sanitize(variable) + ".svg",
                                  "Partial dependence: " + variable, x_label,
                                  "avg " + config.response, series,
                                  outputs.knots.consolidated.knots_for(variable));
        }
        return 0;
    });
    record_time("svg", t_stage);

    // Manifest (contains timings; excluded from byte-for-byte comparisons).
    nlohmann::ordered_json manifest;
    manifest["tool"] = "thresher";
    manifest["version"] = kVersion;
    manifest["seed"] = config.ml.seed;
    manifest["jobs"] = config.jobs;
    manifest["waves"] = nlohmann::ordered_json::array();
    for (const auto& wave : config.waves) manifest["waves"].push_back(wave.label);
    manifest["timings_ms"] = timings;
    manifest["total_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
    nlohmann::ordered_json files = nlohmann::ordered_json::array();
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(out_dir))
        names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names)
        if (n != "manifest.json") files.push_back(n);
    manifest["files"] = std::move(files);
    std::ofstream mout(out_dir + "/manifest.json", std::ios::binary);
    mout << manifest.dump(1) << '\n';

    return outputs;
}

}  // namespace thresher::pipeline

#endif  // THRESHER_PIPELINE_HPP
