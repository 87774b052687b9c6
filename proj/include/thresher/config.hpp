#ifndef THRESHER_CONFIG_HPP
#define THRESHER_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "thresher/dataset.hpp"
#include "thresher/ensemble.hpp"
#include "thresher/interpret.hpp"
#include "thresher/mlm.hpp"

namespace thresher::pipeline {

// A schema entry is a dataset::VariableSpec plus the reporting group used
// for grouped importance and for staging built-environment terms.
struct SchemaEntry {
    dataset::VariableSpec spec;
    std::string group;  // "personal", "household", "built_environment", ...
};

struct FacilityDistanceSpec {
    std::string variable;        // schema variable receiving the distance
    std::string facilities_csv;  // lat, lon[, label]
    bool use_route = false;      // route over the wave's road graph
};

struct WaveInput {
    std::string label;
    std::string persons_csv, households_csv, zones_csv;
    std::string trips_csv;                       // optional: derive VMT
    std::map<std::string, std::string> mode_map; // raw mode -> personal_motorized|other
    std::string road_nodes_csv, road_edges_csv;  // optional road network
    std::string zone_polygons_csv;               // optional: zone_id, vertex_order, lat, lon
    std::vector<FacilityDistanceSpec> facility_distances;
    std::string diversity_variable;  // optional: compute from zone counts
};

struct CleanConfig {
    std::optional<double> winsorize_percentile;
};

struct MlConfig {
    std::vector<std::string> algorithms = {"gbdt"};
    int k_folds = 5;
    double test_fraction = 0.20;
    std::uint64_t seed = 17;
    std::string importance_from = "gbdt";
    std::vector<ensemble::GbdtParams> gbdt_grid;
    std::vector<ensemble::RfParams> rf_grid;
};

struct InterpretConfig {
    std::size_t grid_points = 50;
    double quantile_lo = 0.01;
    double quantile_hi = 0.99;
    int max_knots = 3;
    double rel_tol = 0.15;
    interpret::KnotRounding rounding = interpret::KnotRounding::significant_1;
    std::optional<double> penalty_override;
    std::vector<std::string> pdp_variables;  // empty = all numeric explanatory variables
    std::size_t pdp_max_background_rows = 2000;
    std::map<std::string, std::vector<double>> manual_knots;
};

struct MlmConfig {
    double alpha = 0.10;
    mlm::FitMethod method = mlm::FitMethod::ML;
};

struct RunConfig {
    std::string response = "VMT_Person";
    std::vector<SchemaEntry> schema;
    std::vector<WaveInput> waves;
    CleanConfig clean;
    MlConfig ml;
    InterpretConfig interpret_cfg;
    MlmConfig mlm_cfg;
    unsigned jobs = 1;

    dataset::Schema dataset_schema() const {
        std::vector<dataset::VariableSpec> specs;
        for (const auto& e : schema) specs.push_back(e.spec);
        return dataset::Schema(specs);
    }

    std::map<std::string, std::string> variable_groups() const {
        std::map<std::string, std::string> out;
        for (const auto& e : schema) out[e.spec.name] = e.group;
        return out;
    }

    std::set<std::string> built_environment_variables() const {
        std::set<std::string> out;
        for (const auto& e : schema)
            if (e.group == "built_environment") out.insert(e.spec.name);
        return out;
    }

    void validate() const {
        if (waves.empty()) throw std::invalid_argument("config: need at least one wave");
        if (schema.empty()) throw std::invalid_argument("config: empty schema");
        dataset_schema();  // throws on schema problems
        if (ml.k_folds < 2) throw std::invalid_argument("config: ml.k_folds must be >= 2");
        if (!(ml.test_fraction > 0.0 && ml.test_fraction < 1.0))
            throw std::invalid_argument("config: ml.test_fraction must lie in (0, 1)");
        for (const auto& a : ml.algorithms)
            if (a != "gbdt" && a != "rf")
                throw std::invalid_argument("config: unknown algorithm '" + a + "'");
    }
};

// ---------------------------------------------------------------------------
// JSON parsing. Paths in the config resolve relative to the config file.
// ---------------------------------------------------------------------------
namespace detail {

inline std::string resolve_path(const std::string& base_dir, const std::string& path) {
    if (path.empty()) return path;
    std::filesystem::path p(path);
    if (p.is_absolute()) return path;
    return (std::filesystem::path(base_dir) / p).lexically_normal().string();
}

inline dataset::VariableSpec parse_variable(const nlohmann::json& j) {
    dataset::VariableSpec spec;
    spec.name = j.at("name").get<std::string>();
    spec.level = dataset::level_from_string(j.at("level").get<std::string>());
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "numeric") {
        spec.kind = dataset::VariableKind::numeric;
    } else if (kind == "categorical") {
        spec.kind = dataset::VariableKind::categorical;
        spec.categories = j.at("categories").get<std::vector<std::string>>();
        spec.reference = j.at("reference").get<std::string>();
    } else {
        throw std::invalid_argument("variable '" + spec.name + "': unknown kind '" + kind + "'");
    }
    spec.units = j.value("units", "");
    return spec;
}

// Cartesian product of per-parameter value lists, rightmost varying fastest.
// Key order is fixed here, not by JSON, so lattice order is reproducible.
inline std::vector<ensemble::GbdtParams> parse_gbdt_grid(const nlohmann::json& j,
                                                         std::uint64_t seed) {
    const auto ints = [&](const char* key, std::vector<int> dflt) {
        return j.contains(key) ? j.at(key).get<std::vector<int>>() : dflt;
    };
    const auto doubles = [&](const char* key, std::vector<double> dflt) {
        return j.contains(key) ? j.at(key).get<std::vector<double>>() : dflt;
    };
    const auto strings = [&](const char* key, std::vector<std::string> dflt) {
        return j.contains(key) ? j.at(key).get<std::vector<std::string>>() : dflt;
    };

    std::vector<ensemble::GbdtParams> grid;
    for (int n_estimators : ints("n_estimators", {100}))
        for (double learning_rate : doubles("learning_rate", {0.1}))
            for (int max_depth : ints("max_depth", {3}))
                for (const auto& max_features : strings("max_features", {"all"}))
                    for (double subsample : doubles("subsample", {1.0}))
                        for (int min_samples_leaf : ints("min_samples_leaf", {1})) {
                            ensemble::GbdtParams p;
                            p.n_estimators = n_estimators;
                            p.learning_rate = learning_rate;
                            p.max_depth = max_depth;
                            p.max_features = ensemble::max_features_from_string(max_features);
                            p.subsample = subsample;
                            p.min_samples_leaf = min_samples_leaf;
                            p.seed = seed;
                            p.validate();
                            grid.push_back(p);
                        }
    return grid;
}

inline std::vector<ensemble::RfParams> parse_rf_grid(const nlohmann::json& j, std::uint64_t seed,
                                                     unsigned jobs) {
    const auto ints = [&](const char* key, std::vector<int> dflt) {
        return j.contains(key) ? j.at(key).get<std::vector<int>>() : dflt;
    };
    const auto strings = [&](const char* key, std::vector<std::string> dflt) {
        return j.contains(key) ? j.at(key).get<std::vector<std::string>>() : dflt;
    };

    std::vector<ensemble::RfParams> grid;
    for (int n_trees : ints("n_trees", {100}))
        for (int max_depth : ints("max_depth", {12}))
            for (const auto& max_features : strings("max_features", {"sqrt"}))
                for (int min_samples_leaf : ints("min_samples_leaf", {1})) {
                    ensemble::RfParams p;
                    p.n_trees = n_trees;
                    p.max_depth = max_depth;
                    p.max_features = ensemble::max_features_from_string(max_features);
                    p.min_samples_leaf = min_samples_leaf;
                    p.seed = seed;
                    p.jobs = jobs;
                    p.validate();
                    grid.push_back(p);
                }
    return grid;
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j, const std::string& base_dir) {
    RunConfig config;
    config.response = j.value("response", "VMT_Person");
    config.jobs = j.value("jobs", 1u);

    for (const auto& vj : j.at("schema")) {
        SchemaEntry entry;
        entry.spec = detail::parse_variable(vj);
        entry.group = vj.value("group", "ungrouped");
        config.schema.push_back(entry);
    }

    for (const auto& wj : j.at("waves")) {
        WaveInput wave;
        wave.label = wj.at("label").get<std::string>();
        wave.persons_csv = detail::resolve_path(base_dir, wj.at("persons_csv").get<std::string>());
        wave.households_csv =
            detail::resolve_path(base_dir, wj.at("households_csv").get<std::string>());
        wave.zones_csv = detail::resolve_path(base_dir, wj.at("zones_csv").get<std::string>());
        wave.trips_csv = detail::resolve_path(base_dir, wj.value("trips_csv", ""));
        wave.road_nodes_csv = detail::resolve_path(base_dir, wj.value("road_nodes_csv", ""));
        wave.road_edges_csv = detail::resolve_path(base_dir, wj.value("road_edges_csv", ""));
        wave.zone_polygons_csv = detail::resolve_path(base_dir, wj.value("zone_polygons_csv", ""));
        wave.diversity_variable = wj.value("diversity_variable", "");
        if (wj.contains("mode_map"))
            wave.mode_map = wj.at("mode_map").get<std::map<std::string, std::string>>();
        if (wj.contains("facility_distances")) {
            for (const auto& fj : wj.at("facility_distances")) {
                FacilityDistanceSpec f;
                f.variable = fj.at("variable").get<std::string>();
                f.facilities_csv =
                    detail::resolve_path(base_dir, fj.at("facilities_csv").get<std::string>());
                f.use_route = fj.value("metric", "haversine") == "route";
                wave.facility_distances.push_back(f);
            }
        }
        config.waves.push_back(wave);
    }

    if (j.contains("clean")) {
        const auto& cj = j.at("clean");
        if (cj.contains("winsorize_percentile") && !cj.at("winsorize_percentile").is_null())
            config.clean.winsorize_percentile = cj.at("winsorize_percentile").get<double>();
    }

    if (j.contains("ml")) {
        const auto& mj = j.at("ml");
        if (mj.contains("algorithms"))
            config.ml.algorithms = mj.at("algorithms").get<std::vector<std::string>>();
        config.ml.k_folds = mj.value("k_folds", 5);
        config.ml.test_fraction = mj.value("test_fraction", 0.20);
        config.ml.seed = mj.value("seed", std::uint64_t{17});
        config.ml.importance_from = mj.value("importance_from", "gbdt");
        config.ml.gbdt_grid = detail::parse_gbdt_grid(
            mj.contains("gbdt_grid") ? mj.at("gbdt_grid") : nlohmann::json::object(),
            config.ml.seed);
        config.ml.rf_grid = detail::parse_rf_grid(
            mj.contains("rf_grid") ? mj.at("rf_grid") : nlohmann::json::object(), config.ml.seed,
            config.jobs);
    } else {
        config.ml.gbdt_grid = detail::parse_gbdt_grid(nlohmann::json::object(), config.ml.seed);
        config.ml.rf_grid =
            detail::parse_rf_grid(nlohmann::json::object(), config.ml.seed, config.jobs);
    }

    if (j.contains("interpret")) {
        const auto& ij = j.at("interpret");
        config.interpret_cfg.grid_points = ij.value("grid_points", std::size_t{50});
        config.interpret_cfg.quantile_lo = ij.value("quantile_lo", 0.01);
        config.interpret_cfg.quantile_hi = ij.value("quantile_hi", 0.99);
        config.interpret_cfg.max_knots = ij.value("max_knots", 3);
        config.interpret_cfg.rel_tol = ij.value("rel_tol", 0.15);
        const std::string rounding = ij.value("rounding", "sig1");
        if (rounding == "sig1")
            config.interpret_cfg.rounding = interpret::KnotRounding::significant_1;
        else if (rounding == "none")
            config.interpret_cfg.rounding = interpret::KnotRounding::none;
        else
            throw std::invalid_argument("config: unknown rounding '" + rounding + "'");
        if (ij.contains("penalty_override") && !ij.at("penalty_override").is_null())
            config.interpret_cfg.penalty_override = ij.at("penalty_override").get<double>();
        if (ij.contains("pdp_variables"))
            config.interpret_cfg.pdp_variables =
                ij.at("pdp_variables").get<std::vector<std::string>>();
        config.interpret_cfg.pdp_max_background_rows =
            ij.value("pdp_max_background_rows", std::size_t{2000});
        if (ij.contains("manual_knots"))
            config.interpret_cfg.manual_knots =
                ij.at("manual_knots").get<std::map<std::string, std::vector<double>>>();
    }

    if (j.contains("mlm")) {
        const auto& mj = j.at("mlm");
        config.mlm_cfg.alpha = mj.value("alpha", 0.10);
        config.mlm_cfg.method = mlm::method_from_string(mj.value("method", "ML"));
    }

    config.validate();
    return config;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    in >> j;
    return parse_config(j, std::filesystem::path(path).parent_path().string());
}

}  // namespace thresher::pipeline

#endif  // THRESHER_CONFIG_HPP
