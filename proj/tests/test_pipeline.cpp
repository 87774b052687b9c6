#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "thresher/pipeline.hpp"
#include "thresher/svg.hpp"

using namespace thresher;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("thresher_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string file(const std::string& name, const std::string& content) const {
        const std::string p = (path / name).string();
        std::ofstream out(p, std::ios::binary);
        out << content;
        return p;
    }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_occurrences(const std::string& text, const std::string& needle) {
    std::size_t count = 0, pos = 0;
    while ((pos = text.find(needle, pos)) != std::string::npos) {
        ++count;
        pos += needle.size();
    }
    return count;
}

// A compact synthetic 2-wave job whose truth has one piecewise BE effect.
std::string small_synth_json() {
    return R"({
  "waves": [
    {
      "label": "w1", "seed": 101, "n_zones": 90,
      "households_per_zone": [2, 3], "persons_per_household": [1, 3],
      "sd_zone": 1.0, "sd_hh": 2.0, "sd_resid": 4.0, "intercept": 60.0,
      "variables": [
        {"name": "AgeLike", "level": "person", "kind": "numeric", "group": "personal",
         "dist": {"kind": "uniform", "a": 5, "b": 85}, "slopes": [0.12]},
        {"name": "FlexLike", "level": "person", "kind": "categorical", "group": "personal",
         "categories": ["Unemployed", "Fixed", "Flexible"], "reference": "Unemployed",
         "probs": [0.5, 0.3, 0.2], "effects": [0, 4.0, 3.0]},
        {"name": "DistLike", "level": "household", "kind": "numeric",
         "group": "built_environment", "units": "miles",
         "dist": {"kind": "uniform", "a": 0, "b": 25},
         "knots": [5, 15], "slopes": [2.5, -1.0, 1.5]},
        {"name": "DenLike", "level": "zone", "kind": "numeric", "group": "built_environment",
         "dist": {"kind": "uniform", "a": 0, "b": 12}}
      ]
    },
    {
      "label": "w2", "seed": 202, "n_zones": 90,
      "households_per_zone": [2, 3], "persons_per_household": [1, 3],
      "sd_zone": 1.0, "sd_hh": 2.0, "sd_resid": 4.0, "intercept": 60.0,
      "variables": [
        {"name": "AgeLike", "level": "person", "kind": "numeric", "group": "personal",
         "dist": {"kind": "uniform", "a": 5, "b": 85}, "slopes": [0.12]},
        {"name": "FlexLike", "level": "person", "kind": "categorical", "group": "personal",
         "categories": ["Unemployed", "Fixed", "Flexible"], "reference": "Unemployed",
         "probs": [0.5, 0.3, 0.2], "effects": [0, 4.0, 3.0]},
        {"name": "DistLike", "level": "household", "kind": "numeric",
         "group": "built_environment", "units": "miles",
         "dist": {"kind": "uniform", "a": 0, "b": 25},
         "knots": [5, 15], "slopes": [2.5, -1.0, 1.5]},
        {"name": "DenLike", "level": "zone", "kind": "numeric", "group": "built_environment",
         "dist": {"kind": "uniform", "a": 0, "b": 12}}
      ]
    }
  ],
  "run_config": {
    "clean": {"winsorize_percentile": null},
    "ml": {"algorithms": ["gbdt"], "k_folds": 3, "test_fraction": 0.2, "seed": 11,
           "gbdt_grid": {"n_estimators": [150], "learning_rate": [0.1],
                          "max_depth": [3, 4], "max_features": ["all"], "subsample": [0.9]}},
    "interpret": {"grid_points": 30, "max_knots": 2, "rounding": "none",
                   "pdp_variables": ["DistLike", "DenLike"],
                   "pdp_max_background_rows": 250},
    "mlm": {"alpha": 0.10, "method": "ML"},
    "jobs": 1
  }
})";
}

}  // namespace

TEST_CASE("svg line charts") {
    TempDir dir("svg");

    SECTION("one flat curve gives exactly one polyline with constant y") {
        svg::Series flat{"w1", {0, 1, 2, 3}, {5, 5, 5, 5}};
        const std::string path = dir.str() + "/flat.svg";
        svg::write_line_chart(path, "t", "x", "y", {flat});
        const std::string text = slurp(path);
        CHECK(count_occurrences(text, "<polyline class=\"series\"") == 1);
        // All mapped y coordinates are identical.
        const auto at = text.find("points=\"");
        REQUIRE(at != std::string::npos);
        const auto end = text.find('"', at + 8);
        const std::string points = text.substr(at + 8, end - at - 8);
        std::string first_y;
        std::istringstream ss(points);
        std::string pair;
        while (ss >> pair) {
            const std::string y = pair.substr(pair.find(',') + 1);
            if (first_y.empty()) first_y = y;
            CHECK(y == first_y);
        }
    }

    SECTION("three waves give three polylines with distinct legend entries") {
        std::vector<svg::Series> series{{"1997", {0, 1}, {2, 3}},
                                        {"2006", {0, 1}, {1, 2}},
                                        {"2017", {0, 1}, {4, 1}}};
        const std::string path = dir.str() + "/three.svg";
        svg::write_line_chart(path, "t", "x", "y", series);
        const std::string text = slurp(path);
        CHECK(count_occurrences(text, "<polyline class=\"series\"") == 3);
        CHECK(text.find(">1997<") != std::string::npos);
        CHECK(text.find(">2006<") != std::string::npos);
        CHECK(text.find(">2017<") != std::string::npos);
    }

    SECTION("knot markers land at the mapped x positions") {
        svg::Series s{"w", {0, 20}, {0, 10}};
        const std::string path = dir.str() + "/knots.svg";
        svg::write_line_chart(path, "t", "x", "y", {s}, {5.0, 15.0});
        const std::string text = slurp(path);
        CHECK(count_occurrences(text, "class=\"knot\"") == 2);

        // Recompute the mapping from the declared geometry.
        const svg::Range xr = svg::Range::of(0.0, 20.0);
        for (double k : {5.0, 15.0}) {
            const std::string expected = "x1=\"" + format_double(svg::map_x(k, xr)) + "\"";
            CHECK(text.find(expected) != std::string::npos);
        }
    }

    SECTION("empty series list is an error") {
        CHECK_THROWS_AS(svg::write_line_chart(dir.str() + "/none.svg", "t", "x", "y", {}),
                        std::invalid_argument);
    }
}

TEST_CASE("derive stage: trips, facilities, diversity") {
    TempDir dir("derive");
    dir.file("persons.csv",
             "person_id,household_id,Age\n"
             "P1,H1,30\nP2,H1,40\nP3,H2,50\n");
    dir.file("households.csv",
             "household_id,zone_id,lat,lon\n"
             "H1,Z1,30.00,-97.00\nH2,Z2,30.10,-97.10\n");
    dir.file("zones.csv",
             "zone_id,households,emp_basic,emp_retail,emp_service,Diversity\n"
             "Z1,10,10,10,10,\nZ2,4,2,1,1,\n");
    dir.file("trips.csv",
             "person_id,mode,o_lat,o_lon,d_lat,d_lon,distance_miles\n"
             "P1,car,30,-97,30.1,-97,7.5\n"
             "P1,bus,30,-97,30.1,-97,3.0\n"
             "P2,car,30,-97,30.05,-97,2.5\n");
    dir.file("stops.csv", "lat,lon,label\n30.00,-97.00,a\n31.00,-98.00,b\n");

    const std::string config_json = R"({
      "response": "VMT_Person",
      "schema": [
        {"name": "Age", "level": "person", "kind": "numeric", "group": "personal"},
        {"name": "Dist_transit", "level": "household", "kind": "numeric",
         "group": "built_environment"},
        {"name": "Diversity", "level": "zone", "kind": "numeric", "group": "built_environment"}
      ],
      "waves": [
        {"label": "w", "persons_csv": "persons.csv", "households_csv": "households.csv",
         "zones_csv": "zones.csv", "trips_csv": "trips.csv",
         "mode_map": {"car": "personal_motorized", "bus": "other"},
         "facility_distances": [
            {"variable": "Dist_transit", "facilities_csv": "stops.csv", "metric": "haversine"}],
         "diversity_variable": "Diversity"}
      ]
    })";
    const std::string config_path = dir.file("config.json", config_json);

    const auto config = pipeline::load_config(config_path);
    const auto prepared = pipeline::prepare_wave(config, 0);
    const auto& wave = prepared.wave;

    REQUIRE(wave.persons.size() == 3);

    SECTION("VMT: personal motorized trips only; tripless persons get zero") {
        CHECK(wave.response[wave.persons.index_of("P1")] == Approx(7.5));
        CHECK(wave.response[wave.persons.index_of("P2")] == Approx(2.5));
        CHECK(wave.response[wave.persons.index_of("P3")] == Approx(0.0));
    }

    SECTION("nearest transit stop from household coordinates") {
        const auto dist = wave.joined_numeric("Dist_transit");
        CHECK(dist[wave.persons.index_of("P1")] == Approx(0.0));
        const double expected = derive::haversine_miles({30.10, -97.10}, {30.00, -97.00});
        CHECK(dist[wave.persons.index_of("P3")] == Approx(expected));
    }

    SECTION("diversity entropy from zone counts") {
        const auto d = wave.joined_numeric("Diversity");
        CHECK(d[wave.persons.index_of("P1")] == Approx(1.0));
        CHECK(d[wave.persons.index_of("P3")] == Approx(0.875));
    }
}

TEST_CASE("derive stage: zone centroids and road-network routing") {
    TempDir dir("derive2");
    dir.file("persons.csv", "person_id,household_id,Age\nP1,H1,30\n");
    dir.file("households.csv", "household_id,zone_id\nH1,Z1\n");
    dir.file("zones.csv", "zone_id\nZ1\n");
    // Unit square around (30.05, -97.05); centroid at its middle.
    dir.file("polygons.csv",
             "zone_id,vertex_order,lat,lon\n"
             "Z1,1,30.00,-97.10\nZ1,2,30.00,-97.00\nZ1,3,30.10,-97.00\nZ1,4,30.10,-97.10\n");
    dir.file("nodes.csv", "node_id,lat,lon\n1,30.05,-97.05\n2,30.05,-97.00\n3,30.00,-97.00\n");
    dir.file("edges.csv", "node_u,node_v,length_miles\n1,2,4.0\n2,3,2.0\n");
    dir.file("stops.csv", "lat,lon\n30.00,-97.00\n");

    const std::string config_json = R"({
      "response": "VMT_Person",
      "schema": [
        {"name": "Age", "level": "person", "kind": "numeric", "group": "personal"},
        {"name": "Dist_transit", "level": "zone", "kind": "numeric",
         "group": "built_environment"}
      ],
      "waves": [
        {"label": "w", "persons_csv": "persons.csv", "households_csv": "households.csv",
         "zones_csv": "zones.csv", "trips_csv": "trips.csv",
         "mode_map": {"car": "personal_motorized"},
         "zone_polygons_csv": "polygons.csv",
         "road_nodes_csv": "nodes.csv", "road_edges_csv": "edges.csv",
         "facility_distances": [
            {"variable": "Dist_transit", "facilities_csv": "stops.csv", "metric": "route"}]}
      ]
    })";
    dir.file("trips.csv",
             "person_id,mode,o_lat,o_lon,d_lat,d_lon\n"
             "P1,car,30.05,-97.05,30.00,-97.00\n");
    const auto config = pipeline::load_config(dir.file("config.json", config_json));
    const auto prepared = pipeline::prepare_wave(config, 0);

    // Zone centroid (30.05, -97.05) snaps to node 1; the stop snaps to node
    // 3; shortest route = 4 + 2.
    CHECK(prepared.wave.joined_numeric("Dist_transit")[0] == Approx(6.0));
    // The trip's distance is routed over the graph too.
    CHECK(prepared.wave.response[0] == Approx(6.0));
}

TEST_CASE("run_all produces the documented artifact set and is reproducible") {
    TempDir data("data");
    TempDir out1("out1");
    const std::string synth_path = data.file("synth.json", small_synth_json());

    const auto job = pipeline::load_synth_job(synth_path);
    const std::string run_config_path = pipeline::run_synth_job(job, data.str());
    const auto config = pipeline::load_config(run_config_path);

    const auto outputs = pipeline::run_all(config, out1.str());

    SECTION("documented file set per wave plus consolidated artifacts") {
        for (const std::string wave : {"w1", "w2"}) {
            for (const std::string stem :
                 {"clean_log_", "vif_", "cv_table_gbdt_", "model_gbdt_", "importance_",
                  "importance_groups_", "pdp_", "coefficients_", "fitstats_", "stepwise_trace_",
                  "elasticity_"}) {
                const std::string f = out1.str() + "/" + stem + wave +
                                      (stem == "model_gbdt_" ? ".json" : ".csv");
                INFO(f);
                CHECK(fs::exists(f));
            }
        }
        CHECK(fs::exists(out1.str() + "/metrics.csv"));
        CHECK(fs::exists(out1.str() + "/knots.csv"));
        CHECK(fs::exists(out1.str() + "/knot_candidates.csv"));
        CHECK(fs::exists(out1.str() + "/pdp_DistLike.svg"));
        CHECK(fs::exists(out1.str() + "/pdp_DenLike.svg"));
        CHECK(fs::exists(out1.str() + "/manifest.json"));
    }

    SECTION("consolidated knots sit near the generating truth") {
        const auto knots = outputs.knots.consolidated.knots_for("DistLike");
        REQUIRE(knots.size() == 2);
        CHECK(knots[0] == Approx(5.0).margin(1.5));
        CHECK(knots[1] == Approx(15.0).margin(1.5));
    }

    SECTION("stepwise AIC improves through the models in both waves") {
        for (const auto& result : outputs.stepwise) {
            CHECK(result.models[3].stats.aic < result.models[0].stats.aic);
        }
    }

    SECTION("second run is byte-identical apart from the manifest") {
        TempDir out2("out2");
        pipeline::run_all(config, out2.str());
        std::size_t compared = 0;
        for (const auto& entry : fs::directory_iterator(out1.str())) {
            const std::string name = entry.path().filename().string();
            if (name == "manifest.json") continue;  // carries timings
            INFO(name);
            CHECK(slurp(entry.path().string()) == slurp(out2.path / name));
            ++compared;
        }
        CHECK(compared > 10);
    }
}

TEST_CASE("stage subcommand chain reproduces the run-all artifacts") {
    TempDir data("chain_data");
    TempDir all("chain_all");
    TempDir staged("chain_staged");
    const auto job = pipeline::load_synth_job(data.file("synth.json", small_synth_json()));
    const std::string run_config_path = pipeline::run_synth_job(job, data.str());
    const auto config = pipeline::load_config(run_config_path);

    pipeline::run_all(config, all.str());

    pipeline::run_ml(config, staged.str());
    pipeline::run_pdp(config, staged.str());
    pipeline::run_knots(config, staged.str());
    pipeline::run_mlm(config, staged.str());
    pipeline::run_elasticity(config, staged.str());

    for (const std::string name :
         {"metrics.csv", "knots.csv", "pdp_w1.csv", "coefficients_w1.csv", "fitstats_w2.csv",
          "elasticity_w1.csv", "elasticity_w2.csv"}) {
        INFO(name);
        CHECK(slurp(all.str() + "/" + name) == slurp(staged.str() + "/" + name));
    }
}

TEST_CASE("a missing input aborts with the stage name and wave label") {
    TempDir dir("missing");
    dir.file("persons.csv", "person_id,household_id,Age,VMT_Person\nP1,H1,30,5\n");
    dir.file("households.csv", "household_id,zone_id\nH1,Z1\n");
    const std::string config_json = R"({
      "response": "VMT_Person",
      "schema": [{"name": "Age", "level": "person", "kind": "numeric", "group": "personal"}],
      "waves": [{"label": "w9", "persons_csv": "persons.csv",
                  "households_csv": "households.csv", "zones_csv": "zones_gone.csv"}]
    })";
    const auto config = pipeline::load_config(dir.file("config.json", config_json));
    try {
        pipeline::prepare_wave(config, 0);
        FAIL("expected a StageError");
    } catch (const pipeline::StageError& e) {
        CHECK(e.stage() == "load");
        CHECK(e.wave() == "w9");
        CHECK(std::string(e.what()).find("zones_gone.csv") != std::string::npos);
    }
}

TEST_CASE("manual knot overrides replace detected knots") {
    TempDir data("manual");
    const auto job = pipeline::load_synth_job(data.file("synth.json", small_synth_json()));
    const std::string run_config_path = pipeline::run_synth_job(job, data.str());

    // Patch the emitted config with manual knots.
    nlohmann::json j;
    {
        std::ifstream in(run_config_path);
        in >> j;
    }
    j["interpret"]["manual_knots"] = {{"DistLike", {4.0, 16.0}}};
    std::ofstream(run_config_path) << j.dump(1);

    const auto config = pipeline::load_config(run_config_path);
    std::vector<std::vector<interpret::PdpCurve>> no_curves(config.waves.size());
    std::vector<dataset::HierarchicalWave> waves;
    for (std::size_t w = 0; w < config.waves.size(); ++w)
        waves.push_back(pipeline::prepare_wave(config, w).wave);
    const auto knots = pipeline::detect_and_consolidate(config, no_curves, waves);
    CHECK(knots.consolidated.knots_for("DistLike") == std::vector<double>{4.0, 16.0});
}
