#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "thresher/mlm.hpp"
#include "thresher/synth.hpp"
#include "oracles.hpp"

using namespace thresher;
using Catch::Approx;

namespace {

// Intercept-only design over an explicit grouping.
dataset::DesignMatrix intercept_design(const std::vector<double>& y, const std::vector<int>& hh,
                                       const std::vector<int>& zone) {
    dataset::DesignMatrix d;
    d.columns.push_back({"(Intercept)", "(Intercept)", dataset::ColumnKind::intercept, -1,
                         dataset::kMissing, dataset::kMissing, ""});
    d.X = Matrix(y.size(), 1, 1.0);
    d.y = y;
    d.hh_index = hh;
    d.zone_index = zone;
    d.n_households = *std::max_element(hh.begin(), hh.end()) + 1;
    d.n_zones = *std::max_element(zone.begin(), zone.end()) + 1;
    return d;
}

synth::SynthVariable numeric_var(const std::string& name, dataset::VariableLevel level,
                                 double lo, double hi, std::vector<double> knots = {},
                                 std::vector<double> slopes = {}) {
    synth::SynthVariable v;
    v.spec = {name, level, dataset::VariableKind::numeric};
    v.dist = {synth::CovariateDist::Kind::uniform, lo, hi};
    v.effect.knots = std::move(knots);
    v.effect.slopes = std::move(slopes);
    return v;
}

}  // namespace

TEST_CASE("wald inference") {
    mlm::LmmFit fit;
    fit.converged = true;
    fit.columns.resize(3);
    fit.beta = {0.0, 1.0, 1.50};
    fit.se = {1.0, 1.0 / 1.96, 0.27};
    const auto rows = mlm::wald(fit);

    CHECK(rows[0].p == Approx(1.0));
    CHECK(rows[0].stars.empty());

    CHECK(rows[1].z == Approx(1.96));
    CHECK(rows[1].p == Approx(0.0500).margin(0.0005));

    // Table-style strong effect: z ~ 5.56, three stars.
    CHECK(rows[2].z == Approx(1.50 / 0.27).epsilon(1e-12));
    CHECK(rows[2].p < 0.01);
    CHECK(rows[2].stars == "***");

    fit.converged = false;
    CHECK_THROWS_AS(mlm::wald(fit), std::invalid_argument);
}

TEST_CASE("information criteria") {
    SECTION("published null-model rows") {
        const auto [aic97, bic97] = mlm::information_criteria(-21658.6, 4, 4459);
        CHECK(aic97 == Approx(43325.2).margin(0.1));
        CHECK(bic97 == Approx(43350.8).margin(0.1));

        const auto [aic06, bic06] = mlm::information_criteria(-13333.0, 4, 3020);
        CHECK(aic06 == Approx(26673.9).margin(0.2));
        CHECK(bic06 == Approx(26697.9).margin(0.2));

        const auto [aic17, bic17] = mlm::information_criteria(-27196.0, 4, 6252);
        CHECK(aic17 == Approx(54399.9).margin(0.2));
        CHECK(bic17 == Approx(54426.9).margin(0.2));
    }
    SECTION("degenerate and hand-computed values") {
        const auto [aic0, bic0] = mlm::information_criteria(0.0, 0, 1);
        CHECK(aic0 == 0.0);
        CHECK(bic0 == 0.0);
        const auto [aic, bic] = mlm::information_criteria(-100.0, 3, 50);
        CHECK(aic == Approx(206.0));
        CHECK(bic == Approx(200.0 + 3.0 * std::log(50.0)).epsilon(1e-12));
    }
}

TEST_CASE("nakagawa R2 from variance components") {
    SECTION("published null models") {
        auto [m97, c97] = mlm::nakagawa_r2_from(0.0, 26.07, 16.89, 14.31);
        CHECK(m97 == 0.0);
        CHECK(c97 == Approx(0.42).margin(0.005));

        auto [m06, c06] = mlm::nakagawa_r2_from(0.0, 16.95, 11.72, 5.82);
        CHECK(m06 == 0.0);
        CHECK(c06 == Approx(0.37).margin(0.005));

        auto [m17, c17] = mlm::nakagawa_r2_from(0.0, 16.59, 8.86, 4.97);
        CHECK(m17 == 0.0);
        CHECK(c17 == Approx(0.27).margin(0.005));
    }
    SECTION("both tend to 1 as fixed-effect variance dominates") {
        auto [m, c] = mlm::nakagawa_r2_from(1e12, 1.0, 1.0, 1.0);
        CHECK(m == Approx(1.0).margin(1e-10));
        CHECK(c == Approx(1.0).margin(1e-10));
    }
    SECTION("ordering 0 <= marginal <= conditional <= 1") {
        Rng rng(3);
        for (int i = 0; i < 100; ++i) {
            auto [m, c] = mlm::nakagawa_r2_from(rng.uniform(0, 50), rng.uniform(0.1, 10),
                                                rng.uniform(0, 10), rng.uniform(0, 10));
            CHECK(m >= 0.0);
            CHECK(m <= c);
            CHECK(c <= 1.0);
        }
    }
}

TEST_CASE("balanced one-way ML matches the closed-form solution to 1e-6") {
    const std::size_t groups = 50, per_group = 10;
    Rng rng(42);
    std::vector<double> y;
    std::vector<int> hh, zone;
    std::vector<std::vector<double>> grouped(groups);
    for (std::size_t g = 0; g < groups; ++g) {
        const double u = rng.normal(0.0, 2.0);
        for (std::size_t i = 0; i < per_group; ++i) {
            const double v = 10.0 + u + rng.normal(0.0, 3.0);
            y.push_back(v);
            grouped[g].push_back(v);
            hh.push_back(static_cast<int>(y.size() - 1));  // singleton pseudo-households
            zone.push_back(static_cast<int>(g));
        }
    }

    auto design = intercept_design(y, hh, zone);
    mlm::LmmSpec spec;
    spec.use_household_level = false;
    const auto fit = mlm::fit_lmm(design, spec);
    REQUIRE(fit.converged);

    const auto oracle = oracles::balanced_one_way_ml(grouped);
    CHECK(fit.beta[0] == Approx(oracle.mu).epsilon(1e-6));
    CHECK(fit.varcomps.sd_resid * fit.varcomps.sd_resid ==
          Approx(oracle.var_within).epsilon(1e-6));
    CHECK(fit.varcomps.sd_zone * fit.varcomps.sd_zone ==
          Approx(oracle.var_between).epsilon(1e-6));
    CHECK(fit.varcomps.sd_hh == 0.0);
    CHECK(fit.loglik == Approx(oracle.loglik).epsilon(1e-9));
    CHECK(fit.k_params == 3);
}

TEST_CASE("three-level fit beats a 50x50 brute-force ratio grid") {
    // 4 zones x 3 households x 2 persons fixture.
    Rng rng(7);
    std::vector<double> y;
    std::vector<int> hh, zone;
    std::vector<std::vector<double>> X;
    int hh_id = 0;
    for (int z = 0; z < 4; ++z) {
        const double uz = rng.normal(0.0, 1.5);
        for (int h = 0; h < 3; ++h, ++hh_id) {
            const double uh = rng.normal(0.0, 2.0);
            for (int q = 0; q < 2; ++q) {
                y.push_back(5.0 + uz + uh + rng.normal(0.0, 1.0));
                hh.push_back(hh_id);
                zone.push_back(z);
                X.push_back({1.0});
            }
        }
    }
    auto design = intercept_design(y, hh, zone);
    const auto fit = mlm::fit_lmm(design, {});
    REQUIRE(fit.converged);

    double grid_best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < 50; ++a)
        for (int b = 0; b < 50; ++b) {
            const double lh = std::pow(10.0, -4.0 + 6.0 * a / 49.0);
            const double lz = std::pow(10.0, -4.0 + 6.0 * b / 49.0);
            grid_best = std::max(grid_best,
                                 oracles::dense_profiled_loglik(X, y, hh, zone, lh, lz));
        }
    CHECK(fit.loglik >= grid_best - 1e-9);

    SECTION("profiled beta equals dense GLS at the fitted ratios") {
        const double lh = std::pow(fit.varcomps.sd_hh / fit.varcomps.sd_resid, 2);
        const double lz = std::pow(fit.varcomps.sd_zone / fit.varcomps.sd_resid, 2);
        const auto beta = oracles::dense_gls_beta(X, y, hh, zone, lh, lz);
        CHECK(fit.beta[0] == Approx(beta[0]).epsilon(1e-8));
    }
}

TEST_CASE("household variance shrinks to the boundary when households add nothing") {
    synth::SynthConfig config;
    config.n_zones = 40;
    config.households_per_zone = {3, 3};
    config.persons_per_household = {3, 3};
    config.sd_zone = 2.0;
    config.sd_hh = 0.0;
    config.sd_resid = 4.0;
    config.intercept = 20.0;
    config.seed = 11;
    const auto [wave, truth] = synth::generate(config);

    const auto design = dataset::build_design(wave, {}, {});
    const auto fit = mlm::fit_lmm(design, {});
    REQUIRE(fit.converged);
    CHECK(fit.varcomps.sd_hh < 0.05 * fit.varcomps.sd_resid);
}

TEST_CASE("loglik dominates the OLS model on the same data") {
    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        synth::SynthConfig config;
        config.n_zones = 20;
        config.households_per_zone = {2, 4};
        config.persons_per_household = {1, 3};
        config.sd_zone = rng.uniform(0.0, 2.0);
        config.sd_hh = rng.uniform(0.0, 2.0);
        config.sd_resid = rng.uniform(1.0, 4.0);
        config.intercept = 15.0;
        config.seed = 100 + trial;
        config.variables.push_back(
            numeric_var("x", dataset::VariableLevel::person, 0.0, 10.0, {}, {0.5}));
        const auto [wave, truth] = synth::generate(config);
        const auto design = dataset::build_design(wave, {{"x", true}}, {});
        const auto fit = mlm::fit_lmm(design, {});

        // OLS log-likelihood = profiled loglik at zero variance ratios.
        std::vector<std::vector<double>> X;
        for (std::size_t i = 0; i < design.X.rows(); ++i)
            X.push_back({design.X(i, 0), design.X(i, 1)});
        const double ols = oracles::dense_profiled_loglik(X, design.y, design.hh_index,
                                                          design.zone_index, 0.0, 0.0);
        CHECK(fit.loglik >= ols - 1e-9);
    }
}

TEST_CASE("level collapse is detected and reported, not invented") {
    synth::SynthConfig config;
    config.n_zones = 30;
    config.households_per_zone = {4, 4};
    config.persons_per_household = {1, 1};  // singleton households
    config.sd_zone = 1.0;
    config.sd_hh = 2.0;  // cannot be identified
    config.sd_resid = 2.0;
    config.intercept = 10.0;
    config.seed = 5;
    const auto [wave, truth] = synth::generate(config);
    const auto design = dataset::build_design(wave, {}, {});
    const auto fit = mlm::fit_lmm(design, {});

    CHECK(fit.varcomps.sd_hh == 0.0);
    REQUIRE_FALSE(fit.warnings.empty());
    CHECK(fit.warnings[0].find("household level is not identifiable") != std::string::npos);
}

TEST_CASE("singular fixed effects and other errors") {
    Rng rng(17);
    std::vector<double> y;
    std::vector<int> hh, zone;
    for (int i = 0; i < 30; ++i) {
        y.push_back(rng.normal());
        hh.push_back(i / 2);
        zone.push_back(i / 6);
    }
    auto design = intercept_design(y, hh, zone);

    SECTION("duplicate column") {
        dataset::DesignMatrix bad = design;
        bad.columns.push_back({"dup", "dup", dataset::ColumnKind::linear, -1, dataset::kMissing,
                               dataset::kMissing, ""});
        bad.X = Matrix(y.size(), 2, 1.0);
        CHECK_THROWS_WITH(mlm::fit_lmm(bad, {}),
                          Catch::Matchers::ContainsSubstring("singular"));
    }

    SECTION("non-nested grouping") {
        dataset::DesignMatrix bad = design;
        bad.zone_index[1] = bad.zone_index[0] + 1;  // household 0 spans two zones
        CHECK_THROWS_WITH(mlm::fit_lmm(bad, {}),
                          Catch::Matchers::ContainsSubstring("spans"));
    }

    SECTION("too few observations") {
        dataset::DesignMatrix tiny = intercept_design({1.0, 2.0}, {0, 1}, {0, 0});
        CHECK_THROWS_AS(mlm::fit_lmm(tiny, {}), std::invalid_argument);
    }
}

TEST_CASE("REML on balanced one-way matches the ANOVA REML solution") {
    const std::size_t groups = 30, per_group = 6;
    Rng rng(23);
    std::vector<double> y;
    std::vector<int> hh, zone;
    std::vector<std::vector<double>> grouped(groups);
    for (std::size_t g = 0; g < groups; ++g) {
        const double u = rng.normal(0.0, 1.5);
        for (std::size_t i = 0; i < per_group; ++i) {
            const double v = 4.0 + u + rng.normal(0.0, 2.0);
            y.push_back(v);
            grouped[g].push_back(v);
            hh.push_back(static_cast<int>(y.size() - 1));
            zone.push_back(static_cast<int>(g));
        }
    }
    auto design = intercept_design(y, hh, zone);
    mlm::LmmSpec spec;
    spec.use_household_level = false;
    spec.method = mlm::FitMethod::REML;
    const auto fit = mlm::fit_lmm(design, spec);
    REQUIRE(fit.converged);

    // Balanced REML = ANOVA estimators: var_w = MSW, var_b = (MSB - MSW)/m.
    const double n = static_cast<double>(groups * per_group);
    double grand = 0.0;
    double ssw = 0.0, ssb = 0.0;
    for (const auto& g : grouped)
        for (double v : g) grand += v;
    grand /= n;
    for (const auto& g : grouped) {
        double gm = 0.0;
        for (double v : g) gm += v;
        gm /= static_cast<double>(per_group);
        for (double v : g) ssw += (v - gm) * (v - gm);
        ssb += static_cast<double>(per_group) * (gm - grand) * (gm - grand);
    }
    const double msw = ssw / (n - groups);
    const double msb = ssb / (groups - 1);
    CHECK(fit.varcomps.sd_resid * fit.varcomps.sd_resid == Approx(msw).epsilon(1e-6));
    CHECK(fit.varcomps.sd_zone * fit.varcomps.sd_zone ==
          Approx((msb - msw) / per_group).epsilon(1e-5));
}

TEST_CASE("elasticity") {
    SECTION("published starred segment examples") {
        CHECK(mlm::elasticity_value(1.50, 3.56, 20.28) == Approx(0.26).margin(0.01));
        CHECK(mlm::elasticity_value(-6.60, 5.46, 23.71) == Approx(-1.52).margin(0.01));
        CHECK(mlm::elasticity_value(1.26, 10.45, 19.25) == Approx(0.68).margin(0.01));
        CHECK(mlm::elasticity_value(-39.81, 0.58, 20.28) == Approx(-1.14).margin(0.01));
        CHECK(mlm::elasticity_value(0.0, 3.0, 21.0) == 0.0);
        CHECK_THROWS_AS(mlm::elasticity_value(1.0, 1.0, 0.0), std::invalid_argument);
    }
}

TEST_CASE("stepwise procedure") {
    SECTION("one active effect survives; decoys are dropped") {
        synth::SynthConfig config;
        config.n_zones = 50;
        config.households_per_zone = {3, 3};
        config.persons_per_household = {2, 2};
        config.sd_zone = 0.5;
        config.sd_hh = 1.0;
        config.sd_resid = 2.0;
        config.intercept = 10.0;
        config.seed = 2027;
        config.variables.push_back(
            numeric_var("Active", dataset::VariableLevel::person, 0.0, 10.0, {}, {1.0}));
        config.variables.push_back(
            numeric_var("DecoyPerson", dataset::VariableLevel::person, 0.0, 10.0));
        config.variables.push_back(
            numeric_var("DecoyBE", dataset::VariableLevel::zone, 0.0, 5.0));
        const auto [wave, truth] = synth::generate(config);

        const auto result = mlm::stepwise_build(wave, {}, {"DecoyBE"}, 0.10, {});
        REQUIRE(result.models.size() == 4);

        for (std::size_t m = 1; m < 4; ++m) {
            std::set<std::string> vars;
            for (const auto& col : result.models[m].fit.columns)
                if (col.kind != dataset::ColumnKind::intercept) vars.insert(col.variable);
            CHECK(vars == std::set<std::string>{"Active"});
        }
        CHECK_FALSE(result.trace.empty());
        for (const auto& d : result.trace) CHECK(d.p > 0.10);
    }

    SECTION("no signal: model 4 collapses to about the null model") {
        synth::SynthConfig config;
        config.n_zones = 40;
        config.households_per_zone = {3, 3};
        config.persons_per_household = {2, 2};
        config.sd_zone = 1.0;
        config.sd_hh = 1.0;
        config.sd_resid = 2.0;
        config.intercept = 8.0;
        config.seed = 99;
        config.variables.push_back(
            numeric_var("Noise1", dataset::VariableLevel::person, 0.0, 5.0));
        config.variables.push_back(numeric_var("NoiseBE", dataset::VariableLevel::zone, 0.0, 5.0));
        const auto [wave, truth] = synth::generate(config);

        const auto result = mlm::stepwise_build(wave, {}, {"NoiseBE"}, 0.10, {});
        const double aic1 = result.models[0].stats.aic;
        const double aic4 = result.models[3].stats.aic;
        CHECK(std::abs(aic4 - aic1) <=
              2.0 * static_cast<double>(result.models[3].fit.k_params));
    }

    SECTION("piecewise BE truth: AIC strictly improves across the four models") {
        synth::SynthConfig config;
        config.n_zones = 80;
        config.households_per_zone = {3, 3};
        config.persons_per_household = {2, 2};
        config.sd_zone = 1.0;
        config.sd_hh = 2.0;
        config.sd_resid = 4.0;
        config.intercept = 30.0;
        config.seed = 7;
        config.variables.push_back(
            numeric_var("AgeLike", dataset::VariableLevel::person, 0.0, 10.0, {}, {0.8}));
        config.variables.push_back(numeric_var("DistLike", dataset::VariableLevel::household, 0.0,
                                               25.0, {5.0, 15.0}, {2.5, -1.0, 1.5}));
        const auto [wave, truth] = synth::generate(config);

        const auto result = mlm::stepwise_build(wave, truth.knots, {"DistLike"}, 0.10, {});
        CHECK(result.models[3].stats.aic < result.models[2].stats.aic);
        CHECK(result.models[2].stats.aic < result.models[1].stats.aic);
        CHECK(result.models[1].stats.aic < result.models[0].stats.aic);

        SECTION("elasticity table covers the BE segments with stars from wald") {
            const auto table = mlm::elasticity_table(result.models[3].fit, wave, {"DistLike"});
            REQUIRE(table.size() == 3);
            const double mean_x = mean(wave.joined_numeric("DistLike"));
            const double mean_y = mean(wave.response);
            for (const auto& row : table) {
                CHECK(row.mean_x == Approx(mean_x));
                CHECK(row.mean_y == Approx(mean_y));
                CHECK(row.elasticity ==
                      Approx(row.beta * mean_x / mean_y).epsilon(1e-12));
            }
            CHECK(table[0].label == "DistLike [0-5]");
            CHECK(table[1].label == "DistLike [5-15]");
            CHECK(table[2].label == "DistLike [>15]");
        }
    }
}

TEST_CASE("fit_stats ordering invariant on real fits") {
    synth::SynthConfig config;
    config.n_zones = 30;
    config.households_per_zone = {2, 3};
    config.persons_per_household = {1, 3};
    config.sd_zone = 1.0;
    config.sd_hh = 1.5;
    config.sd_resid = 3.0;
    config.intercept = 12.0;
    config.seed = 13;
    config.variables.push_back(
        numeric_var("x", dataset::VariableLevel::person, 0.0, 8.0, {}, {0.7}));
    const auto [wave, truth] = synth::generate(config);
    const auto design = dataset::build_design(wave, {{"x", true}}, {});
    const auto fit = mlm::fit_lmm(design, {});
    const auto stats = mlm::fit_stats(fit);
    CHECK(stats.r2_marginal >= 0.0);
    CHECK(stats.r2_marginal <= stats.r2_conditional);
    CHECK(stats.r2_conditional <= 1.0);

    // Intercept-only model: marginal exactly 0.
    const auto null_design = dataset::build_design(wave, {}, {});
    const auto null_fit = mlm::fit_lmm(null_design, {});
    CHECK(mlm::fit_stats(null_fit).r2_marginal == 0.0);
}
