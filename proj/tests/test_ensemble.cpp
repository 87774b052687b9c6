#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "thresher/ensemble.hpp"
#include "oracles.hpp"

using namespace thresher;
using namespace thresher::ensemble;
using Catch::Approx;

namespace {

Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
    Matrix m(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
    return m;
}

std::vector<std::vector<double>> random_rows(Rng& rng, std::size_t n, std::size_t p) {
    std::vector<std::vector<double>> rows(n, std::vector<double>(p));
    for (auto& r : rows)
        for (auto& v : r) v = rng.uniform(-3.0, 3.0);
    return rows;
}

}  // namespace

TEST_CASE("gbdt on constant response predicts the constant") {
    Rng rng(1);
    const auto rows = random_rows(rng, 30, 3);
    const std::vector<double> y(30, 7.0);
    GbdtParams params;
    params.n_estimators = 25;
    params.max_depth = 3;
    params.seed = 5;
    const auto model = fit_gbdt(to_matrix(rows), y, params);
    for (const double p : predict(model, to_matrix(rows))) CHECK(p == Approx(7.0));
}

TEST_CASE("gbdt stumps fit a step function, matching a per-iteration oracle") {
    // 20-row fixture, y = step(x > 3).
    std::vector<std::vector<double>> rows;
    std::vector<double> y;
    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
        const double x = 0.3 * i + rng.uniform01() * 0.1;
        rows.push_back({x});
        y.push_back(x > 3.0 ? 1.0 : 0.0);
    }
    const Matrix X = to_matrix(rows);

    GbdtParams params;
    params.n_estimators = 200;
    params.learning_rate = 0.1;
    params.max_depth = 1;
    params.seed = 0;
    const auto model = fit_gbdt(X, y, params);

    const auto pred = predict(model, X);
    double mse = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) mse += (y[i] - pred[i]) * (y[i] - pred[i]);
    mse /= static_cast<double>(y.size());
    CHECK(mse < 1e-3);

    // Independent boosting oracle: exhaustive single-split stump fitted to
    // residuals each round.
    std::vector<double> oracle_pred(y.size());
    double base = 0.0;
    for (double v : y) base += v;
    base /= static_cast<double>(y.size());
    std::fill(oracle_pred.begin(), oracle_pred.end(), base);
    REQUIRE(model.base_prediction == Approx(base));

    for (int t = 0; t < params.n_estimators; ++t) {
        std::vector<double> residual(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) residual[i] = y[i] - oracle_pred[i];
        const auto split = oracles::brute_force_split(rows, residual, {0}, 1);
        REQUIRE(split.feature == 0);

        // The library's tree for this round must pick the same threshold.
        const auto& tree = model.trees[t];
        REQUIRE_FALSE(tree.nodes[0].is_leaf());
        CHECK(tree.nodes[0].threshold == Approx(split.threshold).margin(1e-12));

        double left_sum = 0, right_sum = 0;
        int left_n = 0, right_n = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (rows[i][0] <= split.threshold) {
                left_sum += residual[i];
                ++left_n;
            } else {
                right_sum += residual[i];
                ++right_n;
            }
        }
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double leaf = rows[i][0] <= split.threshold ? left_sum / left_n
                                                              : right_sum / right_n;
            oracle_pred[i] += params.learning_rate * leaf;
        }
    }
    for (std::size_t i = 0; i < y.size(); ++i)
        CHECK(pred[i] == Approx(oracle_pred[i]).margin(1e-9));
}

TEST_CASE("gbdt parameter validation and shrinkage limit") {
    Matrix X(4, 1);
    for (int i = 0; i < 4; ++i) X(i, 0) = i;
    const std::vector<double> y{0, 1, 2, 3};

    GbdtParams bad;
    bad.n_estimators = 0;
    CHECK_THROWS_AS(fit_gbdt(X, y, bad), std::invalid_argument);

    // learning_rate -> 0 with few trees leaves predictions at mean(y).
    GbdtParams tiny;
    tiny.n_estimators = 3;
    tiny.learning_rate = 1e-9;
    const auto model = fit_gbdt(X, y, tiny);
    for (const double p : predict(model, X)) CHECK(p == Approx(1.5).margin(1e-6));
}

TEST_CASE("rf reproduces an exhaustive CART tree when bootstrap is disabled") {
    Rng rng(21);
    const auto rows = random_rows(rng, 15, 3);
    std::vector<double> y;
    for (const auto& r : rows) y.push_back(r[0] * 2.0 - r[2] + rng.normal() * 0.2);

    RfParams params;
    params.n_trees = 1;
    params.max_depth = 10;
    params.max_features = MaxFeatures::all;
    params.bootstrap = false;
    params.seed = 2;
    const auto model = fit_rf(to_matrix(rows), y, params);

    oracles::BruteTree oracle;
    std::vector<std::size_t> all(rows.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    oracle.grow(rows, y, all, 0, params.max_depth, params.min_samples_leaf);

    for (const auto& r : rows) {
        const double ours = model.predict_row(r.data(), r.size());
        CHECK(ours == Approx(oracle.predict(r)).margin(1e-12));
    }

    // Split optimality at the root, by exhaustive scan.
    const auto split = oracles::brute_force_split(rows, y, {0, 1, 2}, 1);
    CHECK(model.trees[0].nodes[0].feature == split.feature);
    CHECK(model.trees[0].nodes[0].threshold == Approx(split.threshold).margin(1e-12));
    CHECK(model.trees[0].nodes[0].gain == Approx(split.gain).epsilon(1e-8));
}

TEST_CASE("rf: constant response, seed variation, determinism") {
    Rng rng(3);
    const auto rows = random_rows(rng, 40, 2);

    SECTION("constant y") {
        const std::vector<double> y(40, 3.25);
        RfParams params;
        params.n_trees = 7;
        params.seed = 1;
        const auto model = fit_rf(to_matrix(rows), y, params);
        for (const double p : predict(model, to_matrix(rows))) CHECK(p == Approx(3.25));
    }

    SECTION("two seeds differ but both fit a smooth target well") {
        Rng gen(17);
        std::vector<std::vector<double>> xs;
        std::vector<double> y;
        for (int i = 0; i < 500; ++i) {
            const double a = gen.uniform(-2, 2), b = gen.uniform(-2, 2);
            xs.push_back({a, b});
            y.push_back(std::sin(a) * 2.0 + b * b + 0.05 * gen.normal());
        }
        RfParams params;
        params.n_trees = 60;
        params.max_depth = 12;
        params.max_features = MaxFeatures::all;
        params.seed = 100;
        const auto m1 = fit_rf(to_matrix(xs), y, params);
        params.seed = 200;
        const auto m2 = fit_rf(to_matrix(xs), y, params);

        const auto r1 = test_metrics(y, predict(m1, to_matrix(xs)));
        const auto r2 = test_metrics(y, predict(m2, to_matrix(xs)));
        CHECK(r1.r2 > 0.8);
        CHECK(r2.r2 > 0.8);
        // Different bootstrap draws -> different trees.
        CHECK(predict(m1, to_matrix(xs)) != predict(m2, to_matrix(xs)));
    }

    SECTION("bit-identical predictions regardless of jobs") {
        std::vector<double> y;
        for (const auto& r : rows) y.push_back(r[0] - r[1]);
        RfParams params;
        params.n_trees = 24;
        params.seed = 5;
        params.jobs = 1;
        const auto serial = predict(fit_rf(to_matrix(rows), y, params), to_matrix(rows));
        params.jobs = 4;
        const auto parallel = predict(fit_rf(to_matrix(rows), y, params), to_matrix(rows));
        CHECK(serial == parallel);  // exact equality
    }
}

TEST_CASE("predict combination rules") {
    SECTION("rf mean of identical single-leaf trees") {
        EnsembleModel model;
        model.kind = EnsembleKind::rf;
        model.n_features = 1;
        Tree leaf;
        leaf.nodes.push_back({-1, 0.0, 2.0, 0.0, -1, -1});
        model.trees = {leaf, leaf, leaf};
        Matrix X(1, 1);
        CHECK(predict(model, X)[0] == Approx(2.0));
    }

    SECTION("gbdt with zero trees returns the base prediction") {
        EnsembleModel model;
        model.kind = EnsembleKind::gbdt;
        model.n_features = 2;
        model.base_prediction = -1.5;
        Matrix X(3, 2);
        for (const double p : predict(model, X)) CHECK(p == Approx(-1.5));
    }

    SECTION("width mismatch") {
        EnsembleModel model;
        model.kind = EnsembleKind::gbdt;
        model.n_features = 2;
        Matrix X(1, 3);
        CHECK_THROWS_AS(predict(model, X), std::invalid_argument);
    }

    SECTION("fixture model matches a hand tree walk") {
        // x0 <= 1 -> 10; else (x1 <= 0 -> 20, else 30)
        Tree tree;
        tree.nodes.push_back({0, 1.0, 0.0, 0.0, 1, 2});
        tree.nodes.push_back({-1, 0.0, 10.0, 0.0, -1, -1});
        tree.nodes.push_back({1, 0.0, 0.0, 0.0, 3, 4});
        tree.nodes.push_back({-1, 0.0, 20.0, 0.0, -1, -1});
        tree.nodes.push_back({-1, 0.0, 30.0, 0.0, -1, -1});
        EnsembleModel model;
        model.kind = EnsembleKind::gbdt;
        model.base_prediction = 1.0;
        model.learning_rate = 0.5;
        model.n_features = 2;
        model.trees = {tree};

        Rng rng(8);
        for (int i = 0; i < 10; ++i) {
            const double x0 = rng.uniform(-2, 4), x1 = rng.uniform(-2, 2);
            const double leaf = x0 <= 1.0 ? 10.0 : (x1 <= 0.0 ? 20.0 : 30.0);
            const double row[2] = {x0, x1};
            CHECK(model.predict_row(row, 2) == Approx(1.0 + 0.5 * leaf));
        }
    }
}

TEST_CASE("split_train_test") {
    const auto s = split_train_test(10, 0.2, 42);
    CHECK(s.test.size() == 2);
    CHECK(s.train.size() == 8);

    const auto s2 = split_train_test(10, 0.2, 42);
    CHECK(s.test == s2.test);
    CHECK(s.train == s2.train);

    SECTION("partitions are disjoint and exhaustive over random n") {
        Rng rng(6);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t n = 2 + rng.uniform_index(400);
            const auto split = split_train_test(n, 0.2, trial);
            std::vector<bool> seen(n, false);
            for (std::size_t i : split.train) {
                CHECK_FALSE(seen[i]);
                seen[i] = true;
            }
            for (std::size_t i : split.test) {
                CHECK_FALSE(seen[i]);
                seen[i] = true;
            }
            CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
            CHECK(split.test.size() == std::max<std::size_t>(
                                           1, static_cast<std::size_t>(std::floor(0.2 * n))));
        }
    }

    CHECK_THROWS_AS(split_train_test(10, 0.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_train_test(10, 1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_train_test(1, 0.5, 1), std::invalid_argument);
}

TEST_CASE("test_metrics") {
    CHECK(test_metrics({1, 2, 3}, {1, 2, 3}).rmse == Approx(0.0));
    CHECK(test_metrics({1, 2, 3}, {1, 2, 3}).r2 == Approx(1.0));

    // Predicting the mean gives r2 = 0.
    const auto at_mean = test_metrics({1, 2, 3, 4}, {2.5, 2.5, 2.5, 2.5});
    CHECK(at_mean.r2 == Approx(0.0).margin(1e-15));

    const auto m = test_metrics({1, 2, 3, 4}, {1, 2, 3, 6});
    CHECK(m.rmse == Approx(1.0));
    CHECK(m.r2 == Approx(0.2));

    CHECK_THROWS_AS(test_metrics({1, 1, 1}, {1, 2, 3}), std::invalid_argument);
    CHECK_THROWS_AS(test_metrics({1, 2}, {1}), std::invalid_argument);
}

TEST_CASE("cv_folds and grid_search_cv") {
    SECTION("folds partition the data") {
        const auto folds = cv_folds(23, 5, 9);
        std::vector<bool> seen(23, false);
        for (const auto& fold : folds)
            for (std::size_t i : fold) {
                CHECK_FALSE(seen[i]);
                seen[i] = true;
            }
        CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
    }

    Rng rng(30);
    const auto rows = random_rows(rng, 20, 2);
    std::vector<double> y;
    for (const auto& r : rows) y.push_back(r[0] * r[0] * 3.0 + 0.1 * rng.normal());
    const Matrix X = to_matrix(rows);

    SECTION("single candidate returns it with a 1-row table") {
        GbdtParams only;
        only.n_estimators = 20;
        only.max_depth = 2;
        only.seed = 4;
        const auto result = grid_search_cv<GbdtParams>(X, y, {only}, 4, 11);
        CHECK(result.best_index == 0);
        CHECK(result.table.size() == 1);
        CHECK(result.table[0].fold_mse.size() == 4);
    }

    SECTION("a depth-capable candidate beats a mean-like candidate on a nonlinear target") {
        GbdtParams shallow;  // learning_rate -> 0 stays at the mean
        shallow.n_estimators = 1;
        shallow.learning_rate = 1e-9;
        shallow.seed = 4;
        GbdtParams deep;
        deep.n_estimators = 150;
        deep.learning_rate = 0.2;
        deep.max_depth = 3;
        deep.seed = 4;
        const auto result = grid_search_cv<GbdtParams>(X, y, {shallow, deep}, 4, 11);
        CHECK(result.best_index == 1);
        // Direct evaluation: the deep candidate's mean MSE must be smaller.
        CHECK(result.table[1].mean_mse < result.table[0].mean_mse);
    }

    SECTION("every table entry equals a manually computed fold MSE") {
        std::vector<GbdtParams> grid;
        for (int depth : {1, 2})
            for (double lr : {0.1, 0.3}) {
                GbdtParams p;
                p.n_estimators = 30;
                p.learning_rate = lr;
                p.max_depth = depth;
                p.seed = 4;
                grid.push_back(p);
            }
        const int k = 2;
        const std::uint64_t seed = 77;
        const auto result = grid_search_cv(X, y, grid, k, seed);
        CHECK(result.table.size() == 4);

        const auto folds = cv_folds(X.rows(), k, seed);
        for (std::size_t c = 0; c < grid.size(); ++c) {
            double mean_mse = 0.0;
            for (int f = 0; f < k; ++f) {
                std::vector<std::size_t> train;
                std::vector<bool> in_fold(X.rows(), false);
                for (std::size_t i : folds[f]) in_fold[i] = true;
                for (std::size_t i = 0; i < X.rows(); ++i)
                    if (!in_fold[i]) train.push_back(i);
                Matrix xt = X.select_rows(train);
                std::vector<double> yt;
                for (std::size_t i : train) yt.push_back(y[i]);
                const auto model = fit_gbdt(xt, yt, grid[c]);
                double sse = 0.0;
                for (std::size_t i : folds[f]) {
                    const double e = y[i] - model.predict_row(X.row_ptr(i), X.cols());
                    sse += e * e;
                }
                const double fold_mse = sse / static_cast<double>(folds[f].size());
                CHECK(result.table[c].fold_mse[f] == Approx(fold_mse).margin(1e-12));
                mean_mse += fold_mse;
            }
            CHECK(result.table[c].mean_mse == Approx(mean_mse / k).margin(1e-12));
        }

        // Best candidate attains the table minimum; jobs do not change it.
        double min_mse = result.table[0].mean_mse;
        for (const auto& e : result.table) min_mse = std::min(min_mse, e.mean_mse);
        CHECK(result.table[result.best_index].mean_mse == min_mse);

        const auto parallel = grid_search_cv(X, y, grid, k, seed, 4);
        CHECK(parallel.best_index == result.best_index);
        for (std::size_t c = 0; c < grid.size(); ++c)
            CHECK(parallel.table[c].fold_mse == result.table[c].fold_mse);
    }

    SECTION("empty grid and undersized folds are rejected") {
        CHECK_THROWS_AS(grid_search_cv<GbdtParams>(X, y, {}, 4, 1), std::invalid_argument);
        GbdtParams p;
        p.min_samples_leaf = 50;
        CHECK_THROWS_AS(grid_search_cv<GbdtParams>(X, y, {p}, 4, 1), std::invalid_argument);
    }
}

TEST_CASE("gbdt training loss is non-increasing in iteration count") {
    Rng rng(51);
    const auto rows = random_rows(rng, 120, 3);
    std::vector<double> y;
    for (const auto& r : rows) y.push_back(r[0] + std::abs(r[1]) + 0.3 * rng.normal());
    const Matrix X = to_matrix(rows);

    GbdtParams params;
    params.n_estimators = 80;
    params.learning_rate = 0.15;
    params.max_depth = 2;
    params.subsample = 0.8;
    params.seed = 12;
    const auto model = fit_gbdt(X, y, params);

    std::vector<double> pred(y.size(), model.base_prediction);
    double previous = std::numeric_limits<double>::infinity();
    for (const auto& tree : model.trees) {
        for (std::size_t i = 0; i < y.size(); ++i)
            pred[i] += params.learning_rate * tree.predict_row(X.row_ptr(i));
        double mse = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) mse += (y[i] - pred[i]) * (y[i] - pred[i]);
        CHECK(mse <= previous + 1e-9);
        previous = mse;
    }
}

TEST_CASE("impurity importance") {
    Rng rng(61);
    const auto rows = random_rows(rng, 300, 3);

    SECTION("single informative feature takes the whole share") {
        std::vector<double> y;
        for (const auto& r : rows) y.push_back(r[0] * 4.0);
        GbdtParams params;
        params.n_estimators = 30;
        params.max_depth = 3;
        params.seed = 3;
        const auto model = fit_gbdt(to_matrix(rows), y, params);
        const auto shares = impurity_importance(model);
        CHECK(shares[0] == Approx(1.0));
        CHECK(shares[1] == 0.0);
        CHECK(shares[2] == 0.0);
    }

    SECTION("shares are nonnegative and sum to 1") {
        std::vector<double> y;
        for (const auto& r : rows) y.push_back(r[0] + r[1] - r[2] + 0.2 * rng.normal());
        GbdtParams params;
        params.n_estimators = 40;
        params.max_depth = 3;
        params.max_features = MaxFeatures::sqrt_of;
        params.seed = 3;
        const auto shares = impurity_importance(fit_gbdt(to_matrix(rows), y, params));
        double total = 0.0;
        for (double s : shares) {
            CHECK(s >= 0.0);
            total += s;
        }
        CHECK(total == Approx(1.0).margin(1e-12));
    }

    SECTION("symmetric additive target splits importance about evenly") {
        Rng gen(71);
        std::vector<std::vector<double>> xs;
        std::vector<double> y;
        for (int i = 0; i < 4000; ++i) {
            const double a = gen.uniform(-1, 1), b = gen.uniform(-1, 1);
            xs.push_back({a, b});
            y.push_back(a + b);
        }
        GbdtParams params;
        params.n_estimators = 60;
        params.learning_rate = 0.2;
        params.max_depth = 3;
        params.seed = 8;
        const auto shares = impurity_importance(fit_gbdt(to_matrix(xs), y, params));
        CHECK(shares[0] == Approx(0.5).margin(0.05));
        CHECK(shares[1] == Approx(0.5).margin(0.05));
    }

    SECTION("a stump-free model is an error") {
        EnsembleModel model;
        model.kind = EnsembleKind::rf;
        model.n_features = 2;
        Tree leaf;
        leaf.nodes.push_back({-1, 0.0, 1.0, 0.0, -1, -1});
        model.trees = {leaf};
        CHECK_THROWS_AS(impurity_importance(model), std::invalid_argument);
    }
}

TEST_CASE("split optimality on random <=50-row fixtures") {
    Rng rng(81);
    for (int trial = 0; trial < 15; ++trial) {
        const std::size_t n = 10 + rng.uniform_index(41);
        const auto rows = random_rows(rng, n, 4);
        std::vector<double> y;
        for (const auto& r : rows)
            y.push_back(r[0] * 1.5 - r[2] * r[2] + 0.4 * rng.normal());

        RfParams params;
        params.n_trees = 1;
        params.max_depth = 4;
        params.max_features = MaxFeatures::all;
        params.bootstrap = false;
        params.min_samples_leaf = 2;
        params.seed = static_cast<std::uint64_t>(trial);
        const auto model = fit_rf(to_matrix(rows), y, params);

        // Verify every internal node's split is optimal for the rows that
        // reach it, by exhaustive scan.
        struct Pending {
            int node;
            std::vector<std::size_t> rows;
        };
        std::vector<Pending> stack{{0, {}}};
        stack[0].rows.resize(n);
        for (std::size_t i = 0; i < n; ++i) stack[0].rows[i] = i;

        const auto& tree = model.trees[0];
        while (!stack.empty()) {
            Pending item = stack.back();
            stack.pop_back();
            const auto& node = tree.nodes[item.node];
            if (node.is_leaf()) continue;

            std::vector<std::vector<double>> sub_x;
            std::vector<double> sub_y;
            for (std::size_t r : item.rows) {
                sub_x.push_back(rows[r]);
                sub_y.push_back(y[r]);
            }
            const auto best = oracles::brute_force_split(sub_x, sub_y, {0, 1, 2, 3},
                                                         params.min_samples_leaf);
            // The chosen split must attain the oracle's maximum gain. Two
            // splits can tie exactly (same induced partition), in which case
            // the winning (feature, threshold) is arbitrary at float noise;
            // identity is only required when the optimum is unique.
            std::vector<double> left_y, right_y;
            for (std::size_t i = 0; i < sub_x.size(); ++i)
                (sub_x[i][node.feature] <= node.threshold ? left_y : right_y).push_back(sub_y[i]);
            const double chosen_gain = oracles::sse_of(sub_y) - oracles::sse_of(left_y) -
                                       oracles::sse_of(right_y);
            CHECK(chosen_gain == Approx(best.gain).epsilon(1e-8).margin(1e-9));
            CHECK(node.gain == Approx(best.gain).epsilon(1e-8).margin(1e-9));
            if (chosen_gain < best.gain * (1.0 - 1e-6)) {
                CHECK(node.feature == best.feature);
                CHECK(node.threshold == Approx(best.threshold).margin(1e-12));
            }

            Pending left{node.left, {}}, right{node.right, {}};
            for (std::size_t r : item.rows)
                (rows[r][node.feature] <= node.threshold ? left.rows : right.rows).push_back(r);
            stack.push_back(left);
            stack.push_back(right);
        }
    }
}

TEST_CASE("model save/load round-trip preserves predictions exactly") {
    Rng rng(91);
    const auto rows = random_rows(rng, 60, 3);
    std::vector<double> y;
    for (const auto& r : rows) y.push_back(r[0] - 2.0 * r[1] + 0.1 * rng.normal());

    GbdtParams params;
    params.n_estimators = 25;
    params.max_depth = 3;
    params.subsample = 0.7;
    params.seed = 14;
    const auto model = fit_gbdt(to_matrix(rows), y, params, {"a", "b", "c"});

    const std::string path = (std::filesystem::temp_directory_path() /
                              ("thresher_model_" + std::to_string(::getpid()) + ".json"))
                                 .string();
    save_model(model, path);
    const auto loaded = load_model(path);
    std::filesystem::remove(path);

    CHECK(loaded.feature_names == model.feature_names);
    const auto before = predict(model, to_matrix(rows));
    const auto after = predict(loaded, to_matrix(rows));
    CHECK(before == after);  // exact, shortest round-trip doubles
}
