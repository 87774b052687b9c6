#ifndef THRESHER_ENSEMBLE_HPP
#define THRESHER_ENSEMBLE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "thresher/core.hpp"

namespace thresher::ensemble {

// ---------------------------------------------------------------------------
// Regression trees. Nodes live in a flat vector; feature < 0 marks a leaf.
// Rows with feature value <= threshold go left.
// ---------------------------------------------------------------------------
struct TreeNode {
    int feature = -1;
    double threshold = 0.0;
    double value = 0.0;  // leaf prediction (mean of training targets)
    double gain = 0.0;   // impurity (SSE) decrease recorded at internal nodes
    int left = -1;
    int right = -1;

    bool is_leaf() const { return feature < 0; }
};

struct Tree {
    std::vector<TreeNode> nodes;

    double predict_row(const double* row) const {
        int i = 0;
        while (!nodes[i].is_leaf())
            i = row[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
        return nodes[i].value;
    }
};

enum class MaxFeatures { all, sqrt_of, log2_of, fraction };

inline std::string to_string(MaxFeatures mf) {
    switch (mf) {
        case MaxFeatures::all: return "all";
        case MaxFeatures::sqrt_of: return "sqrt";
        case MaxFeatures::log2_of: return "log2";
        case MaxFeatures::fraction: return "fraction";
    }
    return "?";
}

inline MaxFeatures max_features_from_string(const std::string& s) {
    if (s == "all" || s == "auto" || s == "none") return MaxFeatures::all;
    if (s == "sqrt") return MaxFeatures::sqrt_of;
    if (s == "log2") return MaxFeatures::log2_of;
    if (s == "fraction") return MaxFeatures::fraction;
    throw std::invalid_argument("unknown max_features '" + s + "'");
}

inline std::size_t resolve_max_features(MaxFeatures mf, double fraction, std::size_t n_features) {
    std::size_t k = n_features;
    switch (mf) {
        case MaxFeatures::all: k = n_features; break;
        case MaxFeatures::sqrt_of:
            k = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_features))));
            break;
        case MaxFeatures::log2_of:
            k = static_cast<std::size_t>(std::ceil(std::log2(static_cast<double>(n_features))));
            break;
        case MaxFeatures::fraction:
            if (!(fraction > 0.0 && fraction <= 1.0))
                throw std::invalid_argument("feature fraction must lie in (0, 1]");
            k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n_features)));
            break;
    }
    return std::clamp<std::size_t>(k, 1, n_features);
}

struct GbdtParams {
    int n_estimators = 100;
    double learning_rate = 0.1;
    int max_depth = 3;
    MaxFeatures max_features = MaxFeatures::all;
    double feature_fraction = 1.0;
    double subsample = 1.0;
    int min_samples_leaf = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_estimators < 1) throw std::invalid_argument("n_estimators must be >= 1");
        if (!(learning_rate > 0.0 && learning_rate <= 1.0))
            throw std::invalid_argument("learning_rate must lie in (0, 1]");
        if (max_depth < 1) throw std::invalid_argument("max_depth must be >= 1");
        if (!(subsample > 0.0 && subsample <= 1.0))
            throw std::invalid_argument("subsample must lie in (0, 1]");
        if (min_samples_leaf < 1) throw std::invalid_argument("min_samples_leaf must be >= 1");
    }
};

struct RfParams {
    int n_trees = 100;
    int max_depth = 25;
    MaxFeatures max_features = MaxFeatures::sqrt_of;
    double feature_fraction = 1.0;
    int min_samples_leaf = 1;
    std::uint64_t seed = 0;
    double bootstrap_fraction = 1.0;
    bool bootstrap = true;  // test hook: false trains every tree on the full data
    unsigned jobs = 1;

    void validate() const {
        if (n_trees < 1) throw std::invalid_argument("n_trees must be >= 1");
        if (max_depth < 1) throw std::invalid_argument("max_depth must be >= 1");
        if (min_samples_leaf < 1) throw std::invalid_argument("min_samples_leaf must be >= 1");
        if (!(bootstrap_fraction > 0.0 && bootstrap_fraction <= 1.0))
            throw std::invalid_argument("bootstrap_fraction must lie in (0, 1]");
    }
};

enum class EnsembleKind { gbdt, rf };

struct EnsembleModel {
    EnsembleKind kind = EnsembleKind::gbdt;
    std::vector<Tree> trees;
    double base_prediction = 0.0;  // gbdt only
    double learning_rate = 1.0;   // gbdt only
    std::size_t n_features = 0;
    std::vector<std::string> feature_names;
    std::optional<GbdtParams> gbdt_params;
    std::optional<RfParams> rf_params;

    double predict_row(const double* row, std::size_t n) const {
        if (n != n_features) throw std::invalid_argument("predict: feature width mismatch");
        if (kind == EnsembleKind::gbdt) {
            double p = base_prediction;
            for (const auto& t : trees) p += learning_rate * t.predict_row(row);
            return p;
        }
        double sum = 0.0;
        for (const auto& t : trees) sum += t.predict_row(row);
        return sum / static_cast<double>(trees.size());
    }
};

// ---------------------------------------------------------------------------
// Tree construction. Splits scan midpoints of consecutive sorted unique
// values; gain ties break to (lower feature index, lower threshold).
// ---------------------------------------------------------------------------
namespace detail {

struct SplitChoice {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

// Best split on one feature among the node's rows; invalid result keeps
// feature = -1. Rows arrive in a deterministic order.
inline void scan_feature(const Matrix& X, const std::vector<double>& targets,
                         const std::vector<std::size_t>& rows, int feature,
                         int min_samples_leaf,
                         std::vector<std::pair<double, double>>& scratch, SplitChoice& best) {
    const std::size_t m = rows.size();
    scratch.clear();
    scratch.reserve(m);
    for (std::size_t r : rows) scratch.push_back({X(r, feature), targets[r]});
    std::sort(scratch.begin(), scratch.end());

    double total = 0.0;
    for (const auto& [x, t] : scratch) total += t;

    // SSE(parent) - SSE(left) - SSE(right) = L^2/nl + R^2/nr - T^2/m where
    // L, R, T are target sums; maximizing the first two terms suffices.
    const double parent_term = total * total / static_cast<double>(m);
    double left_sum = 0.0;
    for (std::size_t i = 0; i + 1 < m; ++i) {
        left_sum += scratch[i].second;
        if (scratch[i].first == scratch[i + 1].first) continue;  // not a boundary
        const std::size_t nl = i + 1, nr = m - nl;
        if (nl < static_cast<std::size_t>(min_samples_leaf) ||
            nr < static_cast<std::size_t>(min_samples_leaf))
            continue;
        const double right_sum = total - left_sum;
        const double gain = left_sum * left_sum / static_cast<double>(nl) +
                            right_sum * right_sum / static_cast<double>(nr) - parent_term;
        const double threshold = scratch[i].first + 0.5 * (scratch[i + 1].first - scratch[i].first);
        if (gain > best.gain ||
            (gain == best.gain && best.feature >= 0 &&
             (feature < best.feature || (feature == best.feature && threshold < best.threshold)))) {
            best.feature = feature;
            best.threshold = threshold;
            best.gain = gain;
        }
    }
}

struct TreeBuilder {
    const Matrix& X;
    const std::vector<double>& targets;
    int max_depth;
    int min_samples_leaf;
    std::size_t max_features;
    Rng& rng;
    Tree tree;
    std::vector<std::pair<double, double>> scratch;
    std::vector<int> feature_pool;

    TreeBuilder(const Matrix& x, const std::vector<double>& t, int depth, int min_leaf,
                std::size_t max_feat, Rng& r)
        : X(x), targets(t), max_depth(depth), min_samples_leaf(min_leaf),
          max_features(max_feat), rng(r) {
        feature_pool.resize(X.cols());
        for (std::size_t j = 0; j < X.cols(); ++j) feature_pool[j] = static_cast<int>(j);
    }

    int build(std::vector<std::size_t>& rows, int depth) {
        const std::size_t m = rows.size();
        double sum = 0.0, sumsq = 0.0;
        for (std::size_t r : rows) {
            sum += targets[r];
            sumsq += targets[r] * targets[r];
        }
        const double node_mean = sum / static_cast<double>(m);
        const double node_sse = sumsq - sum * sum / static_cast<double>(m);

        const int index = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({});
        tree.nodes[index].value = node_mean;

        if (depth >= max_depth || m < 2 * static_cast<std::size_t>(min_samples_leaf) ||
            node_sse <= 0.0)
            return index;

        // Sample the feature subset for this node (partial Fisher-Yates,
        // then sorted so the scan order is by feature index).
        std::vector<int> sampled;
        if (max_features >= X.cols()) {
            sampled = feature_pool;
        } else {
            for (std::size_t i = 0; i < max_features; ++i) {
                const std::size_t j = i + rng.uniform_index(feature_pool.size() - i);
                std::swap(feature_pool[i], feature_pool[j]);
            }
            sampled.assign(feature_pool.begin(), feature_pool.begin() +
                                                     static_cast<std::ptrdiff_t>(max_features));
            std::sort(sampled.begin(), sampled.end());
        }

        SplitChoice best;
        for (int f : sampled)
            scan_feature(X, targets, rows, f, min_samples_leaf, scratch, best);

        if (best.feature < 0 || best.gain <= 0.0) return index;

        std::vector<std::size_t> left_rows, right_rows;
        left_rows.reserve(m);
        right_rows.reserve(m);
        for (std::size_t r : rows)
            (X(r, best.feature) <= best.threshold ? left_rows : right_rows).push_back(r);

        rows.clear();
        rows.shrink_to_fit();

        tree.nodes[index].feature = best.feature;
        tree.nodes[index].threshold = best.threshold;
        tree.nodes[index].gain = best.gain;
        const int left = build(left_rows, depth + 1);
        tree.nodes[index].left = left;
        const int right = build(right_rows, depth + 1);
        tree.nodes[index].right = right;
        return index;
    }
};

inline Tree build_tree(const Matrix& X, const std::vector<double>& targets,
                       std::vector<std::size_t> rows, int max_depth, int min_samples_leaf,
                       std::size_t max_features, Rng& rng) {
    TreeBuilder builder(X, targets, max_depth, min_samples_leaf, max_features, rng);
    builder.build(rows, 0);
    return std::move(builder.tree);
}

inline void check_training_data(const Matrix& X, const std::vector<double>& y,
                                int min_samples_leaf) {
    if (X.rows() == 0 || X.cols() == 0) throw std::invalid_argument("empty training data");
    if (X.rows() != y.size()) throw std::invalid_argument("X/y row mismatch");
    if (X.rows() < 2 * static_cast<std::size_t>(min_samples_leaf))
        throw std::invalid_argument("need at least 2*min_samples_leaf rows");
    for (std::size_t i = 0; i < y.size(); ++i)
        if (!std::isfinite(y[i])) throw std::invalid_argument("non-finite response value");
    for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t j = 0; j < X.cols(); ++j)
            if (!std::isfinite(X(i, j))) throw std::invalid_argument("non-finite feature value");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient boosting with squared-error loss: each tree fits the residuals of
// the running prediction on a per-iteration row subsample drawn without
// replacement.
// ---------------------------------------------------------------------------
inline EnsembleModel fit_gbdt(const Matrix& X, const std::vector<double>& y,
                              const GbdtParams& params,
                              std::vector<std::string> feature_names = {}) {
    params.validate();
    detail::check_training_data(X, y, params.min_samples_leaf);

    const std::size_t n = X.rows();
    EnsembleModel model;
    model.kind = EnsembleKind::gbdt;
    model.gbdt_params = params;
    model.learning_rate = params.learning_rate;
    model.n_features = X.cols();
    model.feature_names = std::move(feature_names);

    double base = 0.0;
    for (double v : y) base += v;
    base /= static_cast<double>(n);
    model.base_prediction = base;

    std::vector<double> pred(n, base), residual(n);
    const std::size_t max_feat =
        resolve_max_features(params.max_features, params.feature_fraction, X.cols());
    const Rng root(params.seed);

    std::vector<std::size_t> all_rows(n);
    for (std::size_t i = 0; i < n; ++i) all_rows[i] = i;

    model.trees.reserve(params.n_estimators);
    for (int t = 0; t < params.n_estimators; ++t) {
        Rng tree_rng = root.fork(static_cast<std::uint64_t>(t));
        for (std::size_t i = 0; i < n; ++i) residual[i] = y[i] - pred[i];

        std::vector<std::size_t> rows;
        if (params.subsample >= 1.0) {
            rows = all_rows;
        } else {
            std::size_t s = static_cast<std::size_t>(
                std::floor(params.subsample * static_cast<double>(n)));
            s = std::clamp<std::size_t>(s, 2 * params.min_samples_leaf, n);
            std::vector<std::size_t> shuffled = all_rows;
            tree_rng.shuffle(shuffled);
            rows.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(s));
            std::sort(rows.begin(), rows.end());
        }

        Tree tree = detail::build_tree(X, residual, std::move(rows), params.max_depth,
                                       params.min_samples_leaf, max_feat, tree_rng);
        for (std::size_t i = 0; i < n; ++i)
            pred[i] += params.learning_rate * tree.predict_row(X.row_ptr(i));
        model.trees.push_back(std::move(tree));
    }
    return model;
}

// ---------------------------------------------------------------------------
// Random forest: trees on bootstrap samples (with replacement), prediction
// is the mean over trees. Parallel training is deterministic because each
// tree derives its stream from (seed, tree index) and lands in its own slot.
// ---------------------------------------------------------------------------
inline EnsembleModel fit_rf(const Matrix& X, const std::vector<double>& y, const RfParams& params,
                            std::vector<std::string> feature_names = {}) {
    params.validate();
    detail::check_training_data(X, y, params.min_samples_leaf);

    const std::size_t n = X.rows();
    EnsembleModel model;
    model.kind = EnsembleKind::rf;
    model.rf_params = params;
    model.n_features = X.cols();
    model.feature_names = std::move(feature_names);
    model.trees.resize(params.n_trees);

    const std::size_t max_feat =
        resolve_max_features(params.max_features, params.feature_fraction, X.cols());
    const Rng root(params.seed);

    parallel_for(static_cast<std::size_t>(params.n_trees), params.jobs, [&](std::size_t t) {
        Rng tree_rng = root.fork(t);
        std::vector<std::size_t> rows;
        if (params.bootstrap) {
            const std::size_t s = std::max<std::size_t>(
                2 * params.min_samples_leaf,
                static_cast<std::size_t>(std::floor(params.bootstrap_fraction *
                                                    static_cast<double>(n))));
            rows.resize(s);
            for (std::size_t i = 0; i < s; ++i) rows[i] = tree_rng.uniform_index(n);
            std::sort(rows.begin(), rows.end());
        } else {
            rows.resize(n);
            for (std::size_t i = 0; i < n; ++i) rows[i] = i;
        }
        model.trees[t] = detail::build_tree(X, y, std::move(rows), params.max_depth,
                                            params.min_samples_leaf, max_feat, tree_rng);
    });
    return model;
}

inline std::vector<double> predict(const EnsembleModel& model, const Matrix& X) {
    if (X.cols() != model.n_features)
        throw std::invalid_argument("predict: expected " + std::to_string(model.n_features) +
                                    " features, got " + std::to_string(X.cols()));
    std::vector<double> out(X.rows());
    for (std::size_t i = 0; i < X.rows(); ++i) out[i] = model.predict_row(X.row_ptr(i), X.cols());
    return out;
}

// ---------------------------------------------------------------------------
// Train/test split and k-fold assignment, both a single seeded shuffle.
// ---------------------------------------------------------------------------
struct TrainTestSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

inline TrainTestSplit split_train_test(std::size_t n, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw std::invalid_argument("test_fraction must lie in (0, 1)");
    if (n < 2) throw std::invalid_argument("need at least 2 rows to split");

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    std::size_t test_n = static_cast<std::size_t>(std::floor(test_fraction *
                                                             static_cast<double>(n)));
    test_n = std::clamp<std::size_t>(test_n, 1, n - 1);

    TrainTestSplit split;
    split.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_n));
    split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(test_n), order.end());
    std::sort(split.test.begin(), split.test.end());
    std::sort(split.train.begin(), split.train.end());
    return split;
}

inline std::vector<std::vector<std::size_t>> cv_folds(std::size_t n, int k, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("cv_folds: k must be >= 2");
    if (n < static_cast<std::size_t>(k)) throw std::invalid_argument("cv_folds: n < k");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    std::vector<std::vector<std::size_t>> folds(k);
    for (int f = 0; f < k; ++f) {
        const std::size_t lo = n * static_cast<std::size_t>(f) / static_cast<std::size_t>(k);
        const std::size_t hi = n * static_cast<std::size_t>(f + 1) / static_cast<std::size_t>(k);
        folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(lo),
                        order.begin() + static_cast<std::ptrdiff_t>(hi));
        std::sort(folds[f].begin(), folds[f].end());
    }
    return folds;
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------
struct Metrics {
    double rmse = 0.0;
    double r2 = 0.0;
};

inline Metrics test_metrics(const std::vector<double>& y_true, const std::vector<double>& y_pred) {
    if (y_true.size() != y_pred.size()) throw std::invalid_argument("test_metrics: length mismatch");
    if (y_true.size() < 2) throw std::invalid_argument("test_metrics: need >= 2 observations");
    const double m = mean(y_true);
    double sse = 0.0, sst = 0.0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const double e = y_true[i] - y_pred[i];
        sse += e * e;
        sst += (y_true[i] - m) * (y_true[i] - m);
    }
    if (sst <= 0.0) throw std::invalid_argument("test_metrics: constant y_true, r2 undefined");
    return {std::sqrt(sse / static_cast<double>(y_true.size())), 1.0 - sse / sst};
}

// ---------------------------------------------------------------------------
// Grid search with k-fold cross-validation, minimizing mean validation MSE.
// Ties break to the earlier lattice entry.
// ---------------------------------------------------------------------------
inline EnsembleModel fit_any(const Matrix& X, const std::vector<double>& y,
                             const GbdtParams& params) {
    return fit_gbdt(X, y, params);
}
inline EnsembleModel fit_any(const Matrix& X, const std::vector<double>& y,
                             const RfParams& params) {
    return fit_rf(X, y, params);
}

struct CvEntry {
    std::size_t candidate = 0;
    double mean_mse = 0.0;
    std::vector<double> fold_mse;
};

template <typename Params>
struct GridSearchResult {
    Params best;
    std::size_t best_index = 0;
    std::vector<CvEntry> table;
};

template <typename Params>
GridSearchResult<Params> grid_search_cv(const Matrix& X, const std::vector<double>& y,
                                        const std::vector<Params>& grid, int k = 5,
                                        std::uint64_t seed = 0, unsigned jobs = 1) {
    if (grid.empty()) throw std::invalid_argument("grid_search_cv: empty grid");
    const auto folds = cv_folds(X.rows(), k, seed);
    for (const auto& candidate : grid) {
        const std::size_t train_min = X.rows() - folds.front().size();
        if (train_min < 2 * static_cast<std::size_t>(candidate.min_samples_leaf))
            throw std::invalid_argument("grid_search_cv: training folds smaller than "
                                        "2*min_samples_leaf");
    }

    std::vector<std::vector<std::size_t>> train_idx(k);
    for (int f = 0; f < k; ++f) {
        std::vector<bool> in_fold(X.rows(), false);
        for (std::size_t i : folds[f]) in_fold[i] = true;
        for (std::size_t i = 0; i < X.rows(); ++i)
            if (!in_fold[i]) train_idx[f].push_back(i);
    }

    GridSearchResult<Params> result;
    result.table.resize(grid.size());
    for (std::size_t c = 0; c < grid.size(); ++c) {
        result.table[c].candidate = c;
        result.table[c].fold_mse.assign(k, 0.0);
    }

    parallel_for(grid.size() * static_cast<std::size_t>(k), jobs, [&](std::size_t work) {
        const std::size_t c = work / static_cast<std::size_t>(k);
        const int f = static_cast<int>(work % static_cast<std::size_t>(k));

        Matrix x_train = X.select_rows(train_idx[f]);
        std::vector<double> y_train;
        y_train.reserve(train_idx[f].size());
        for (std::size_t i : train_idx[f]) y_train.push_back(y[i]);

        const EnsembleModel model = fit_any(x_train, y_train, grid[c]);

        double sse = 0.0;
        for (std::size_t i : folds[f]) {
            const double e = y[i] - model.predict_row(X.row_ptr(i), X.cols());
            sse += e * e;
        }
        result.table[c].fold_mse[f] = sse / static_cast<double>(folds[f].size());
    });

    for (auto& entry : result.table) {
        double s = 0.0;
        for (double v : entry.fold_mse) s += v;
        entry.mean_mse = s / static_cast<double>(k);
    }

    std::size_t best = 0;
    for (std::size_t c = 1; c < grid.size(); ++c)
        if (result.table[c].mean_mse < result.table[best].mean_mse) best = c;
    result.best_index = best;
    result.best = grid[best];
    return result;
}

// ---------------------------------------------------------------------------
// Impurity-based importance: per-feature total SSE decrease over all splits,
// normalized to sum to one.
// ---------------------------------------------------------------------------
inline std::vector<double> impurity_importance(const EnsembleModel& model) {
    std::vector<double> totals(model.n_features, 0.0);
    double grand = 0.0;
    for (const auto& tree : model.trees)
        for (const auto& node : tree.nodes)
            if (!node.is_leaf()) {
                totals[node.feature] += node.gain;
                grand += node.gain;
            }
    if (grand <= 0.0)
        throw std::invalid_argument("impurity_importance: model has no internal splits");
    for (auto& v : totals) v /= grand;
    return totals;
}

// ---------------------------------------------------------------------------
// Model persistence: versioned self-describing JSON text dump. Doubles are
// written with shortest round-trip formatting, so save/load is lossless and
// byte-stable for equal seeds.
// ---------------------------------------------------------------------------
inline void save_model(const EnsembleModel& model, const std::string& path) {
    nlohmann::ordered_json j;
    j["format"] = "thresher-ensemble";
    j["version"] = 1;
    j["kind"] = model.kind == EnsembleKind::gbdt ? "gbdt" : "rf";
    j["base_prediction"] = model.base_prediction;
    j["learning_rate"] = model.learning_rate;
    j["n_features"] = model.n_features;
    j["feature_names"] = model.feature_names;
    if (model.gbdt_params) {
        const auto& p = *model.gbdt_params;
        j["params"] = {{"n_estimators", p.n_estimators},
                       {"learning_rate", p.learning_rate},
                       {"max_depth", p.max_depth},
                       {"max_features", to_string(p.max_features)},
                       {"feature_fraction", p.feature_fraction},
                       {"subsample", p.subsample},
                       {"min_samples_leaf", p.min_samples_leaf},
                       {"seed", p.seed}};
    }
    if (model.rf_params) {
        const auto& p = *model.rf_params;
        j["params"] = {{"n_trees", p.n_trees},
                       {"max_depth", p.max_depth},
                       {"max_features", to_string(p.max_features)},
                       {"feature_fraction", p.feature_fraction},
                       {"min_samples_leaf", p.min_samples_leaf},
                       {"seed", p.seed},
                       {"bootstrap_fraction", p.bootstrap_fraction},
                       {"bootstrap", p.bootstrap}};
    }
    nlohmann::ordered_json trees = nlohmann::ordered_json::array();
    for (const auto& tree : model.trees) {
        nlohmann::ordered_json nodes = nlohmann::ordered_json::array();
        for (const auto& n : tree.nodes) {
            // [feature, threshold, value, gain, left, right] with exact doubles
            nodes.push_back({n.feature, format_double(n.threshold), format_double(n.value),
                             format_double(n.gain), n.left, n.right});
        }
        trees.push_back(std::move(nodes));
    }
    j["trees"] = std::move(trees);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write model file: " + path);
    out << j.dump(1) << '\n';
}

inline EnsembleModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open model file: " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "thresher-ensemble")
        throw std::runtime_error(path + ": not a thresher ensemble dump");
    if (j.value("version", 0) != 1)
        throw std::runtime_error(path + ": unsupported model format version");

    EnsembleModel model;
    model.kind = j.at("kind") == "gbdt" ? EnsembleKind::gbdt : EnsembleKind::rf;
    model.base_prediction = j.at("base_prediction").get<double>();
    model.learning_rate = j.at("learning_rate").get<double>();
    model.n_features = j.at("n_features").get<std::size_t>();
    model.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    for (const auto& tj : j.at("trees")) {
        Tree tree;
        for (const auto& nj : tj) {
            TreeNode n;
            n.feature = nj.at(0).get<int>();
            n.threshold = parse_double(nj.at(1).get<std::string>());
            n.value = parse_double(nj.at(2).get<std::string>());
            n.gain = parse_double(nj.at(3).get<std::string>());
            n.left = nj.at(4).get<int>();
            n.right = nj.at(5).get<int>();
            tree.nodes.push_back(n);
        }
        model.trees.push_back(std::move(tree));
    }
    return model;
}

}  // namespace thresher::ensemble

#endif  // THRESHER_ENSEMBLE_HPP
