#ifndef THRESHER_INTERPRET_HPP
#define THRESHER_INTERPRET_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "thresher/core.hpp"

namespace thresher::interpret {

// ---------------------------------------------------------------------------
// Linear-spline basis. For knots k1 < ... < km the m+1 coordinates are
//   b1 = min(x, k1)
//   bj = clamp(x - k_{j-1}, 0, k_j - k_{j-1})      for 1 < j <= m
//   b_{m+1} = max(x - k_m, 0)
// so a fitted coefficient on bj is the slope of segment j, and the full
// basis reconstructs x: sum_j bj(x) = x.
// ---------------------------------------------------------------------------
inline std::vector<double> spline_basis(double x, const std::vector<double>& knots) {
    for (std::size_t j = 1; j < knots.size(); ++j)
        if (!(knots[j - 1] < knots[j]))
            throw std::invalid_argument("spline_basis: knots must be strictly increasing");
    if (knots.empty()) return {x};
    std::vector<double> b(knots.size() + 1);
    b[0] = std::min(x, knots[0]);
    for (std::size_t j = 1; j < knots.size(); ++j)
        b[j] = std::clamp(x - knots[j - 1], 0.0, knots[j] - knots[j - 1]);
    b[knots.size()] = std::max(x - knots.back(), 0.0);
    return b;
}

// ---------------------------------------------------------------------------
// Partial-dependence curve for one feature.
// ---------------------------------------------------------------------------
struct PdpCurve {
    std::string feature;
    std::string wave;
    std::vector<double> grid;
    std::vector<double> avg_pred;

    void validate() const {
        if (grid.size() != avg_pred.size())
            throw std::invalid_argument("PdpCurve: grid/avg_pred length mismatch");
        for (std::size_t i = 1; i < grid.size(); ++i)
            if (!(grid[i - 1] < grid[i]))
                throw std::invalid_argument("PdpCurve: grid must be strictly increasing");
        for (double v : avg_pred)
            if (!std::isfinite(v)) throw std::invalid_argument("PdpCurve: non-finite avg_pred");
    }
};

struct GridSpec {
    std::size_t n_points = 50;
    double quantile_lo = 0.01;
    double quantile_hi = 0.99;
    // When set, used verbatim (sorted, deduplicated).
    std::optional<std::vector<double>> explicit_values;
};

inline std::vector<double> make_grid(const std::vector<double>& feature_values, const GridSpec& spec) {
    std::vector<double> grid;
    if (spec.explicit_values) {
        grid = *spec.explicit_values;
        std::sort(grid.begin(), grid.end());
    } else {
        if (spec.n_points < 2) throw std::invalid_argument("grid_spec: need >= 2 points");
        if (!(spec.quantile_lo < spec.quantile_hi))
            throw std::invalid_argument("grid_spec: quantile_lo must be < quantile_hi");
        std::vector<double> sorted(feature_values);
        std::sort(sorted.begin(), sorted.end());
        grid.reserve(spec.n_points);
        for (std::size_t i = 0; i < spec.n_points; ++i) {
            const double q = spec.quantile_lo + (spec.quantile_hi - spec.quantile_lo) *
                                                    static_cast<double>(i) /
                                                    static_cast<double>(spec.n_points - 1);
            const double h = q * static_cast<double>(sorted.size() - 1);
            const std::size_t lo = static_cast<std::size_t>(std::floor(h));
            const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
            grid.push_back(sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]));
        }
    }
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    if (grid.size() < 2)
        throw std::invalid_argument("compute_pdp: degenerate grid (constant feature?)");
    return grid;
}

// Average prediction as one feature sweeps the grid with all other features
// held at their observed values. Model needs predict_row(const double*, n).
template <typename Model>
PdpCurve compute_pdp(const Model& model, const Matrix& X, std::size_t feature,
                     const GridSpec& spec = {}, const std::string& feature_name = "",
                     const std::string& wave_label = "", unsigned jobs = 1) {
    if (feature >= X.cols()) throw std::invalid_argument("compute_pdp: feature index out of range");
    if (X.rows() == 0) throw std::invalid_argument("compute_pdp: empty matrix");

    PdpCurve curve;
    curve.feature = feature_name;
    curve.wave = wave_label;
    curve.grid = make_grid(X.column(feature), spec);
    curve.avg_pred.assign(curve.grid.size(), 0.0);

    const std::size_t n = X.rows();
    const std::size_t p = X.cols();
    parallel_for(curve.grid.size(), jobs, [&](std::size_t gi) {
        std::vector<double> row(p);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(X.row_ptr(i), X.row_ptr(i) + p, row.begin());
            row[feature] = curve.grid[gi];
            sum += model.predict_row(row.data(), p);
        }
        curve.avg_pred[gi] = sum / static_cast<double>(n);
    });
    curve.validate();
    return curve;
}

// ---------------------------------------------------------------------------
// Knot (threshold) detection on a PDP curve: continuous piecewise-linear
// least squares with breakpoints restricted to interior grid points, model
// size chosen by SSE + m * penalty with penalty = ln(#points) * var(avg_pred).
// ---------------------------------------------------------------------------
struct KnotCandidate {
    double value = 0.0;
    double score = 0.0;  // SSE reduction attributable to this knot
    std::string wave;
};

namespace detail {

// SSE of the continuous piecewise-linear LS fit with the given knots;
// +inf when the basis is singular on this grid.
inline double piecewise_sse(const std::vector<double>& x, const std::vector<double>& y,
                            const std::vector<double>& knots) {
    const std::size_t n = x.size();
    const std::size_t p = knots.size() + 2;  // intercept + segment slopes
    Eigen::MatrixXd B(n, p);
    for (std::size_t i = 0; i < n; ++i) {
        B(i, 0) = 1.0;
        const auto basis = spline_basis(x[i], knots);
        for (std::size_t j = 0; j < basis.size(); ++j) B(i, j + 1) = basis[j];
    }
    Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);
    Eigen::MatrixXd gram = B.transpose() * B;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
        return std::numeric_limits<double>::infinity();
    Eigen::VectorXd beta = ldlt.solve(B.transpose() * yv);
    if (!beta.allFinite()) return std::numeric_limits<double>::infinity();
    return (yv - B * beta).squaredNorm();
}

// Visit all index subsets of size m from candidates with a minimum index
// gap of 2 (keeps at least one grid point strictly between chosen knots).
template <typename Fn>
void for_each_combination(const std::vector<std::size_t>& candidates, std::size_t m, Fn&& fn) {
    std::vector<std::size_t> pick(m);
    std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t start, std::size_t depth) {
        if (depth == m) {
            fn(pick);
            return;
        }
        for (std::size_t i = start; i + (m - depth) <= candidates.size(); ++i) {
            if (depth > 0 && candidates[i] < pick[depth - 1] + 2) continue;
            pick[depth] = candidates[i];
            rec(i + 1, depth + 1);
        }
    };
    rec(0, 0);
}

}  // namespace detail

inline std::vector<KnotCandidate> detect_knots(const PdpCurve& curve, int max_knots,
                                               std::optional<double> penalty_override = {}) {
    curve.validate();
    if (max_knots < 0) throw std::invalid_argument("detect_knots: max_knots must be >= 0");
    const std::size_t n = curve.grid.size();
    if (n < 2 * static_cast<std::size_t>(max_knots + 1))
        throw std::invalid_argument("detect_knots: curve needs >= 2*(max_knots+1) points");

    const double penalty = penalty_override
                               ? *penalty_override
                               : std::log(static_cast<double>(n)) * variance_pop(curve.avg_pred);

    // Interior grid indices are the breakpoint candidates.
    std::vector<std::size_t> candidates;
    for (std::size_t i = 1; i + 1 < n; ++i) candidates.push_back(i);

    std::vector<std::size_t> best_subset;
    double best_cost = detail::piecewise_sse(curve.grid, curve.avg_pred, {});
    double best_sse = best_cost;

    for (int m = 1; m <= max_knots; ++m) {
        detail::for_each_combination(candidates, static_cast<std::size_t>(m),
                                     [&](const std::vector<std::size_t>& pick) {
            std::vector<double> knots(pick.size());
            for (std::size_t j = 0; j < pick.size(); ++j) knots[j] = curve.grid[pick[j]];
            const double sse = detail::piecewise_sse(curve.grid, curve.avg_pred, knots);
            const double cost = sse + static_cast<double>(m) * penalty;
            if (cost < best_cost) {
                best_cost = cost;
                best_sse = sse;
                best_subset = pick;
            }
        });
    }

    // Score each chosen knot by the SSE increase from refitting without it.
    std::vector<KnotCandidate> out;
    std::vector<double> chosen(best_subset.size());
    for (std::size_t j = 0; j < best_subset.size(); ++j) chosen[j] = curve.grid[best_subset[j]];
    for (std::size_t j = 0; j < chosen.size(); ++j) {
        std::vector<double> reduced;
        for (std::size_t i = 0; i < chosen.size(); ++i)
            if (i != j) reduced.push_back(chosen[i]);
        const double sse_without = detail::piecewise_sse(curve.grid, curve.avg_pred, reduced);
        KnotCandidate cand;
        cand.value = chosen[j];
        cand.score = std::max(0.0, sse_without - best_sse);
        cand.wave = curve.wave;
        out.push_back(cand);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-wave consolidation: candidates within rel_tol * pooled_range of each
// other merge into one knot at their score-weighted mean.
// ---------------------------------------------------------------------------
enum class KnotRounding { none, significant_1 };

inline double round_significant_1(double x) {
    if (x == 0.0) return 0.0;
    const double e = std::floor(std::log10(std::abs(x)));
    const double scale = std::pow(10.0, e);
    double m = std::round(x / scale);
    return m * scale;
}

inline std::vector<KnotCandidate> consolidate_knots(
    const std::map<std::string, std::vector<KnotCandidate>>& per_wave, double pooled_range,
    double rel_tol = 0.15, KnotRounding rounding = KnotRounding::significant_1) {
    if (!(pooled_range >= 0.0) || !std::isfinite(pooled_range))
        throw std::invalid_argument("consolidate_knots: pooled_range must be finite and >= 0");

    std::vector<KnotCandidate> all;
    for (const auto& [wave, cands] : per_wave)
        for (const auto& c : cands) all.push_back(c);
    if (all.empty()) return {};

    std::sort(all.begin(), all.end(), [](const KnotCandidate& a, const KnotCandidate& b) {
        return a.value < b.value;
    });

    const double tol = rel_tol * pooled_range;
    std::vector<KnotCandidate> merged;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i + 1;
        while (j < all.size() && all[j].value - all[j - 1].value <= tol) ++j;
        double wsum = 0.0, vsum = 0.0, ssum = 0.0;
        for (std::size_t k = i; k < j; ++k) {
            // Zero-score candidates still count; give them unit weight so the
            // mean is defined.
            const double w = all[k].score > 0.0 ? all[k].score : 1e-12;
            wsum += w;
            vsum += w * all[k].value;
            ssum += all[k].score;
        }
        KnotCandidate c;
        c.value = vsum / wsum;
        c.score = ssum;
        merged.push_back(c);
        i = j;
    }

    if (rounding == KnotRounding::significant_1)
        for (auto& c : merged) c.value = round_significant_1(c.value);

    // Rounding can collide neighbours; dedupe keeping summed scores.
    std::vector<KnotCandidate> out;
    for (const auto& c : merged) {
        if (!out.empty() && out.back().value == c.value)
            out.back().score += c.score;
        else
            out.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Consolidated breakpoints per variable.
// ---------------------------------------------------------------------------
class KnotSet {
public:
    void set(const std::string& variable, std::vector<double> knots) {
        for (std::size_t j = 1; j < knots.size(); ++j)
            if (!(knots[j - 1] < knots[j]))
                throw std::invalid_argument("KnotSet: knots for '" + variable +
                                            "' must be strictly increasing");
        knots_[variable] = std::move(knots);
    }

    const std::vector<double>& knots_for(const std::string& variable) const {
        static const std::vector<double> empty;
        auto it = knots_.find(variable);
        return it == knots_.end() ? empty : it->second;
    }

    bool has(const std::string& variable) const { return knots_.count(variable) > 0; }
    const std::map<std::string, std::vector<double>>& all() const { return knots_; }

private:
    std::map<std::string, std::vector<double>> knots_;
};

// ---------------------------------------------------------------------------
// Grouped feature importance.
// ---------------------------------------------------------------------------
inline std::map<std::string, double> group_importance(
    const std::vector<std::pair<std::string, double>>& shares,
    const std::map<std::string, std::string>& grouping) {
    double total = 0.0;
    std::map<std::string, double> out;
    for (const auto& [feature, share] : shares) {
        if (share < 0.0) throw std::invalid_argument("group_importance: negative share");
        auto it = grouping.find(feature);
        if (it == grouping.end())
            throw std::invalid_argument("group_importance: feature '" + feature + "' has no group");
        out[it->second] += share;
        total += share;
    }
    if (std::abs(total - 1.0) > 1e-6)
        throw std::invalid_argument("group_importance: shares must sum to 1");
    return out;
}

}  // namespace thresher::interpret

#endif  // THRESHER_INTERPRET_HPP
