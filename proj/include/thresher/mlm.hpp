#ifndef THRESHER_MLM_HPP
#define THRESHER_MLM_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "thresher/core.hpp"
#include "thresher/dataset.hpp"
#include "thresher/interpret.hpp"

namespace thresher::mlm {

enum class FitMethod { ML, REML };

inline std::string to_string(FitMethod m) { return m == FitMethod::ML ? "ML" : "REML"; }

inline FitMethod method_from_string(const std::string& s) {
    if (s == "ML" || s == "ml") return FitMethod::ML;
    if (s == "REML" || s == "reml") return FitMethod::REML;
    throw std::invalid_argument("unknown fit method '" + s + "'");
}

struct LmmSpec {
    std::string response = "y";
    FitMethod method = FitMethod::ML;
    bool use_household_level = true;
    bool use_zone_level = true;
    int multistarts = 5;
    double rel_tol = 1e-9;
    int max_iterations = 10000;
};

struct VarianceComponents {
    double sd_resid = 0.0;
    double sd_hh = 0.0;
    double sd_zone = 0.0;
};

struct LmmFit {
    std::vector<dataset::ColumnInfo> columns;
    std::vector<double> beta;
    std::vector<double> se;
    VarianceComponents varcomps;
    double loglik = 0.0;
    std::size_t n_obs = 0;
    std::size_t k_params = 0;  // fixed effects + variance parameters
    bool converged = false;
    std::string trace;
    std::vector<std::string> warnings;
    FitMethod method = FitMethod::ML;
    std::vector<double> fitted;  // X * beta per row

    double fixed_effect_variance() const {
        return fitted.empty() ? 0.0 : variance_pop(fitted);
    }
};

struct FitStats {
    double aic = 0.0;
    double bic = 0.0;
    double r2_marginal = 0.0;
    double r2_conditional = 0.0;
};

// ---------------------------------------------------------------------------
// Profiled likelihood machinery. With V = sigma^2 * W and
// W = I + lambda_hh * Z_h Z_h' + lambda_zone * Z_z Z_z', nested grouping makes
// W block diagonal by zone. Sweeping out household blocks and then zone
// blocks turns X'W^-1X, X'W^-1y, y'W^-1y and ln|W| into sums over per-group
// aggregates, so one likelihood evaluation costs O((H + Z) p^2) after an
// O(n p) precomputation pass; no dense n-by-n matrix is ever formed.
// ---------------------------------------------------------------------------
namespace detail {

struct SufficientStats {
    std::size_t n = 0;
    std::size_t p = 0;
    Eigen::MatrixXd xtx;      // p x p
    Eigen::VectorXd xty;      // p
    double yty = 0.0;
    Eigen::MatrixXd hh_x;     // p x H, per-household column sums of X
    Eigen::VectorXd hh_y;     // H, per-household response sums
    Eigen::VectorXd hh_m;     // H, per-household row counts
    std::vector<std::vector<int>> zone_households;  // zone -> household ids

    static SufficientStats build(const dataset::DesignMatrix& design) {
        SufficientStats s;
        s.n = design.X.rows();
        s.p = design.X.cols();
        const std::size_t H = design.n_households;
        const std::size_t Z = design.n_zones;

        s.xtx = Eigen::MatrixXd::Zero(s.p, s.p);
        s.xty = Eigen::VectorXd::Zero(s.p);
        s.hh_x = Eigen::MatrixXd::Zero(s.p, H);
        s.hh_y = Eigen::VectorXd::Zero(H);
        s.hh_m = Eigen::VectorXd::Zero(H);
        s.zone_households.assign(Z, {});

        std::vector<int> zone_of_hh(H, -1);
        for (std::size_t i = 0; i < s.n; ++i) {
            const int h = design.hh_index[i];
            const int z = design.zone_index[i];
            Eigen::Map<const Eigen::VectorXd> row(design.X.row_ptr(i), s.p);
            s.xtx.selfadjointView<Eigen::Lower>().rankUpdate(row, 1.0);
            s.xty += design.y[i] * row;
            s.yty += design.y[i] * design.y[i];
            s.hh_x.col(h) += row;
            s.hh_y[h] += design.y[i];
            s.hh_m[h] += 1.0;
            if (zone_of_hh[h] < 0) {
                zone_of_hh[h] = z;
                s.zone_households[z].push_back(h);
            } else if (zone_of_hh[h] != z) {
                throw std::runtime_error("fit_lmm: grouping is not nested");
            }
        }
        s.xtx = s.xtx.selfadjointView<Eigen::Lower>();
        return s;
    }
};

struct Evaluation {
    bool ok = false;
    double loglik = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd beta;
    Eigen::MatrixXd gram;  // X'W^-1X
    double sigma2 = 0.0;
    double logdet_w = 0.0;
};

inline Evaluation evaluate(const SufficientStats& s, double lambda_hh, double lambda_zone,
                           FitMethod method) {
    Evaluation ev;
    Eigen::MatrixXd G = s.xtx;
    Eigen::VectorXd r = s.xty;
    double q = s.yty;
    double logdet = 0.0;

    Eigen::VectorXd t_zone(s.p);
    for (const auto& households : s.zone_households) {
        t_zone.setZero();
        double u_zone = 0.0, s_zone = 0.0;
        for (int h : households) {
            const double m = s.hh_m[h];
            const double d = 1.0 + lambda_hh * m;
            if (lambda_hh > 0.0) {
                logdet += std::log(d);
                const double c = lambda_hh / d;
                G.selfadjointView<Eigen::Lower>().rankUpdate(s.hh_x.col(h), -c);
                r -= c * s.hh_y[h] * s.hh_x.col(h);
                q -= c * s.hh_y[h] * s.hh_y[h];
            }
            t_zone += s.hh_x.col(h) / d;
            u_zone += s.hh_y[h] / d;
            s_zone += m / d;
        }
        if (lambda_zone > 0.0) {
            const double dz = 1.0 + lambda_zone * s_zone;
            logdet += std::log(dz);
            const double cz = lambda_zone / dz;
            G.selfadjointView<Eigen::Lower>().rankUpdate(t_zone, -cz);
            r -= cz * u_zone * t_zone;
            q -= cz * u_zone * u_zone;
        }
    }
    G = G.selfadjointView<Eigen::Lower>();

    Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
    if (ldlt.info() != Eigen::Success) return ev;
    const Eigen::VectorXd d = ldlt.vectorD();
    if ((d.array() <= 0.0).any()) return ev;

    ev.beta = ldlt.solve(r);
    if (!ev.beta.allFinite()) return ev;
    const double quad = std::max(q - ev.beta.dot(r), 1e-300);

    const double n = static_cast<double>(s.n);
    const double p = static_cast<double>(s.p);
    if (method == FitMethod::ML) {
        ev.sigma2 = quad / n;
        ev.loglik = -0.5 * n * (std::log(2.0 * M_PI) + 1.0 + std::log(ev.sigma2)) - 0.5 * logdet;
    } else {
        ev.sigma2 = quad / (n - p);
        const double logdet_g = d.array().log().sum();
        ev.loglik = -0.5 * (n - p) * (std::log(2.0 * M_PI) + 1.0 + std::log(ev.sigma2)) -
                    0.5 * logdet - 0.5 * logdet_g;
    }
    ev.gram = std::move(G);
    ev.logdet_w = logdet;
    ev.ok = true;
    return ev;
}

// ---------------------------------------------------------------------------
// Nelder-Mead in d dimensions (d = 1 or 2 here), deterministic.
// ---------------------------------------------------------------------------
struct NelderMeadResult {
    std::vector<double> x;
    double f = std::numeric_limits<double>::infinity();
    int iterations = 0;
    int evaluations = 0;
    bool converged = false;
};

template <typename Fn>
NelderMeadResult nelder_mead(Fn&& fn, std::vector<double> start, double step, double rel_tol,
                             int max_iterations) {
    const std::size_t d = start.size();
    NelderMeadResult result;

    std::vector<std::vector<double>> simplex(d + 1, start);
    for (std::size_t i = 0; i < d; ++i) simplex[i + 1][i] += step;
    std::vector<double> fv(d + 1);
    for (std::size_t i = 0; i <= d; ++i) {
        fv[i] = fn(simplex[i]);
        ++result.evaluations;
    }

    const auto order = [&]() {
        std::vector<std::size_t> idx(d + 1);
        for (std::size_t i = 0; i <= d; ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
        std::vector<std::vector<double>> s2;
        std::vector<double> f2;
        for (std::size_t i : idx) {
            s2.push_back(simplex[i]);
            f2.push_back(fv[i]);
        }
        simplex = std::move(s2);
        fv = std::move(f2);
    };

    for (; result.iterations < max_iterations; ++result.iterations) {
        order();

        double diameter = 0.0;
        for (std::size_t i = 1; i <= d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                diameter = std::max(diameter, std::abs(simplex[i][j] - simplex[0][j]));
        const double spread = std::abs(fv[d] - fv[0]);
        if (spread <= rel_tol * (std::abs(fv[0]) + rel_tol) && diameter <= 1e-8) {
            result.converged = true;
            break;
        }

        std::vector<double> centroid(d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) centroid[j] += simplex[i][j] / static_cast<double>(d);

        const auto affine = [&](double coef) {
            std::vector<double> x(d);
            for (std::size_t j = 0; j < d; ++j)
                x[j] = centroid[j] + coef * (simplex[d][j] - centroid[j]);
            return x;
        };

        const std::vector<double> reflected = affine(-1.0);
        const double fr = fn(reflected);
        ++result.evaluations;

        if (fr < fv[0]) {
            const std::vector<double> expanded = affine(-2.0);
            const double fe = fn(expanded);
            ++result.evaluations;
            if (fe < fr) {
                simplex[d] = expanded;
                fv[d] = fe;
            } else {
                simplex[d] = reflected;
                fv[d] = fr;
            }
        } else if (fr < fv[d - 1]) {
            simplex[d] = reflected;
            fv[d] = fr;
        } else {
            const std::vector<double> contracted = affine(fr < fv[d] ? -0.5 : 0.5);
            const double fc = fn(contracted);
            ++result.evaluations;
            if (fc < std::min(fr, fv[d])) {
                simplex[d] = contracted;
                fv[d] = fc;
            } else {
                for (std::size_t i = 1; i <= d; ++i) {
                    for (std::size_t j = 0; j < d; ++j)
                        simplex[i][j] = simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]);
                    fv[i] = fn(simplex[i]);
                    ++result.evaluations;
                }
            }
        }
    }

    order();
    result.x = simplex[0];
    result.f = fv[0];
    return result;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// fit_lmm: maximize the (restricted) profiled log-likelihood over the log
// variance ratios; beta and sigma^2 are profiled out in closed form.
// ---------------------------------------------------------------------------
inline LmmFit fit_lmm(const dataset::DesignMatrix& design, const LmmSpec& spec = {}) {
    const std::size_t n = design.X.rows();
    const std::size_t p = design.X.cols();
    if (n == 0 || p == 0) throw std::invalid_argument("fit_lmm: empty design");
    if (n <= p + 3) throw std::invalid_argument("fit_lmm: need n_obs > n_fixed + 3");
    design.check_nesting();

    // Rank check on the fixed-effects matrix.
    {
        Eigen::MatrixXd X(n, p);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < p; ++j) X(i, j) = design.X(i, j);
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
        if (static_cast<std::size_t>(qr.rank()) < p) {
            std::string names;
            for (const auto& c : design.columns) names += names.empty() ? c.name : ", " + c.name;
            throw std::runtime_error("fit_lmm: singular fixed-effects matrix (columns: " + names +
                                     ")");
        }
    }

    const auto stats = detail::SufficientStats::build(design);

    LmmFit fit;
    fit.method = spec.method;
    fit.n_obs = n;
    fit.columns = design.columns;

    // Identifiability of the levels.
    bool free_hh = spec.use_household_level;
    bool free_zone = spec.use_zone_level;
    if (free_hh && stats.hh_m.maxCoeff() <= 1.0) {
        free_hh = false;
        fit.warnings.push_back(
            "household level is not identifiable (every household has exactly one person); "
            "household variance reported as 0");
    }
    if (free_zone) {
        bool all_single = true;
        for (const auto& hh : stats.zone_households)
            if (hh.size() > 1) {
                all_single = false;
                break;
            }
        if (all_single && free_hh) {
            free_zone = false;
            fit.warnings.push_back(
                "zone level is not identifiable (every zone has exactly one household); "
                "zone variance reported as 0");
        }
        if (all_single && !spec.use_household_level && stats.hh_m.maxCoeff() <= 1.0) {
            free_zone = false;
            fit.warnings.push_back(
                "zone level is not identifiable (every zone has exactly one row); "
                "zone variance reported as 0");
        }
    }

    const int dims = (free_hh ? 1 : 0) + (free_zone ? 1 : 0);
    const double t_cap = 34.5;  // exp(34.5) ~ 1e15

    const auto lambdas_from = [&](const std::vector<double>& t) {
        double lh = 0.0, lz = 0.0;
        int k = 0;
        if (free_hh) lh = std::exp(std::clamp(t[k++], -t_cap, t_cap));
        if (free_zone) lz = std::exp(std::clamp(t[k++], -t_cap, t_cap));
        return std::pair<double, double>(lh, lz);
    };

    const auto objective = [&](const std::vector<double>& t) {
        const auto [lh, lz] = lambdas_from(t);
        const auto ev = detail::evaluate(stats, lh, lz, spec.method);
        return ev.ok ? -ev.loglik : std::numeric_limits<double>::infinity();
    };

    double best_lh = 0.0, best_lz = 0.0;
    bool converged = true;
    int total_iters = 0, total_evals = 0, best_start = -1;

    if (dims > 0) {
        static const double starts1[5] = {0.0, -3.0, 2.0, -6.0, 4.0};
        static const double starts2[5][2] = {{0, 0}, {-3, -3}, {2, 2}, {-6, 0}, {0, -6}};

        detail::NelderMeadResult best;
        for (int s = 0; s < spec.multistarts; ++s) {
            std::vector<double> start(dims);
            for (int j = 0; j < dims; ++j)
                start[j] = dims == 1 ? starts1[s % 5] : starts2[s % 5][j];
            auto run = detail::nelder_mead(objective, start, 1.0, spec.rel_tol,
                                           spec.max_iterations);
            total_iters += run.iterations;
            total_evals += run.evaluations;
            if (run.f < best.f) {
                best = run;
                best_start = s;
            }
        }
        // Tighten with a short restart around the winner.
        auto polish = detail::nelder_mead(objective, best.x, 0.05, spec.rel_tol,
                                          spec.max_iterations);
        total_iters += polish.iterations;
        total_evals += polish.evaluations;
        if (polish.f <= best.f) {
            polish.converged = polish.converged || best.converged;
            best = polish;
        }
        converged = best.converged;

        auto [lh, lz] = lambdas_from(best.x);
        // Boundary candidates: ratios below threshold report as exactly 0.
        if (lh < 1e-8) lh = 0.0;
        if (lz < 1e-8) lz = 0.0;
        double cand_lh[4] = {lh, 0.0, lh, 0.0};
        double cand_lz[4] = {lz, lz, 0.0, 0.0};
        double best_ll = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < 4; ++c) {
            const auto ev = detail::evaluate(stats, cand_lh[c], cand_lz[c], spec.method);
            if (ev.ok && ev.loglik > best_ll) {
                best_ll = ev.loglik;
                best_lh = cand_lh[c];
                best_lz = cand_lz[c];
            }
        }
    }

    const auto final_ev = detail::evaluate(stats, best_lh, best_lz, spec.method);
    if (!final_ev.ok) throw std::runtime_error("fit_lmm: likelihood evaluation failed at optimum");

    fit.loglik = final_ev.loglik;
    fit.beta.assign(final_ev.beta.data(), final_ev.beta.data() + p);
    fit.varcomps.sd_resid = std::sqrt(final_ev.sigma2);
    fit.varcomps.sd_hh = std::sqrt(best_lh * final_ev.sigma2);
    fit.varcomps.sd_zone = std::sqrt(best_lz * final_ev.sigma2);
    fit.k_params = p + 1 + (spec.use_household_level ? 1 : 0) + (spec.use_zone_level ? 1 : 0);
    fit.converged = converged;

    // Standard errors from sigma^2 (X'W^-1X)^-1.
    Eigen::LDLT<Eigen::MatrixXd> ldlt(final_ev.gram);
    Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(p, p)) * final_ev.sigma2;
    fit.se.resize(p);
    for (std::size_t j = 0; j < p; ++j) fit.se[j] = std::sqrt(std::max(0.0, cov(j, j)));

    fit.fitted.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (std::size_t j = 0; j < p; ++j) v += design.X(i, j) * fit.beta[j];
        fit.fitted[i] = v;
    }

    std::ostringstream trace;
    trace << "method=" << to_string(spec.method) << " dims=" << dims
          << " starts=" << (dims > 0 ? spec.multistarts : 0) << " best_start=" << best_start
          << " iterations=" << total_iters << " evaluations=" << total_evals
          << " converged=" << (converged ? 1 : 0) << " lambda_hh=" << format_double(best_lh)
          << " lambda_zone=" << format_double(best_lz);
    fit.trace = trace.str();
    return fit;
}

// ---------------------------------------------------------------------------
// Wald inference with a standard normal reference.
// ---------------------------------------------------------------------------
struct WaldRow {
    double z = 0.0;
    double p = 1.0;
    std::string stars;
};

inline std::string stars_for(double p) {
    if (p < 0.01) return "***";
    if (p < 0.05) return "**";
    if (p < 0.10) return "*";
    return "";
}

inline std::vector<WaldRow> wald(const LmmFit& fit) {
    if (!fit.converged) throw std::invalid_argument("wald: fit did not converge");
    std::vector<WaldRow> out(fit.beta.size());
    for (std::size_t j = 0; j < fit.beta.size(); ++j) {
        WaldRow& row = out[j];
        if (fit.se[j] > 0.0) {
            row.z = fit.beta[j] / fit.se[j];
            row.p = 2.0 * (1.0 - normal_cdf(std::abs(row.z)));
        } else {
            row.z = 0.0;
            row.p = 1.0;
        }
        row.stars = stars_for(row.p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Information criteria and Nakagawa-Schielzeth R^2.
// ---------------------------------------------------------------------------
inline std::pair<double, double> information_criteria(double loglik, std::size_t k_params,
                                                      std::size_t n_obs) {
    if (n_obs < 1) throw std::invalid_argument("information_criteria: n_obs must be >= 1");
    const double k = static_cast<double>(k_params);
    const double aic = -2.0 * loglik + 2.0 * k;
    const double bic = -2.0 * loglik + k * std::log(static_cast<double>(n_obs));
    return {aic, bic};
}

inline std::pair<double, double> nakagawa_r2_from(double var_fixed, double sd_resid, double sd_hh,
                                                  double sd_zone) {
    const double denom = var_fixed + sd_resid * sd_resid + sd_hh * sd_hh + sd_zone * sd_zone;
    if (denom <= 0.0) throw std::invalid_argument("nakagawa_r2: zero total variance");
    const double r2m = var_fixed / denom;
    const double r2c = (var_fixed + sd_hh * sd_hh + sd_zone * sd_zone) / denom;
    return {r2m, r2c};
}

inline std::pair<double, double> nakagawa_r2(const LmmFit& fit) {
    if (!fit.converged) throw std::invalid_argument("nakagawa_r2: fit did not converge");
    // Population variance of the fixed-effect predictor over the sample; an
    // intercept-only model has var_f = 0 exactly.
    double var_f = fit.fixed_effect_variance();
    if (fit.columns.size() == 1 && fit.columns[0].kind == dataset::ColumnKind::intercept)
        var_f = 0.0;
    return nakagawa_r2_from(var_f, fit.varcomps.sd_resid, fit.varcomps.sd_hh,
                            fit.varcomps.sd_zone);
}

inline FitStats fit_stats(const LmmFit& fit) {
    FitStats out;
    const auto [aic, bic] = information_criteria(fit.loglik, fit.k_params, fit.n_obs);
    out.aic = aic;
    out.bic = bic;
    const auto [r2m, r2c] = nakagawa_r2(fit);
    out.r2_marginal = r2m;
    out.r2_conditional = r2c;
    return out;
}

// ---------------------------------------------------------------------------
// Elasticity: beta * mean(x) / mean(y), one row per built-environment
// segment coefficient; mean(x) is the full-sample mean of the raw variable.
// ---------------------------------------------------------------------------
struct ElasticityRow {
    std::string label;     // design column name, e.g. "PopDEN [0-2]"
    std::string variable;  // raw variable
    double beta = 0.0;
    double mean_x = 0.0;
    double mean_y = 0.0;
    double elasticity = 0.0;
    std::string stars;
};

inline double elasticity_value(double beta, double mean_x, double mean_y) {
    if (mean_y == 0.0) throw std::invalid_argument("elasticity: mean of the response is zero");
    return beta * mean_x / mean_y;
}

inline std::vector<ElasticityRow> elasticity_table(const LmmFit& fit,
                                                   const dataset::HierarchicalWave& wave,
                                                   const std::set<std::string>& be_variables) {
    const double mean_y = mean(wave.response);
    const auto wald_rows = wald(fit);

    std::map<std::string, double> mean_cache;
    std::vector<ElasticityRow> out;
    for (std::size_t j = 0; j < fit.columns.size(); ++j) {
        const auto& col = fit.columns[j];
        if (!be_variables.count(col.variable)) continue;
        if (col.kind != dataset::ColumnKind::linear && col.kind != dataset::ColumnKind::segment)
            continue;
        auto it = mean_cache.find(col.variable);
        if (it == mean_cache.end())
            it = mean_cache.emplace(col.variable, mean(wave.joined_numeric(col.variable))).first;

        ElasticityRow row;
        row.label = col.name;
        row.variable = col.variable;
        row.beta = fit.beta[j];
        row.mean_x = it->second;
        row.mean_y = mean_y;
        row.elasticity = elasticity_value(row.beta, row.mean_x, row.mean_y);
        row.stars = wald_rows[j].stars;
        out.push_back(std::move(row));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Four-step stepwise procedure:
//   Model 1: intercept only.
//   Model 2: person + household terms (with their knots).
//   Model 3: Model 2's retained terms + built-environment terms, linear.
//   Model 4: Model 2's retained terms + built-environment terms with knots.
// After each of steps 2-4 the least significant variable whose every column
// has p > alpha is dropped and the model refit, to a fixed point.
// ---------------------------------------------------------------------------
struct StepModel {
    std::string name;
    dataset::DesignMatrix design;
    LmmFit fit;
    FitStats stats;
    std::vector<WaldRow> wald_rows;
};

struct StepDrop {
    int model = 0;
    std::string variable;
    double p = 1.0;
};

struct StepwiseResult {
    std::vector<StepModel> models;  // 4 entries
    std::vector<StepDrop> trace;
};

namespace detail {

inline StepModel fit_with_drops(const dataset::HierarchicalWave& wave,
                                std::vector<dataset::TermSpec> terms,
                                const interpret::KnotSet& knots, const LmmSpec& spec, double alpha,
                                int model_number, const std::string& name,
                                std::vector<StepDrop>* trace) {
    StepModel step;
    step.name = name;
    for (;;) {
        step.design = dataset::build_design(wave, terms, knots);
        step.fit = fit_lmm(step.design, spec);
        step.wald_rows = wald(step.fit);

        // Smallest p per variable; a variable is droppable only if all of its
        // columns exceed alpha.
        std::map<std::string, double> min_p;
        for (std::size_t j = 0; j < step.design.columns.size(); ++j) {
            const auto& col = step.design.columns[j];
            if (col.kind == dataset::ColumnKind::intercept) continue;
            auto [it, inserted] = min_p.emplace(col.variable, step.wald_rows[j].p);
            if (!inserted) it->second = std::min(it->second, step.wald_rows[j].p);
        }

        std::string worst;
        double worst_p = alpha;
        for (const auto& [variable, pv] : min_p) {
            if (pv > worst_p) {
                worst_p = pv;
                worst = variable;
            }
        }
        if (worst.empty()) break;

        trace->push_back({model_number, worst, worst_p});
        terms.erase(std::remove_if(terms.begin(), terms.end(),
                                   [&](const dataset::TermSpec& t) { return t.variable == worst; }),
                    terms.end());
    }
    step.stats = fit_stats(step.fit);
    return step;
}

}  // namespace detail

inline StepwiseResult stepwise_build(const dataset::HierarchicalWave& wave,
                                     const interpret::KnotSet& knots,
                                     const std::set<std::string>& be_variables,
                                     double alpha = 0.10, const LmmSpec& base_spec = {}) {
    StepwiseResult result;
    LmmSpec spec = base_spec;
    spec.response = wave.response_name;

    std::vector<dataset::TermSpec> pp_terms, be_linear, be_piecewise;
    for (const auto& var : wave.schema.variables()) {
        if (be_variables.count(var.name)) {
            be_linear.push_back({var.name, false});
            be_piecewise.push_back({var.name, true});
        } else {
            pp_terms.push_back({var.name, true});
        }
    }

    result.models.push_back(detail::fit_with_drops(wave, {}, knots, spec, alpha, 1, "Model 1",
                                                   &result.trace));

    StepModel model2 = detail::fit_with_drops(wave, pp_terms, knots, spec, alpha, 2, "Model 2",
                                              &result.trace);

    // Person/household variables retained by model 2.
    std::set<std::string> retained;
    for (const auto& col : model2.design.columns)
        if (col.kind != dataset::ColumnKind::intercept) retained.insert(col.variable);
    std::vector<dataset::TermSpec> retained_terms;
    for (const auto& t : pp_terms)
        if (retained.count(t.variable)) retained_terms.push_back(t);

    std::vector<dataset::TermSpec> model3_terms = retained_terms;
    model3_terms.insert(model3_terms.end(), be_linear.begin(), be_linear.end());
    std::vector<dataset::TermSpec> model4_terms = retained_terms;
    model4_terms.insert(model4_terms.end(), be_piecewise.begin(), be_piecewise.end());

    result.models.push_back(std::move(model2));
    result.models.push_back(detail::fit_with_drops(wave, model3_terms, knots, spec, alpha, 3,
                                                   "Model 3", &result.trace));
    result.models.push_back(detail::fit_with_drops(wave, model4_terms, knots, spec, alpha, 4,
                                                   "Model 4", &result.trace));
    return result;
}

}  // namespace thresher::mlm

#endif  // THRESHER_MLM_HPP
