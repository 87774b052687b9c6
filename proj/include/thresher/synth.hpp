#ifndef THRESHER_SYNTH_HPP
#define THRESHER_SYNTH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "thresher/core.hpp"
#include "thresher/csv.hpp"
#include "thresher/dataset.hpp"
#include "thresher/interpret.hpp"

namespace thresher::synth {

struct CovariateDist {
    enum class Kind { uniform, normal } kind = Kind::uniform;
    double a = 0.0;  // uniform lo / normal mean
    double b = 1.0;  // uniform hi / normal sd

    void validate() const {
        if (!std::isfinite(a) || !std::isfinite(b))
            throw std::invalid_argument("covariate distribution parameters must be finite");
        if (kind == Kind::uniform && !(a < b))
            throw std::invalid_argument("uniform distribution needs a < b");
        if (kind == Kind::normal && !(b >= 0.0))
            throw std::invalid_argument("normal distribution needs sd >= 0");
    }

    double spread() const {
        return kind == Kind::uniform ? (b - a) / std::sqrt(12.0) : b;
    }
};

// True effect of one numeric variable: per-segment slopes on the same
// linear-spline parametrization the models fit, so slopes are directly
// comparable with fitted coefficients. Empty slopes = no effect (decoy).
struct PiecewiseEffect {
    std::vector<double> knots;
    std::vector<double> slopes;  // knots.size() + 1 entries when active

    bool active() const { return !slopes.empty(); }

    void validate() const {
        for (std::size_t j = 1; j < knots.size(); ++j)
            if (!(knots[j - 1] < knots[j]))
                throw std::invalid_argument("effect knots must be strictly increasing");
        if (active() && slopes.size() != knots.size() + 1)
            throw std::invalid_argument("need knots.size() + 1 slopes");
    }

    double value(double x) const {
        if (!active()) return 0.0;
        // Segment j covers [k_{j-1}, k_j) measured from 0; contribution is
        // slope_j times the length of [0, x] inside the segment.
        double total = 0.0, lo = 0.0;
        for (std::size_t j = 0; j < slopes.size(); ++j) {
            const double hi = j < knots.size() ? knots[j] : std::numeric_limits<double>::infinity();
            double part;
            if (j == 0)
                part = std::min(x, hi);  // unclamped below so negative x extrapolates linearly
            else
                part = std::clamp(x - lo, 0.0, hi - lo);
            total += slopes[j] * part;
            lo = hi;
        }
        return total;
    }
};

struct SynthVariable {
    dataset::VariableSpec spec;
    CovariateDist dist;           // numeric only
    PiecewiseEffect effect;       // numeric only
    std::vector<double> category_probs;    // categorical only, aligned to categories
    std::vector<double> category_effects;  // categorical only; reference entry ignored
};

struct SynthConfig {
    std::string label = "synth";
    std::size_t n_zones = 50;
    std::pair<int, int> households_per_zone{4, 4};
    std::pair<int, int> persons_per_household{2, 2};
    double sd_zone = 0.0;
    double sd_hh = 0.0;
    double sd_resid = 1.0;
    double intercept = 0.0;
    std::vector<SynthVariable> variables;
    bool floor_response_at_zero = false;
    bool heavy_tail_resid = false;  // robustness testing only: t(4)-like residuals
    double covariate_correlation = 0.0;  // couples numeric covariates at a level
    std::string response_name = "VMT_Person";
    std::uint64_t seed = 0;

    void validate() const {
        if (n_zones == 0) throw std::invalid_argument("need at least one zone");
        if (households_per_zone.first < 1 || households_per_zone.second < households_per_zone.first)
            throw std::invalid_argument("bad households_per_zone range");
        if (persons_per_household.first < 1 ||
            persons_per_household.second < persons_per_household.first)
            throw std::invalid_argument("bad persons_per_household range");
        if (sd_zone < 0 || sd_hh < 0 || sd_resid < 0)
            throw std::invalid_argument("standard deviations must be >= 0");
        for (const auto& v : variables) {
            v.spec.validate();
            if (v.spec.kind == dataset::VariableKind::numeric) {
                v.dist.validate();
                v.effect.validate();
            } else {
                if (v.category_probs.size() != v.spec.categories.size())
                    throw std::invalid_argument("category_probs size mismatch for '" +
                                                v.spec.name + "'");
                double total = 0.0;
                for (double p : v.category_probs) {
                    if (p < 0.0) throw std::invalid_argument("negative category probability");
                    total += p;
                }
                if (std::abs(total - 1.0) > 1e-9)
                    throw std::invalid_argument("category probabilities must sum to 1");
                if (!v.category_effects.empty() &&
                    v.category_effects.size() != v.spec.categories.size())
                    throw std::invalid_argument("category_effects size mismatch for '" +
                                                v.spec.name + "'");
            }
        }
    }
};

struct GroundTruth {
    double intercept = 0.0;
    std::map<std::string, PiecewiseEffect> numeric_effects;
    std::map<std::string, std::map<std::string, double>> categorical_effects;
    double sd_zone = 0.0, sd_hh = 0.0, sd_resid = 0.0;
    interpret::KnotSet knots;
    // Realized random draws (not serialized): one entry per zone, household
    // and person respectively.
    std::vector<double> realized_zone, realized_hh, realized_resid;

    // Truth coefficient for a design column; NaN when the column's
    // segmentation does not match the generating effect.
    double beta_for_column(const dataset::ColumnInfo& col) const {
        if (col.kind == dataset::ColumnKind::intercept) return intercept;
        if (col.kind == dataset::ColumnKind::indicator) {
            auto it = categorical_effects.find(col.variable);
            if (it == categorical_effects.end()) return 0.0;
            auto jt = it->second.find(col.category);
            return jt == it->second.end() ? 0.0 : jt->second;
        }
        auto it = numeric_effects.find(col.variable);
        if (it == numeric_effects.end() || !it->second.active())
            return col.kind == dataset::ColumnKind::linear ? 0.0 : 0.0;
        const auto& effect = it->second;
        if (col.kind == dataset::ColumnKind::linear)
            return effect.knots.empty() ? effect.slopes[0]
                                        : std::numeric_limits<double>::quiet_NaN();
        if (col.segment_index < 0 ||
            static_cast<std::size_t>(col.segment_index) >= effect.slopes.size())
            return std::numeric_limits<double>::quiet_NaN();
        return effect.slopes[col.segment_index];
    }
};

namespace detail {

inline std::string padded_id(const char* prefix, std::size_t i, int width) {
    std::string num = std::to_string(i + 1);
    while (static_cast<int>(num.size()) < width) num.insert(num.begin(), '0');
    return std::string(prefix) + num;
}

inline int draw_count(Rng& rng, std::pair<int, int> range) {
    if (range.first == range.second) return range.first;
    return range.first +
           static_cast<int>(rng.uniform_index(static_cast<std::size_t>(range.second - range.first + 1)));
}

inline double draw_covariate(Rng& rng, const CovariateDist& dist, double correlation,
                             double shared_z) {
    double x = dist.kind == CovariateDist::Kind::uniform ? rng.uniform(dist.a, dist.b)
                                                         : rng.normal(dist.a, dist.b);
    if (correlation > 0.0) x += correlation * dist.spread() * shared_z;
    return x;
}

inline std::size_t draw_category(Rng& rng, const std::vector<double>& probs) {
    const double u = rng.uniform01();
    double acc = 0.0;
    for (std::size_t c = 0; c < probs.size(); ++c) {
        acc += probs[c];
        if (u < acc) return c;
    }
    return probs.size() - 1;
}

}  // namespace detail

inline std::pair<dataset::HierarchicalWave, GroundTruth> generate(const SynthConfig& config) {
    config.validate();

    dataset::HierarchicalWave wave;
    wave.label = config.label;
    wave.response_name = config.response_name;
    std::vector<dataset::VariableSpec> specs;
    for (const auto& v : config.variables) specs.push_back(v.spec);
    wave.schema = dataset::Schema(specs);

    GroundTruth truth;
    truth.intercept = config.intercept;
    truth.sd_zone = config.sd_zone;
    truth.sd_hh = config.sd_hh;
    truth.sd_resid = config.sd_resid;
    for (const auto& v : config.variables) {
        if (v.spec.kind == dataset::VariableKind::numeric) {
            if (v.effect.active()) {
                truth.numeric_effects[v.spec.name] = v.effect;
                if (!v.effect.knots.empty()) truth.knots.set(v.spec.name, v.effect.knots);
            }
        } else if (!v.category_effects.empty()) {
            std::map<std::string, double> effects;
            for (std::size_t c = 0; c < v.spec.categories.size(); ++c)
                if (v.spec.categories[c] != v.spec.reference)
                    effects[v.spec.categories[c]] = v.category_effects[c];
            truth.categorical_effects[v.spec.name] = effects;
        }
    }

    const Rng root(config.seed);
    Rng structure_rng = root.fork(0);
    Rng zone_rng = root.fork(1);
    Rng hh_rng = root.fork(2);
    Rng person_rng = root.fork(3);
    Rng noise_rng = root.fork(4);

    // Per-person contribution of each variable, accumulated while tables are
    // generated.
    struct EntityValues {
        std::map<std::string, double> numeric;
        std::map<std::string, std::string> categorical;
        double effect = 0.0;
    };

    const auto draw_entity = [&](Rng& rng, dataset::VariableLevel level) {
        EntityValues out;
        const double shared_z =
            config.covariate_correlation > 0.0 ? rng.normal() : 0.0;
        for (const auto& v : config.variables) {
            if (v.spec.level != level) continue;
            if (v.spec.kind == dataset::VariableKind::numeric) {
                const double x = detail::draw_covariate(rng, v.dist,
                                                        config.covariate_correlation, shared_z);
                out.numeric[v.spec.name] = x;
                out.effect += v.effect.value(x);
            } else {
                const std::size_t c = detail::draw_category(rng, v.category_probs);
                out.categorical[v.spec.name] = v.spec.categories[c];
                if (!v.category_effects.empty() &&
                    v.spec.categories[c] != v.spec.reference)
                    out.effect += v.category_effects[c];
            }
        }
        return out;
    };

    const auto install = [&](dataset::LevelTable& table, const EntityValues& values,
                             std::size_t row) {
        for (const auto& [name, x] : values.numeric) {
            auto& col = table.numeric[name];
            col.resize(row + 1);
            col[row] = x;
        }
        for (const auto& [name, c] : values.categorical) {
            auto& col = table.categorical[name];
            col.resize(row + 1);
            col[row] = c;
        }
    };

    std::size_t person_counter = 0, hh_counter = 0;
    for (std::size_t z = 0; z < config.n_zones; ++z) {
        const std::string zone_id = detail::padded_id("Z", z, 4);
        wave.zones.ids.push_back(zone_id);
        const EntityValues zone_values = draw_entity(zone_rng, dataset::VariableLevel::zone);
        install(wave.zones, zone_values, z);
        const double u_zone = config.sd_zone > 0.0 ? noise_rng.normal(0.0, config.sd_zone) : 0.0;
        truth.realized_zone.push_back(u_zone);

        const int n_hh = detail::draw_count(structure_rng, config.households_per_zone);
        for (int h = 0; h < n_hh; ++h) {
            const std::string hh_id = detail::padded_id("H", hh_counter, 5);
            wave.households.ids.push_back(hh_id);
            wave.households.parent_ids.push_back(zone_id);
            const EntityValues hh_values = draw_entity(hh_rng, dataset::VariableLevel::household);
            install(wave.households, hh_values, hh_counter);
            const double u_hh = config.sd_hh > 0.0 ? noise_rng.normal(0.0, config.sd_hh) : 0.0;
            truth.realized_hh.push_back(u_hh);
            ++hh_counter;

            const int n_persons = detail::draw_count(structure_rng, config.persons_per_household);
            for (int q = 0; q < n_persons; ++q) {
                const std::string person_id = detail::padded_id("P", person_counter, 6);
                wave.persons.ids.push_back(person_id);
                wave.persons.parent_ids.push_back(hh_id);
                const EntityValues person_values =
                    draw_entity(person_rng, dataset::VariableLevel::person);
                install(wave.persons, person_values, person_counter);
                ++person_counter;

                double eps;
                if (config.heavy_tail_resid) {
                    // Student-t with 4 df via normal / sqrt(chi2/df).
                    const double z0 = noise_rng.normal();
                    double chi2 = 0.0;
                    for (int k = 0; k < 4; ++k) {
                        const double g = noise_rng.normal();
                        chi2 += g * g;
                    }
                    eps = config.sd_resid * z0 / std::sqrt(chi2 / 4.0);
                } else {
                    eps = config.sd_resid > 0.0 ? noise_rng.normal(0.0, config.sd_resid) : 0.0;
                }

                truth.realized_resid.push_back(eps);
                double y = config.intercept + zone_values.effect + hh_values.effect +
                           person_values.effect + u_zone + u_hh + eps;
                if (config.floor_response_at_zero) y = std::max(0.0, y);
                wave.response.push_back(y);
            }
        }
    }

    // Levels without any variable of their own still need full-length columns.
    const auto pad_columns = [](dataset::LevelTable& table) {
        for (auto& [name, col] : table.numeric) col.resize(table.ids.size(), 0.0);
        for (auto& [name, col] : table.categorical) col.resize(table.ids.size(), "");
    };
    pad_columns(wave.zones);
    pad_columns(wave.households);
    pad_columns(wave.persons);

    wave.persons.rebuild_index();
    wave.households.rebuild_index();
    wave.zones.rebuild_index();
    wave.validate_nesting();
    return {std::move(wave), std::move(truth)};
}

// ---------------------------------------------------------------------------
// Write the three-CSV layout consumed by dataset::load_wave, plus a
// ground-truth sidecar.
// ---------------------------------------------------------------------------
struct WaveFiles {
    std::string persons, households, zones, truth;
};

inline WaveFiles write_wave_csvs(const dataset::HierarchicalWave& wave, const GroundTruth& truth,
                                 const std::string& directory, const std::string& stem) {
    WaveFiles files;
    files.persons = directory + "/" + stem + "_persons.csv";
    files.households = directory + "/" + stem + "_households.csv";
    files.zones = directory + "/" + stem + "_zones.csv";
    files.truth = directory + "/" + stem + "_truth.json";

    const auto write_level = [&](const dataset::LevelTable& table, const std::string& path,
                                 const std::string& id_name, const std::string& parent_name,
                                 const std::vector<double>* response) {
        csv::Writer w(path);
        std::vector<std::string> header{id_name};
        if (!parent_name.empty()) header.push_back(parent_name);
        for (const auto& [name, col] : table.numeric) header.push_back(name);
        for (const auto& [name, col] : table.categorical) header.push_back(name);
        if (response) header.push_back(wave.response_name);
        w.row(header);
        for (std::size_t i = 0; i < table.size(); ++i) {
            std::vector<std::string> row{table.ids[i]};
            if (!parent_name.empty()) row.push_back(table.parent_ids[i]);
            for (const auto& [name, col] : table.numeric)
                row.push_back(std::isnan(col[i]) ? "" : format_double(col[i]));
            for (const auto& [name, col] : table.categorical) row.push_back(col[i]);
            if (response) row.push_back(format_double((*response)[i]));
            w.row(row);
        }
    };

    write_level(wave.persons, files.persons, "person_id", "household_id", &wave.response);
    write_level(wave.households, files.households, "household_id", "zone_id", nullptr);
    write_level(wave.zones, files.zones, "zone_id", "", nullptr);

    nlohmann::ordered_json j;
    j["intercept"] = format_double(truth.intercept);
    j["sd_zone"] = format_double(truth.sd_zone);
    j["sd_hh"] = format_double(truth.sd_hh);
    j["sd_resid"] = format_double(truth.sd_resid);
    nlohmann::ordered_json numeric = nlohmann::ordered_json::object();
    for (const auto& [name, effect] : truth.numeric_effects) {
        nlohmann::ordered_json e;
        e["knots"] = nlohmann::ordered_json::array();
        for (double k : effect.knots) e["knots"].push_back(format_double(k));
        e["slopes"] = nlohmann::ordered_json::array();
        for (double s : effect.slopes) e["slopes"].push_back(format_double(s));
        numeric[name] = std::move(e);
    }
    j["numeric_effects"] = std::move(numeric);
    nlohmann::ordered_json cats = nlohmann::ordered_json::object();
    for (const auto& [name, effects] : truth.categorical_effects) {
        nlohmann::ordered_json e = nlohmann::ordered_json::object();
        for (const auto& [category, beta] : effects) e[category] = format_double(beta);
        cats[name] = std::move(e);
    }
    j["categorical_effects"] = std::move(cats);

    std::ofstream out(files.truth, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + files.truth);
    out << j.dump(1) << '\n';
    return files;
}

}  // namespace thresher::synth

#endif  // THRESHER_SYNTH_HPP
