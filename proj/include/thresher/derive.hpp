#ifndef THRESHER_DERIVE_HPP
#define THRESHER_DERIVE_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "thresher/core.hpp"

namespace thresher::derive {

inline constexpr double kEarthRadiusMiles = 3958.8;

struct Coordinate {
    double lat = 0.0;
    double lon = 0.0;

    void validate() const {
        if (!std::isfinite(lat) || !std::isfinite(lon))
            throw std::invalid_argument("coordinate is not finite");
        if (lat < -90.0 || lat > 90.0)
            throw std::invalid_argument("latitude outside [-90, 90]: " + format_double(lat));
        if (lon < -180.0 || lon > 180.0)
            throw std::invalid_argument("longitude outside [-180, 180]: " + format_double(lon));
    }
};

enum class TripMode { personal_motorized, other };

struct TripRecord {
    std::string person_id;
    TripMode mode = TripMode::other;
    Coordinate origin;
    Coordinate destination;
    // Resolved distance; NaN means "not yet routed".
    double distance_miles = std::numeric_limits<double>::quiet_NaN();

    bool has_distance() const { return std::isfinite(distance_miles); }
};

// --------------------------------------------------------------------------
// Diversity entropy over household + 3-tier employment shares, in [0, 1].
// 0*ln(0) is taken as 0 for empty categories.
// --------------------------------------------------------------------------
inline double entropy_diversity(double hh, double be, double re, double se) {
    if (hh < 0 || be < 0 || re < 0 || se < 0)
        throw std::invalid_argument("entropy_diversity: negative count");
    const double total = hh + be + re + se;
    if (total <= 0.0)
        throw std::invalid_argument("entropy_diversity: all counts are zero, diversity undefined");
    double h = 0.0;
    for (double c : {hh, be, re, se}) {
        if (c == 0.0) continue;
        const double p = c / total;
        h -= p * std::log(p);
    }
    const double value = h / std::log(4.0);
    // Clamp tiny negative round-off at the single-category boundary.
    return std::min(1.0, std::max(0.0, value));
}

// --------------------------------------------------------------------------
// Daily VMT for one person: sum of trip distances over personal motorized
// trips; other modes contribute nothing.
// --------------------------------------------------------------------------
inline double person_daily_vmt(const std::vector<TripRecord>& trips) {
    double total = 0.0;
    for (std::size_t i = 0; i < trips.size(); ++i) {
        const TripRecord& t = trips[i];
        if (t.mode != TripMode::personal_motorized) continue;
        if (!t.has_distance())
            throw std::runtime_error("unresolved trip distance for person '" + t.person_id +
                                     "' trip #" + std::to_string(i + 1));
        total += t.distance_miles;
    }
    return total;
}

// --------------------------------------------------------------------------
// Great-circle distance (haversine), Earth radius 3958.8 miles.
// --------------------------------------------------------------------------
inline double haversine_miles(const Coordinate& a, const Coordinate& b) {
    a.validate();
    b.validate();
    const double deg = M_PI / 180.0;
    const double dlat = (b.lat - a.lat) * deg;
    const double dlon = (b.lon - a.lon) * deg;
    const double s1 = std::sin(dlat / 2.0);
    const double s2 = std::sin(dlon / 2.0);
    const double h = s1 * s1 + std::cos(a.lat * deg) * std::cos(b.lat * deg) * s2 * s2;
    return 2.0 * kEarthRadiusMiles * std::asin(std::min(1.0, std::sqrt(h)));
}

// --------------------------------------------------------------------------
// Undirected road graph with positive edge lengths.
// --------------------------------------------------------------------------
class RoadGraph {
public:
    void add_node(std::int64_t id, Coordinate c) {
        c.validate();
        auto [it, inserted] = index_.emplace(id, nodes_.size());
        if (!inserted) throw std::invalid_argument("duplicate node id " + std::to_string(id));
        nodes_.push_back({id, c});
        adjacency_.emplace_back();
    }

    void add_edge(std::int64_t u, std::int64_t v, double length_miles) {
        if (!(length_miles > 0.0) || !std::isfinite(length_miles))
            throw std::invalid_argument("edge length must be positive and finite");
        const std::size_t iu = require(u);
        const std::size_t iv = require(v);
        adjacency_[iu].push_back({iv, length_miles});
        adjacency_[iv].push_back({iu, length_miles});
    }

    bool empty() const { return nodes_.empty(); }
    std::size_t node_count() const { return nodes_.size(); }

    std::int64_t node_id(std::size_t index) const { return nodes_[index].id; }
    const Coordinate& node_coord(std::size_t index) const { return nodes_[index].coord; }

    // Nearest node by haversine; ties broken by lowest node id.
    std::size_t snap(const Coordinate& point) const {
        if (empty()) throw std::runtime_error("cannot snap to an empty road graph");
        std::size_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const double d = haversine_miles(point, nodes_[i].coord);
            if (d < best_dist || (d == best_dist && nodes_[i].id < nodes_[best].id)) {
                best = i;
                best_dist = d;
            }
        }
        return best;
    }

    // Dijkstra from a node index; returns per-node shortest distances
    // (infinity where unreachable).
    std::vector<double> shortest_from(std::size_t source) const {
        std::vector<double> dist(nodes_.size(), std::numeric_limits<double>::infinity());
        using Item = std::pair<double, std::size_t>;
        std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
        dist[source] = 0.0;
        heap.push({0.0, source});
        while (!heap.empty()) {
            auto [d, u] = heap.top();
            heap.pop();
            if (d > dist[u]) continue;
            for (const auto& [v, w] : adjacency_[u]) {
                const double nd = d + w;
                if (nd < dist[v]) {
                    dist[v] = nd;
                    heap.push({nd, v});
                }
            }
        }
        return dist;
    }

private:
    struct Node {
        std::int64_t id;
        Coordinate coord;
    };

    std::size_t require(std::int64_t id) const {
        auto it = index_.find(id);
        if (it == index_.end())
            throw std::invalid_argument("edge references unknown node " + std::to_string(id));
        return it->second;
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<std::pair<std::size_t, double>>> adjacency_;
    std::map<std::int64_t, std::size_t> index_;
};

// Shortest network distance between the nodes nearest to origin/destination.
inline double route_miles(const RoadGraph& graph, const Coordinate& origin,
                          const Coordinate& destination) {
    if (graph.empty()) throw std::runtime_error("route_miles: empty road graph");
    const std::size_t s = graph.snap(origin);
    const std::size_t t = graph.snap(destination);
    const double d = graph.shortest_from(s)[t];
    if (!std::isfinite(d))
        throw std::runtime_error("route_miles: no path between nodes " +
                                 std::to_string(graph.node_id(s)) + " and " +
                                 std::to_string(graph.node_id(t)));
    return d;
}

// --------------------------------------------------------------------------
// Minimum distance from a point to a facility set, by haversine or by the
// road network.
// --------------------------------------------------------------------------
struct Metric {
    const RoadGraph* graph = nullptr;  // null -> haversine

    static Metric haversine() { return Metric{}; }
    static Metric route(const RoadGraph& g) { return Metric{&g}; }
};

inline double nearest_distance(const Coordinate& point, const std::vector<Coordinate>& facilities,
                               const Metric& metric = Metric::haversine()) {
    if (facilities.empty()) throw std::invalid_argument("nearest_distance: empty facility list");
    double best = std::numeric_limits<double>::infinity();
    if (metric.graph == nullptr) {
        for (const auto& f : facilities) best = std::min(best, haversine_miles(point, f));
        return best;
    }
    // One Dijkstra from the snapped point covers every facility.
    const RoadGraph& g = *metric.graph;
    const auto dist = g.shortest_from(g.snap(point));
    for (const auto& f : facilities) {
        const double d = dist[g.snap(f)];
        if (!std::isfinite(d)) continue;
        best = std::min(best, d);
    }
    if (!std::isfinite(best))
        throw std::runtime_error("nearest_distance: all facilities unreachable on the road graph");
    return best;
}

// --------------------------------------------------------------------------
// Planar area-weighted centroid of a polygon ring given in lat/lon degrees.
// The ring may or may not repeat its first vertex.
// --------------------------------------------------------------------------
inline Coordinate polygon_centroid(std::vector<Coordinate> ring) {
    if (!ring.empty() && ring.size() >= 2 && ring.front().lat == ring.back().lat &&
        ring.front().lon == ring.back().lon)
        ring.pop_back();
    if (ring.size() < 3) throw std::invalid_argument("polygon_centroid: need at least 3 vertices");
    for (const auto& c : ring) c.validate();

    double twice_area = 0.0, cx = 0.0, cy = 0.0;
    for (std::size_t i = 0; i < ring.size(); ++i) {
        const auto& a = ring[i];
        const auto& b = ring[(i + 1) % ring.size()];
        const double cross = a.lon * b.lat - b.lon * a.lat;
        twice_area += cross;
        cx += (a.lon + b.lon) * cross;
        cy += (a.lat + b.lat) * cross;
    }
    if (std::abs(twice_area) < 1e-15)
        throw std::invalid_argument("polygon_centroid: degenerate (zero-area) ring");
    return Coordinate{cy / (3.0 * twice_area), cx / (3.0 * twice_area)};
}

}  // namespace thresher::derive

#endif  // THRESHER_DERIVE_HPP
