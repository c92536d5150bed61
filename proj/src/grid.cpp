#include "astgl/grid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <queue>

#include <json.hpp>

#include "astgl/common.hpp"
#include "astgl/rng.hpp"

namespace astgl {

using nlohmann::json;

std::string bus_kind_name(BusKind kind) {
    switch (kind) {
        case BusKind::generator: return "generator";
        case BusKind::tie: return "tie";
        case BusKind::load: return "load";
    }
    return "?";
}

BusKind bus_kind_from(const std::string& name) {
    if (name == "generator") return BusKind::generator;
    if (name == "tie") return BusKind::tie;
    if (name == "load") return BusKind::load;
    throw DataError(concat("unknown bus kind '", name, "'"));
}

std::string scenario_group_name(ScenarioGroup g) {
    switch (g) {
        case ScenarioGroup::A: return "A";
        case ScenarioGroup::B: return "B";
        case ScenarioGroup::C: return "C";
    }
    return "?";
}

ScenarioGroup scenario_group_from(const std::string& name) {
    if (name == "A") return ScenarioGroup::A;
    if (name == "B") return ScenarioGroup::B;
    if (name == "C") return ScenarioGroup::C;
    throw DataError(concat("unknown scenario group '", name, "'"));
}

std::vector<std::size_t> GridTopology::buses_of_kind(BusKind kind) const {
    std::vector<std::size_t> out;
    for (const Bus& b : buses) {
        if (b.kind == kind) out.push_back(b.id);
    }
    return out;
}

std::vector<std::size_t> GridTopology::region_members(std::size_t region) const {
    std::vector<std::size_t> out;
    for (const Bus& b : buses) {
        if (b.region == region) out.push_back(b.id);
    }
    return out;
}

std::size_t GridTopology::region_count() const {
    std::size_t count = 0;
    for (const Bus& b : buses) count = std::max(count, b.region + 1);
    return count;
}

namespace {

std::vector<std::vector<std::pair<std::size_t, std::size_t>>> adjacency_of(
    const GridTopology& topo, const std::vector<std::size_t>& tripped) {
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> adj(topo.n_buses());
    for (const Line& l : topo.lines) {
        if (!l.in_service) continue;
        if (std::find(tripped.begin(), tripped.end(), l.id) != tripped.end()) continue;
        adj[l.from].push_back({l.to, l.id});
        adj[l.to].push_back({l.from, l.id});
    }
    return adj;
}

}  // namespace

bool is_connected(const GridTopology& topology, const std::vector<std::size_t>& tripped) {
    const auto adj = adjacency_of(topology, tripped);
    std::vector<bool> seen(topology.n_buses(), false);
    std::queue<std::size_t> frontier;
    frontier.push(0);
    seen[0] = true;
    std::size_t count = 1;
    while (!frontier.empty()) {
        const std::size_t b = frontier.front();
        frontier.pop();
        for (auto [next, line] : adj[b]) {
            if (!seen[next]) {
                seen[next] = true;
                ++count;
                frontier.push(next);
            }
        }
    }
    return count == topology.n_buses();
}

std::vector<std::size_t> find_bridges(const GridTopology& topology) {
    const auto adj = adjacency_of(topology, {});
    const std::size_t n = topology.n_buses();
    std::vector<int> visit(n, -1), low(n, -1);
    std::vector<std::size_t> bridges;
    int clock = 0;
    // Iterative DFS with explicit stack (edge id guards the parent edge).
    struct Frame {
        std::size_t bus;
        std::size_t edge_from;  // line id used to enter, SIZE_MAX at root
        std::size_t next = 0;
    };
    for (std::size_t root = 0; root < n; ++root) {
        if (visit[root] != -1) continue;
        std::vector<Frame> stack{{root, static_cast<std::size_t>(-1), 0}};
        visit[root] = low[root] = clock++;
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < adj[f.bus].size()) {
                auto [next, line] = adj[f.bus][f.next++];
                if (line == f.edge_from) continue;
                if (visit[next] == -1) {
                    visit[next] = low[next] = clock++;
                    stack.push_back({next, line, 0});
                } else {
                    low[f.bus] = std::min(low[f.bus], visit[next]);
                }
            } else {
                const Frame done = f;
                stack.pop_back();
                if (!stack.empty()) {
                    Frame& parent = stack.back();
                    low[parent.bus] = std::min(low[parent.bus], low[done.bus]);
                    if (low[done.bus] > visit[parent.bus]) bridges.push_back(done.edge_from);
                }
            }
        }
    }
    std::sort(bridges.begin(), bridges.end());
    return bridges;
}

SensitivityMatrix grounded_sensitivity(const GridTopology& topology,
                                       const std::vector<std::size_t>& tripped, double eps) {
    SensitivityMatrix s;
    const std::size_t n = topology.n_buses();
    s.row_of.assign(n, -1);
    for (const Bus& b : topology.buses) {
        if (b.kind == BusKind::generator) continue;
        s.row_of[b.id] = static_cast<int>(s.row_bus.size());
        s.row_bus.push_back(b.id);
    }
    const std::size_t m = s.row_bus.size();
    std::vector<double> g(m * m, 0.0);
    for (const Line& l : topology.lines) {
        if (!l.in_service) continue;
        if (std::find(tripped.begin(), tripped.end(), l.id) != tripped.end()) continue;
        const double w = 1.0 / l.reactance;
        const int ri = s.row_of[l.from];
        const int rj = s.row_of[l.to];
        if (ri >= 0) g[static_cast<std::size_t>(ri) * m + ri] += w;
        if (rj >= 0) g[static_cast<std::size_t>(rj) * m + rj] += w;
        if (ri >= 0 && rj >= 0) {
            g[static_cast<std::size_t>(ri) * m + rj] -= w;
            g[static_cast<std::size_t>(rj) * m + ri] -= w;
        }
    }
    for (std::size_t i = 0; i < m; ++i) g[i * m + i] += eps;

    // Gauss-Jordan with partial pivoting; m stays in the dozens.
    std::vector<double> inv(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i) inv[i * m + i] = 1.0;
    for (std::size_t col = 0; col < m; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < m; ++r) {
            if (std::fabs(g[r * m + col]) > std::fabs(g[pivot * m + col])) pivot = r;
        }
        if (std::fabs(g[pivot * m + col]) < 1e-14) {
            throw NumericalError("grounded_sensitivity: reduced Laplacian is singular "
                                 "(a bus island has no generator)");
        }
        if (pivot != col) {
            for (std::size_t k = 0; k < m; ++k) {
                std::swap(g[pivot * m + k], g[col * m + k]);
                std::swap(inv[pivot * m + k], inv[col * m + k]);
            }
        }
        const double d = g[col * m + col];
        for (std::size_t k = 0; k < m; ++k) {
            g[col * m + k] /= d;
            inv[col * m + k] /= d;
        }
        for (std::size_t r = 0; r < m; ++r) {
            if (r == col) continue;
            const double f = g[r * m + col];
            if (f == 0.0) continue;
            for (std::size_t k = 0; k < m; ++k) {
                g[r * m + k] -= f * g[col * m + k];
                inv[r * m + k] -= f * inv[col * m + k];
            }
        }
    }
    s.raw = inv;
    s.normalized.assign(m * m, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        double row_sum = 0.0;
        for (std::size_t k = 0; k < m; ++k) row_sum += inv[r * m + k];
        for (std::size_t k = 0; k < m; ++k) s.normalized[r * m + k] = inv[r * m + k] / row_sum;
    }
    return s;
}

GridTopology build_grid(const GridSpec& spec) {
    const std::size_t n = spec.n_buses;
    if (n < 6) throw ConfigError(concat("build_grid: need at least 6 buses, got ", n));
    if (spec.ring_reactance <= 0 || spec.chord_reactance <= 0 || spec.reactance_jitter < 0 ||
        spec.reactance_jitter >= 1) {
        throw ConfigError("build_grid: invalid reactance parameters");
    }

    GridTopology topo;
    topo.seed = spec.seed;
    topo.buses.resize(n);

    const std::vector<std::size_t> gens{0, n / 3, 2 * n / 3};
    std::vector<std::size_t> ties{n / 6, n / 2};
    for (std::size_t& t : ties) {
        while (std::find(gens.begin(), gens.end(), t) != gens.end()) t = (t + 1) % n;
    }

    Rng motor_rng = substream(spec.seed, "grid.motor");
    const std::vector<double> motor_levels{0.6, 0.75, 0.9, 0.95};
    for (std::size_t i = 0; i < n; ++i) {
        Bus& b = topo.buses[i];
        b.id = i;
        if (std::find(gens.begin(), gens.end(), i) != gens.end()) {
            b.kind = BusKind::generator;
        } else if (std::find(ties.begin(), ties.end(), i) != ties.end()) {
            b.kind = BusKind::tie;
        } else {
            b.kind = BusKind::load;
            b.motor_fraction = motor_rng.pick(motor_levels);
        }
    }

    // Ring plus evenly spread strong chords; every line sits on a cycle, so
    // trips reroute flow instead of islanding buses.
    Rng line_rng = substream(spec.seed, "grid.lines");
    auto add_line = [&](std::size_t a, std::size_t b, double base_x) {
        Line l;
        l.id = topo.lines.size();
        l.from = std::min(a, b);
        l.to = std::max(a, b);
        l.reactance = base_x * line_rng.uniform(1.0 - spec.reactance_jitter,
                                                1.0 + spec.reactance_jitter);
        topo.lines.push_back(l);
    };
    for (std::size_t i = 0; i < n; ++i) add_line(i, (i + 1) % n, spec.ring_reactance);
    const std::size_t chords = std::max<std::size_t>(1, n / 3);
    for (std::size_t k = 0; k < chords; ++k) {
        const std::size_t a = (k * n) / chords;
        const std::size_t b = (a + n / 2 + 1) % n;
        add_line(a, b, spec.chord_reactance);
    }

    // Regions: nearest generator by hop count, ties resolved to the lower
    // generator index (multi-source BFS layer by layer).
    {
        const auto adj = adjacency_of(topo, {});
        std::vector<int> region(n, -1);
        std::queue<std::size_t> frontier;
        for (std::size_t g = 0; g < gens.size(); ++g) {
            region[gens[g]] = static_cast<int>(g);
            frontier.push(gens[g]);
        }
        while (!frontier.empty()) {
            const std::size_t b = frontier.front();
            frontier.pop();
            std::vector<std::size_t> neighbors;
            for (auto [next, line] : adj[b]) neighbors.push_back(next);
            std::sort(neighbors.begin(), neighbors.end());
            for (std::size_t next : neighbors) {
                if (region[next] == -1) {
                    region[next] = region[b];
                    frontier.push(next);
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) topo.buses[i].region = static_cast<std::size_t>(region[i]);
    }

    // Trip candidates: the 10 non-bridge lines whose loss perturbs the
    // voltage-sensitivity structure the most, split by alternating rank so
    // both groups carry a comparable share of structurally heavy lines.
    std::vector<std::size_t> bridges = find_bridges(topo);
    const SensitivityMatrix base = grounded_sensitivity(topo, {});
    std::vector<std::pair<double, std::size_t>> ranked;
    for (const Line& l : topo.lines) {
        if (std::find(bridges.begin(), bridges.end(), l.id) != bridges.end()) continue;
        const SensitivityMatrix without = grounded_sensitivity(topo, {l.id});
        double delta = 0.0;
        for (std::size_t i = 0; i < base.normalized.size(); ++i) {
            const double d = base.normalized[i] - without.normalized[i];
            delta += d * d;
        }
        ranked.push_back({std::sqrt(delta), l.id});
    }
    if (ranked.empty()) {
        throw ConfigError("build_grid: topology has no trippable (non-bridge) lines");
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    std::size_t take = std::min<std::size_t>(10, ranked.size());
    take -= take % 2;
    for (std::size_t i = 0; i < take; ++i) {
        (i % 2 == 0 ? topo.group_odd : topo.group_even).push_back(ranked[i].second);
    }
    std::sort(topo.group_odd.begin(), topo.group_odd.end());
    std::sort(topo.group_even.begin(), topo.group_even.end());
    return topo;
}

std::string TopologyScenario::key() const {
    std::string k = scenario_group_name(group);
    for (std::size_t id : tripped) k += concat("-", id);
    return k;
}

std::vector<TopologyScenario> enumerate_scenarios(const GridTopology& topology,
                                                  ScenarioGroup group, int max_trips) {
    std::vector<TopologyScenario> out;
    if (group == ScenarioGroup::A) {
        out.push_back({ScenarioGroup::A, {}});
        return out;
    }
    const std::vector<std::size_t>& candidates =
        group == ScenarioGroup::B ? topology.group_odd : topology.group_even;
    for (std::size_t id : candidates) {
        if (is_connected(topology, {id})) out.push_back({group, {id}});
    }
    if (max_trips >= 2) {
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            for (std::size_t j = i + 1; j < candidates.size(); ++j) {
                const std::vector<std::size_t> pair{candidates[i], candidates[j]};
                if (is_connected(topology, pair)) out.push_back({group, pair});
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON form

std::string topology_to_json(const GridTopology& topology) {
    json j;
    j["seed"] = topology.seed;
    j["buses"] = json::array();
    for (const Bus& b : topology.buses) {
        json jb{{"id", b.id}, {"kind", bus_kind_name(b.kind)}, {"region", b.region}};
        if (b.kind == BusKind::load) jb["motor_fraction"] = b.motor_fraction;
        j["buses"].push_back(jb);
    }
    j["lines"] = json::array();
    for (const Line& l : topology.lines) {
        j["lines"].push_back({{"id", l.id},
                              {"from", l.from},
                              {"to", l.to},
                              {"reactance", l.reactance},
                              {"status", l.in_service ? "in" : "out"}});
    }
    j["trip_candidates"] = {{"odd", topology.group_odd}, {"even", topology.group_even}};
    return j.dump(2);
}

GridTopology topology_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(concat("topology file is not valid JSON: ", e.what()));
    }
    try {
        GridTopology topo;
        topo.seed = j.at("seed").get<std::uint64_t>();
        for (const json& jb : j.at("buses")) {
            Bus b;
            b.id = jb.at("id").get<std::size_t>();
            b.kind = bus_kind_from(jb.at("kind").get<std::string>());
            b.region = jb.at("region").get<std::size_t>();
            if (jb.contains("motor_fraction")) b.motor_fraction = jb["motor_fraction"].get<double>();
            topo.buses.push_back(b);
        }
        for (const json& jl : j.at("lines")) {
            Line l;
            l.id = jl.at("id").get<std::size_t>();
            l.from = jl.at("from").get<std::size_t>();
            l.to = jl.at("to").get<std::size_t>();
            l.reactance = jl.at("reactance").get<double>();
            l.in_service = jl.at("status").get<std::string>() == "in";
            if (l.reactance <= 0) throw DataError("topology line reactance must be positive");
            topo.lines.push_back(l);
        }
        topo.group_odd = j.at("trip_candidates").at("odd").get<std::vector<std::size_t>>();
        topo.group_even = j.at("trip_candidates").at("even").get<std::vector<std::size_t>>();
        return topo;
    } catch (const json::exception& e) {
        throw DataError(concat("topology file is missing fields: ", e.what()));
    }
}

void save_topology(const GridTopology& topology, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(concat("cannot write topology file ", path.string()));
    out << topology_to_json(topology) << "\n";
}

GridTopology load_topology(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(concat("cannot read topology file ", path.string()));
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return topology_from_json(text);
}

std::uint64_t grid_digest(const GridTopology& topology) {
    return hash_label(topology_to_json(topology));
}

}  // namespace astgl
