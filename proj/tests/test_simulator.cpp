#include <doctest.h>

#include <cmath>
#include <queue>
#include <set>

#include "astgl/grid.hpp"
#include "astgl/rng.hpp"
#include "astgl/simulator.hpp"

using namespace astgl;

namespace {

// Independent connectivity oracle (plain BFS over an edge list).
bool bfs_connected(const GridTopology& topo, const std::set<std::size_t>& removed) {
    std::vector<std::vector<std::size_t>> adj(topo.n_buses());
    for (const Line& l : topo.lines) {
        if (!l.in_service || removed.count(l.id)) continue;
        adj[l.from].push_back(l.to);
        adj[l.to].push_back(l.from);
    }
    std::vector<bool> seen(topo.n_buses(), false);
    std::queue<std::size_t> q;
    q.push(0);
    seen[0] = true;
    std::size_t n = 1;
    while (!q.empty()) {
        std::size_t b = q.front();
        q.pop();
        for (std::size_t next : adj[b]) {
            if (!seen[next]) {
                seen[next] = true;
                ++n;
                q.push(next);
            }
        }
    }
    return n == topo.n_buses();
}

// Bridge oracle: a line is a bridge iff removing it disconnects the graph.
std::vector<std::size_t> bridge_oracle(const GridTopology& topo) {
    std::vector<std::size_t> bridges;
    for (const Line& l : topo.lines) {
        if (!bfs_connected(topo, {l.id})) bridges.push_back(l.id);
    }
    return bridges;
}

}  // namespace

TEST_CASE("build_grid: default 12-bus layout") {
    GridTopology topo = build_grid(GridSpec{});
    CHECK(topo.n_buses() == 12);
    CHECK(topo.lines.size() == 16);
    CHECK(bfs_connected(topo, {}));
    CHECK(topo.buses_of_kind(BusKind::generator).size() == 3);
    CHECK(topo.buses_of_kind(BusKind::tie).size() == 2);
    CHECK(topo.buses_of_kind(BusKind::load).size() == 7);
    CHECK(topo.region_count() == 3);

    // All candidates are non-bridges per the independent oracle, split 5/5.
    const std::vector<std::size_t> bridges = bridge_oracle(topo);
    CHECK(topo.group_odd.size() == 5);
    CHECK(topo.group_even.size() == 5);
    for (std::size_t id : topo.group_odd) {
        CHECK(std::find(bridges.begin(), bridges.end(), id) == bridges.end());
    }
    for (std::size_t id : topo.group_even) {
        CHECK(std::find(bridges.begin(), bridges.end(), id) == bridges.end());
    }
    CHECK(find_bridges(topo) == bridges);

    for (const Bus& b : topo.buses) {
        if (b.kind != BusKind::load) continue;
        const double m = b.motor_fraction;
        CHECK((m == 0.6 || m == 0.75 || m == 0.9 || m == 0.95));
    }
    for (const Line& l : topo.lines) CHECK(l.reactance > 0.0);
}

TEST_CASE("build_grid: determinism, minimal size, errors") {
    GridSpec spec;
    spec.seed = 77;
    CHECK(topology_to_json(build_grid(spec)) == topology_to_json(build_grid(spec)));

    GridSpec other = spec;
    other.seed = 78;
    CHECK(topology_to_json(build_grid(spec)) != topology_to_json(build_grid(other)));

    GridSpec tiny;
    tiny.n_buses = 6;
    GridTopology six = build_grid(tiny);
    CHECK(bfs_connected(six, {}));
    CHECK(six.lines.size() >= six.n_buses());  // at least one cycle

    GridSpec bad;
    bad.n_buses = 5;
    CHECK_THROWS_AS(build_grid(bad), ConfigError);
}

TEST_CASE("topology JSON round trip and digest") {
    GridTopology topo = build_grid(GridSpec{});
    GridTopology back = topology_from_json(topology_to_json(topo));
    CHECK(topology_to_json(back) == topology_to_json(topo));
    CHECK(grid_digest(back) == grid_digest(topo));

    CHECK_THROWS_AS(topology_from_json("{ not json"), DataError);
    CHECK_THROWS_AS(topology_from_json("{}"), DataError);
}

TEST_CASE("enumerate_scenarios: counts and disjointness") {
    GridTopology topo = build_grid(GridSpec{});
    auto a = enumerate_scenarios(topo, ScenarioGroup::A);
    REQUIRE(a.size() == 1);
    CHECK(a[0].tripped.empty());

    auto b = enumerate_scenarios(topo, ScenarioGroup::B);
    auto c = enumerate_scenarios(topo, ScenarioGroup::C);

    // Combinatorial oracle: singles plus connectivity-preserving pairs.
    auto expected_count = [&](const std::vector<std::size_t>& cands) {
        std::size_t count = 0;
        for (std::size_t id : cands) {
            if (bfs_connected(topo, {id})) ++count;
        }
        for (std::size_t i = 0; i < cands.size(); ++i)
            for (std::size_t j = i + 1; j < cands.size(); ++j)
                if (bfs_connected(topo, {cands[i], cands[j]})) ++count;
        return count;
    };
    CHECK(b.size() == expected_count(topo.group_odd));
    CHECK(c.size() == expected_count(topo.group_even));

    // Every emitted scenario leaves the grid connected; groups share no line.
    std::set<std::size_t> b_lines, c_lines;
    for (const auto& sc : b) {
        CHECK(bfs_connected(topo, {sc.tripped.begin(), sc.tripped.end()}));
        b_lines.insert(sc.tripped.begin(), sc.tripped.end());
    }
    for (const auto& sc : c) {
        CHECK(bfs_connected(topo, {sc.tripped.begin(), sc.tripped.end()}));
        c_lines.insert(sc.tripped.begin(), sc.tripped.end());
    }
    for (std::size_t id : b_lines) CHECK(c_lines.count(id) == 0);
}

TEST_CASE("simulate_case: no fault means equilibrium forever, labeled stable") {
    GridTopology topo = build_grid(GridSpec{});
    TopologyScenario base{ScenarioGroup::A, {}};
    FaultSpec none;
    none.fault_bus = 1;
    none.depth = 1.0;  // dips are only ever depressive; depth 1.0 is a no-op
    none.duration = 0.0;
    SimResult r = simulate_case(topo, base, none);
    REQUIRE(r.valid);
    CHECK(label_case(r, topo) == 0);
    double drift = 0.0;
    for (std::size_t b = 0; b < topo.n_buses(); ++b) {
        for (std::size_t s = 0; s < r.samples(); s += 500) {
            drift = std::max(drift,
                             std::fabs(r.trajectories.at(s, b, 2) - r.trajectories.at(0, b, 2)));
        }
    }
    CHECK(drift < 1e-9);
}

TEST_CASE("simulate_case: deep long fault stalls motors; fine-step oracle agrees") {
    GridTopology topo = build_grid(GridSpec{});
    TopologyScenario base{ScenarioGroup::A, {}};
    FaultSpec severe;
    severe.fault_bus = topo.buses_of_kind(BusKind::load).front();
    severe.depth = 0.05;
    severe.duration = 0.3;
    severe.load_level = 1.2;
    severe.motor_fraction = 0.95;

    SimResult r = simulate_case(topo, base, severe);
    REQUIRE(r.valid);
    CHECK(label_case(r, topo) == 1);
    // At least one load bus never recovers.
    bool depressed = false;
    const std::size_t last = r.samples() - 1;
    for (std::size_t b : topo.buses_of_kind(BusKind::load)) {
        if (r.trajectories.at(last, b, 2) < 0.8) depressed = true;
    }
    CHECK(depressed);

    SurrogateConstants fine;
    fine.dt = 2.5e-4;
    SimResult rf = simulate_case(topo, base, severe, fine);
    REQUIRE(rf.valid);
    CHECK(label_case(rf, topo) == 1);
}

TEST_CASE("simulate_case: physical ranges and validation") {
    GridTopology topo = build_grid(GridSpec{});
    TopologyScenario base{ScenarioGroup::A, {}};
    Rng rng(3);
    auto loads = topo.buses_of_kind(BusKind::load);
    for (int i = 0; i < 5; ++i) {
        FaultSpec f;
        f.fault_bus = rng.pick(loads);
        f.depth = rng.uniform(0.05, 0.3);
        f.duration = 0.2;
        f.load_level = rng.uniform(0.8, 1.2);
        f.motor_fraction = 0.9;
        SimResult r = simulate_case(topo, base, f);
        REQUIRE(r.valid);
        for (std::size_t s = 0; s < r.samples(); s += 100) {
            for (std::size_t b = 0; b < topo.n_buses(); ++b) {
                const double v = r.trajectories.at(s, b, 2);
                CHECK(v >= 0.0);
                CHECK(v <= 1.2);
                // Q = c_q * m * s * load bounds the slip at 1.
                const double q = r.trajectories.at(s, b, 1);
                CHECK(q <= 1.2 * 0.95 * 1.0 * 1.2 + 1e-12);
            }
        }
    }

    FaultSpec on_gen;
    on_gen.fault_bus = topo.buses_of_kind(BusKind::generator).front();
    CHECK_THROWS_AS(simulate_case(topo, base, on_gen), DataError);
    FaultSpec nowhere;
    nowhere.fault_bus = 99;
    CHECK_THROWS_AS(simulate_case(topo, base, nowhere), DataError);
}

TEST_CASE("step halving preserves labels and stable-case voltages to 1e-6") {
    GridTopology topo = build_grid(GridSpec{});
    auto scenarios = enumerate_scenarios(topo, ScenarioGroup::B);
    auto loads = topo.buses_of_kind(BusKind::load);
    Rng rng(11);
    SurrogateConstants full, half;
    half.dt = 5e-4;
    for (int i = 0; i < 6; ++i) {
        FaultSpec f;
        f.fault_bus = rng.pick(loads);
        f.depth = rng.uniform(0.05, 0.3);
        f.duration = rng.pick(std::vector<double>{0.1, 0.2, 0.3});
        f.load_level = rng.uniform(0.8, 1.2);
        f.motor_fraction = rng.pick(std::vector<double>{0.6, 0.75, 0.9, 0.95});
        const TopologyScenario& sc = scenarios[rng.below(scenarios.size())];
        SimResult r1 = simulate_case(topo, sc, f, full);
        SimResult r2 = simulate_case(topo, sc, f, half);
        REQUIRE(r1.valid);
        REQUIRE(r2.valid);
        const int l1 = label_case(r1, topo);
        CHECK(l1 == label_case(r2, topo));
        if (l1 == 0) {
            double dv = 0.0;
            for (std::size_t s = 0; s < r1.samples(); s += 50) {
                for (std::size_t b = 0; b < topo.n_buses(); ++b) {
                    dv = std::max(dv, std::fabs(r1.trajectories.at(s, b, 2) -
                                                r2.trajectories.at(2 * s, b, 2)));
                }
            }
            CHECK(dv < 1e-6);
        }
    }
}

TEST_CASE("fault-duration monotonicity: longer faults never rescue a case") {
    GridTopology topo = build_grid(GridSpec{});
    auto scenarios = enumerate_scenarios(topo, ScenarioGroup::B);
    auto loads = topo.buses_of_kind(BusKind::load);
    Rng rng(19);
    for (int i = 0; i < 15; ++i) {
        FaultSpec f;
        f.fault_bus = rng.pick(loads);
        f.depth = rng.uniform(0.05, 0.3);
        f.load_level = rng.uniform(0.8, 1.2);
        f.motor_fraction = rng.pick(std::vector<double>{0.6, 0.75, 0.9, 0.95});
        const TopologyScenario& sc = scenarios[rng.below(scenarios.size())];
        int prev = 0;
        for (double d : {0.1, 0.2, 0.3}) {
            f.duration = d;
            SimResult r = simulate_case(topo, sc, f);
            REQUIRE(r.valid);
            const int label = label_case(r, topo);
            if (prev == 1) CHECK(label == 1);
            prev = label;
        }
    }
}

TEST_CASE("label_case: suffix scan semantics") {
    GridTopology topo = build_grid(GridSpec{});
    const std::size_t n = topo.n_buses();
    const std::size_t samples = 101;
    SimResult r;
    r.valid = true;
    r.dt = 0.1;
    r.trajectories = Tensor({samples, n, 3});
    for (std::size_t s = 0; s < samples; ++s)
        for (std::size_t b = 0; b < n; ++b) r.trajectories.at(s, b, 2) = 1.0;
    CHECK(label_case(r, topo) == 0);

    // A load bus crossing 0.8 only at t = 9.9 s and staying above: stable.
    const std::size_t load0 = topo.buses_of_kind(BusKind::load).front();
    for (std::size_t s = 0; s < samples; ++s) {
        r.trajectories.at(s, load0, 2) = s >= 99 ? 0.85 : 0.5;
    }
    CHECK(label_case(r, topo) == 0);

    // Ending below 0.8: unstable.
    r.trajectories.at(samples - 1, load0, 2) = 0.7;
    CHECK(label_case(r, topo) == 1);

    // Tie and generator buses do not drive the label.
    for (std::size_t s = 0; s < samples; ++s) {
        r.trajectories.at(s, load0, 2) = 1.0;
        r.trajectories.at(s, topo.buses_of_kind(BusKind::tie).front(), 2) = 0.5;
    }
    CHECK(label_case(r, topo) == 0);

    SimResult short_r;
    short_r.valid = true;
    short_r.dt = 0.1;
    short_r.trajectories = Tensor({11, n, 3});
    CHECK_THROWS_AS(label_case(short_r, topo), DataError);
}

TEST_CASE("window_case: sample counts and exact subsampling") {
    GridTopology topo = build_grid(GridSpec{});
    TopologyScenario base{ScenarioGroup::A, {}};
    FaultSpec f;
    f.fault_bus = topo.buses_of_kind(BusKind::load).front();
    f.depth = 0.2;
    f.duration = 0.2;
    SimResult r = simulate_case(topo, base, f);
    REQUIRE(r.valid);

    Tensor w = window_case(r, r.fault_clear_time, 0.5, 0.01);
    CHECK(w.shape() == Shape{51, topo.n_buses(), 3});

    Tensor two = window_case(r, r.fault_clear_time, 0.01, 0.01);
    CHECK(two.extent(0) == 2);

    // Windowed samples equal the full-resolution trajectory bit-for-bit.
    const std::size_t start = static_cast<std::size_t>(std::llround(0.2 / r.dt));
    for (std::size_t k = 0; k < 51; ++k)
        for (std::size_t b = 0; b < topo.n_buses(); ++b)
            for (std::size_t ch = 0; ch < 3; ++ch)
                CHECK(w.at(k, b, ch) == r.trajectories.at(start + 10 * k, b, ch));

    CHECK_THROWS_AS(window_case(r, 9.9, 0.5, 0.01), DataError);
    CHECK_THROWS_AS(window_case(r, 0.2, 0.5, 0.0033), DataError);
}
