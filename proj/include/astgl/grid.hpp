#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "astgl/tensor.hpp"

namespace astgl {

enum class BusKind { generator, tie, load };
enum class ScenarioGroup { A, B, C };

std::string bus_kind_name(BusKind kind);
BusKind bus_kind_from(const std::string& name);
std::string scenario_group_name(ScenarioGroup g);
ScenarioGroup scenario_group_from(const std::string& name);

struct Bus {
    std::size_t id = 0;
    BusKind kind = BusKind::load;
    double motor_fraction = 0.0;  // load buses only; one of {0.6, 0.75, 0.9, 0.95}
    std::size_t region = 0;       // generator-rooted partition index
};

struct Line {
    std::size_t id = 0;
    std::size_t from = 0;
    std::size_t to = 0;
    double reactance = 0.1;  // per unit, > 0
    bool in_service = true;
};

struct GridTopology {
    std::vector<Bus> buses;
    std::vector<Line> lines;
    std::vector<std::size_t> group_odd;   // candidate trip lines, scenario group B
    std::vector<std::size_t> group_even;  // candidate trip lines, scenario group C
    std::uint64_t seed = 0;

    std::size_t n_buses() const { return buses.size(); }
    std::vector<std::size_t> buses_of_kind(BusKind kind) const;
    std::vector<std::size_t> region_members(std::size_t region) const;
    std::size_t region_count() const;
};

struct GridSpec {
    std::size_t n_buses = 12;
    std::uint64_t seed = 1;
    double ring_reactance = 0.25;    // ring links, per unit
    double chord_reactance = 0.08;   // backbone chords, per unit
    double reactance_jitter = 0.15;  // multiplicative spread, U[1-j, 1+j]
};

/// Deterministic meshed grid: a ring plus chords, three generator buses, two
/// tie buses, the rest induction-motor load buses split into generator-rooted
/// regions. The default 12-bus spec yields 16 lines and 10 trip candidates
/// split 5/5 into the odd/even groups.
GridTopology build_grid(const GridSpec& spec);

/// Line ids whose removal would disconnect the in-service graph.
std::vector<std::size_t> find_bridges(const GridTopology& topology);

/// Voltage-sensitivity structure of the in-service network with generators
/// grounded: rows/columns over non-generator buses, built from the inverse of
/// the reduced susceptance Laplacian (ridge `eps` guards conditioning).
struct SensitivityMatrix {
    std::vector<std::size_t> row_bus;  // row -> bus id
    std::vector<int> row_of;           // bus id -> row, -1 for generators
    std::vector<double> raw;           // inverse, m x m
    std::vector<double> normalized;    // row-normalized inverse, m x m

    std::size_t size() const { return row_bus.size(); }
};

SensitivityMatrix grounded_sensitivity(const GridTopology& topology,
                                       const std::vector<std::size_t>& tripped,
                                       double eps = 1e-6);

/// Connectivity of the in-service graph with `tripped` lines removed.
bool is_connected(const GridTopology& topology, const std::vector<std::size_t>& tripped);

struct TopologyScenario {
    ScenarioGroup group = ScenarioGroup::A;
    std::vector<std::size_t> tripped;  // 0, 1, or 2 line ids

    std::string key() const;
};

/// Group A: the base case. Groups B/C: all single trips plus all
/// connectivity-preserving pairs from the group's candidate set.
std::vector<TopologyScenario> enumerate_scenarios(const GridTopology& topology,
                                                  ScenarioGroup group, int max_trips = 2);

// --- topology files (UTF-8 JSON) ---
std::string topology_to_json(const GridTopology& topology);
GridTopology topology_from_json(const std::string& text);
void save_topology(const GridTopology& topology, const std::filesystem::path& path);
GridTopology load_topology(const std::filesystem::path& path);

/// Content hash of the canonical JSON form (FNV-1a 64).
std::uint64_t grid_digest(const GridTopology& topology);

}  // namespace astgl
