#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "astgl/simulator.hpp"

namespace astgl {

struct CaseRecord {
    std::uint64_t case_seed = 0;
    ScenarioGroup group = ScenarioGroup::A;
    std::vector<std::size_t> tripped;
    FaultSpec fault;
    int label = 0;
    std::string split;          // "train" or "test"
    std::size_t tensor_row = 0; // row within its split tensor
};

struct SplitTensors {
    Tensor x;  // [cases x L x N x 3]
    std::vector<std::uint8_t> labels;

    std::size_t cases() const { return labels.size(); }
};

struct DatasetManifest {
    std::string format_version = "ASTGL-DS v1";
    std::string group;
    std::size_t n_buses = 0;
    std::size_t window_len = 0;
    double t_win = 0.5;
    double dt_sample = 0.01;
    std::uint64_t generator_seed = 0;
    std::uint64_t grid_digest = 0;
    SurrogateConstants constants;
    // counts[split][label]
    std::map<std::string, std::array<std::size_t, 2>> counts;
    std::map<std::string, std::size_t> scenario_composition;
    std::uint64_t payload_digest = 0;
    std::vector<CaseRecord> cases;
};

struct Dataset {
    DatasetManifest manifest;
    SplitTensors train;
    SplitTensors test;

    const SplitTensors& split(const std::string& name) const;
    std::vector<const CaseRecord*> split_records(const std::string& name) const;
};

struct GenerationSpec {
    ScenarioGroup group = ScenarioGroup::A;
    std::size_t train_per_label = 383;  // 0 for evaluation-only groups
    std::size_t test_per_label = 96;
    double t_win = 0.5;
    double dt_sample = 0.01;
    std::uint64_t seed = 1;
    double dc_analogue_share = 0.15;
    std::size_t n2_weight = 2;  // draw weight of two-line trips vs single trips
    std::size_t attempt_budget_factor = 400;  // max attempts per requested case
};

/// Sweeps scenarios x load levels x motor fractions x fault specs with seeded
/// jitter until the per-label targets are met, enforcing label parity by
/// rejection and an 80/20 train/test split stratified by label and scenario.
/// Deterministic per seed; cases are written in case-seed order.
Dataset generate_dataset(const GridTopology& topology, const GenerationSpec& spec,
                         const SurrogateConstants& constants = {});

// --- dataset directory: manifest.json, topology.json, <split>.bin ---
void save_dataset(const Dataset& dataset, const GridTopology& topology,
                  const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);
GridTopology dataset_topology(const std::filesystem::path& dir);

/// Mirrors the binary payload as CSV for inspection (one row per case).
void export_dataset_csv(const Dataset& dataset, const std::filesystem::path& file);

/// FNV-1a over a file's bytes.
std::uint64_t file_digest(const std::filesystem::path& path);

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text);

}  // namespace astgl
