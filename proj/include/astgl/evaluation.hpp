#pragma once

#include <map>

#include "astgl/training.hpp"

namespace astgl {

/// TP counts correctly recognized unstable cases (class 1).
struct ConfusionCounts {
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::size_t total() const { return tp + tn + fp + fn; }
};

/// Undefined values (empty denominators) are NaN, never silently zero.
struct MetricValues {
    double accuracy = std::nan("");
    double f1 = std::nan("");
    double precision = std::nan("");
    double recall = std::nan("");
};

MetricValues metrics(const ConfusionCounts& counts);

struct GroupReport {
    ConfusionCounts counts;
    MetricValues values;
};

struct EvalReport {
    std::string model_id;
    std::uint64_t dataset_digest = 0;
    std::string split;
    GroupReport overall;
    std::map<std::string, GroupReport> by_group;  // scenario group -> report
};

/// Batch evaluation with the checkpoint's best-validation parameters.
/// Decision threshold: argmax with ties resolved to unstable.
EvalReport evaluate(const Checkpoint& checkpoint, const Dataset& dataset,
                    const std::string& split);

std::string report_to_json(const EvalReport& report);
void save_report(const EvalReport& report, const std::filesystem::path& json_path);
void write_report_csv(const EvalReport& report, const std::filesystem::path& csv_path);

struct BaselineResult {
    Checkpoint checkpoint;
    EvalReport report;  // on the dataset's test split
};

/// Same network and harness with AGLM/SAM bypassed: the graph is the fixed
/// base-topology matrix (connectivity or admittance), constant across
/// scenarios.
BaselineResult baseline_fixed_adjacency(const Dataset& dataset, const GridTopology& topology,
                                        GraphMode variant, const Hyperparams& hyper,
                                        std::size_t epoch_cap = 0);

// ---------------------------------------------------------------------------
// adaptive-graph inspection

struct CaseInspection {
    std::uint64_t case_seed = 0;
    std::string group;
    int label = 0;
    std::size_t fault_bus = 0;
    std::size_t fault_region = 0;
    Tensor a_adp, alpha_sp, a_sp;
    double fault_region_mass = 0;  // fault-bus row mass inside its own region
    double in_region_norm = 0;     // mass inside, relative to the uniform share
    double out_region_norm = 0;    // mass outside, relative to the uniform share
};

struct SignTest {
    std::size_t pairs = 0;
    std::size_t positive = 0;  // in-region concentration exceeds out-of-region
    std::size_t negative = 0;
    std::size_t tied = 0;
    double p_value = 1.0;  // one-sided binomial, H0: no concentration

    bool significant(double alpha = 0.05) const { return p_value <= alpha; }
};

struct InspectionResult {
    std::vector<CaseInspection> cases;
    SignTest sign_test;
};

/// One-sided sign-test p-value: P[X >= positive] for X ~ Binom(positive+negative, 1/2).
double sign_test_p_value(std::size_t positive, std::size_t negative);

/// Per-case adaptive matrices plus the fault-region attention-mass statistic:
/// each case contributes a paired comparison of the fault-bus row's
/// size-normalized mass inside vs outside the fault's region.
InspectionResult inspect_adaptive_graph(const Checkpoint& checkpoint, const Dataset& dataset,
                                        const std::string& split, const GridTopology& topology,
                                        std::size_t max_cases = 0);

/// One CSV per matrix kind plus a per-case summary with the sign test.
void write_inspection_csv(const InspectionResult& result, const std::filesystem::path& dir);

/// One row per case: case id, scenario group, label, then the flattened
/// features of the requested layer. Layers: L1..L<num_blocks> are the block
/// outputs, the next is the logits, the last the probability pair.
void export_embeddings(const Checkpoint& checkpoint, const Dataset& dataset,
                       const std::string& split, const std::string& layer,
                       const std::filesystem::path& csv_path);

std::vector<std::string> embedding_layers(const ModelConfig& config);

}  // namespace astgl
