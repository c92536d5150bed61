#pragma once

#include <cmath>
#include <functional>
#include <memory>

#include "astgl/dataset.hpp"
#include "astgl/stgcn.hpp"

namespace astgl {

struct Hyperparams {
    double t_win = 0.5;
    std::size_t cheb_order = 3;
    std::size_t temporal_taps = 3;
    std::size_t gcn_channels = 8;
    std::size_t tcn_channels = 8;
    std::size_t num_blocks = 2;
    double lambda_reg = 1e-4;
    double gamma_agl = 1.0;
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 20;
    bool shared_pair_weights = false;
    bool literal_row_norm = false;
    std::uint64_t seed = 1;

    void validate() const;
    ModelConfig model_config(std::size_t n_buses, std::size_t window_len, GraphMode mode) const;
};

/// Filters and dense weights drawn uniform within the fan bound
/// +-sqrt(6/(fan_in+fan_out)); biases zero; pair weights zero so the first
/// adaptive graph is exactly uniform.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Fixed base-topology matrix for the comparison baselines: 0/1 connectivity
/// or 1/x admittance weights; zero diagonal; trips are ignored by design.
Tensor fixed_adjacency_matrix(const GridTopology& topology, GraphMode mode);

std::size_t parameter_count(const ModelParams& params);

struct AdamState {
    std::vector<Tensor> first;   // aligned with for_each_param order
    std::vector<Tensor> second;
    std::size_t step = 0;
};

/// Bias-corrected adaptive-moment update. Throws NumericalError naming the
/// parameter group on non-finite gradients.
void adam_step(ModelParams& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct TrainLogRow {
    std::size_t epoch = 0;
    std::size_t batch = 0;
    double l_agl = 0, l_cm = 0, total = 0;
    double train_acc = std::nan("");
    double val_acc = std::nan("");
};

void write_train_log_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& file);

struct Checkpoint {
    ModelConfig config;
    Hyperparams hyper;
    std::string model_id;  // "astgl", "stgcn_fixed_connectivity", "stgcn_fixed_admittance"
    std::uint64_t dataset_digest = 0;
    ModelParams params;       // current state
    ModelParams best_params;  // best validation accuracy so far
    double best_val_acc = -1.0;
    AdamState adam;
    std::size_t epochs_done = 0;
    std::uint64_t shuffle_state = 0;  // RNG state for the next epoch
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainLogRow> log;
    double final_train_acc = 0;
    double final_val_acc = 0;
    bool aborted = false;        // non-finite loss; checkpoint holds the last good step
    std::string abort_reason;
};

/// Minibatch training against the joint loss. Deterministic for a given
/// (dataset digest, hyperparams): per-sample gradients may be computed
/// concurrently but are reduced in sample order. Pass `resume` to continue a
/// run bit-exactly; `epoch_cap` (when nonzero) overrides hyper.epochs.
TrainResult train(const Dataset& dataset, const GridTopology& topology,
                  const Hyperparams& hyper, GraphMode mode, std::size_t epoch_cap = 0,
                  const Checkpoint* resume = nullptr);

/// Classifier decision: unstable on ties (the conservative alarm).
int predict_label(const Tensor& y_hat);

// ---------------------------------------------------------------------------
// hyperparameter search

struct SearchSpace {
    std::vector<double> t_win{0.5};
    std::vector<double> lambda_reg{1e-5, 1e-4, 1e-3};
    std::vector<std::size_t> cheb_order{1, 2, 3, 4, 5};
    std::vector<std::size_t> temporal_taps{2, 3, 4};
    std::vector<std::size_t> gcn_channels{4, 8, 12};
    std::vector<std::size_t> tcn_channels{4, 8, 12};
    std::vector<std::size_t> num_blocks{1, 2, 3};
    std::vector<double> learning_rate{3e-4, 1e-3, 3e-3};

    void validate() const;
};

struct TrialResult {
    std::size_t index = 0;
    Hyperparams hyper;
    double val_acc = std::nan("");
    std::size_t param_count = 0;
    bool failed = false;
    std::string error;
};

struct HpoResult {
    std::vector<TrialResult> trials;
    std::size_t best_index = 0;
    Hyperparams best;
};

/// Datasets are requested per observation-window length so T_win can be
/// searched; providers regenerate (or cache) deterministically.
using DatasetProvider = std::function<std::shared_ptr<const Dataset>(double t_win)>;

/// Seeded independent draws; every trial trains with `epoch_cap` epochs and
/// records validation accuracy. Ties break toward fewer parameters, then the
/// lower trial index.
HpoResult random_search_hpo(const SearchSpace& space, std::size_t budget,
                            const DatasetProvider& datasets, const GridTopology& topology,
                            const Hyperparams& base, std::uint64_t seed,
                            std::size_t epoch_cap);

/// One-factor sensitivity sweep over T_win with all else fixed.
std::vector<TrialResult> sweep_t_win(const std::vector<double>& values,
                                     const DatasetProvider& datasets,
                                     const GridTopology& topology, const Hyperparams& base,
                                     std::size_t epoch_cap);

void write_trial_table_csv(const std::vector<TrialResult>& trials,
                           const std::filesystem::path& file);

}  // namespace astgl
