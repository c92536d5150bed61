#pragma once

#include <string>
#include <vector>

#include "astgl/graph_learning.hpp"

namespace astgl {

/// How the network obtains its bus graph: learned from the input window, or a
/// fixed base-topology matrix (the comparison baselines).
enum class GraphMode { adaptive, fixed_connectivity, fixed_admittance };

std::string graph_mode_name(GraphMode mode);

struct ModelConfig {
    std::size_t n_buses = 12;
    std::size_t window_len = 51;   // L
    std::size_t in_channels = 3;   // {P, Q, V}
    std::size_t cheb_order = 3;    // K_s
    std::size_t temporal_taps = 3; // K_t
    std::size_t gcn_channels = 8;
    std::size_t tcn_channels = 8;
    std::size_t num_blocks = 2;
    double lambda_reg = 1e-4;  // graph-learning regularization
    double gamma_agl = 1.0;    // weight of the graph-learning loss in the total
    bool shared_pair_weights = false;
    bool literal_row_norm = false;
    GraphMode graph_mode = GraphMode::adaptive;

    std::size_t block_in_channels(std::size_t block) const {
        return block == 0 ? in_channels : tcn_channels;
    }
    std::size_t flat_features() const { return window_len * n_buses * tcn_channels; }
    bool adaptive() const { return graph_mode == GraphMode::adaptive; }

    void validate() const;
};

/// Filters of the stacked Re-STGCN blocks plus the classifier head.
struct StgcnParams {
    std::vector<Tensor> cheb_filters;      // per block: [K_s x F_in(b) x f_gcn]
    std::vector<Tensor> temporal_filters;  // per block: [K_t x f_gcn x f_tcn]
    std::vector<Tensor> residual_filters;  // per block: [K_t x F_in(b) x f_tcn]
    Tensor classifier_weight;              // [L*N*f_tcn x 2]
    Tensor classifier_bias;                // [2]
};

struct ModelParams {
    AdaptiveGraphParams agl;   // empty tensors in fixed graph modes
    AttentionParams attention; // empty tensors in fixed graph modes
    StgcnParams stgcn;
    Tensor fixed_adjacency;    // [N x N], fixed graph modes only
};

/// Ordered, deterministic walk over every trainable tensor. The same order is
/// used by the optimizer and the checkpoint format.
template <typename Params, typename Fn>
void for_each_param(Params& params, Fn&& fn) {
    if (!params.agl.weights.empty()) fn("agl.weights", params.agl.weights);
    if (!params.attention.weight.empty()) {
        fn("attention.weight", params.attention.weight);
        fn("attention.bias", params.attention.bias);
    }
    for (std::size_t b = 0; b < params.stgcn.cheb_filters.size(); ++b) {
        const std::string tag = std::to_string(b);
        fn("stgcn.cheb" + tag, params.stgcn.cheb_filters[b]);
        fn("stgcn.temporal" + tag, params.stgcn.temporal_filters[b]);
        fn("stgcn.residual" + tag, params.stgcn.residual_filters[b]);
    }
    fn("classifier.weight", params.stgcn.classifier_weight);
    fn("classifier.bias", params.stgcn.classifier_bias);
}

/// Every intermediate of one forward pass, for inspection and export.
struct ForwardTrace {
    Tensor a_adp, alpha_sp, a_sp, j_scaled;
    double lambda_max = 0.0;
    std::vector<Tensor> z_s;        // per block, post graph convolution
    std::vector<Tensor> z_st;       // per block, post temporal convolution
    std::vector<Tensor> z_st_prime; // per block, post residual fusion
    Tensor logits;  // [1 x 2]
    Tensor y_hat;   // [1 x 2], (stable, unstable)
    double l_agl = 0.0;
    bool used_adaptive_graph = false;
};

namespace stgcn {

/// Parameter leaves on a tape, in for_each_param order.
struct ParamVars {
    Var pair_weights, attn_weight, attn_bias;
    std::vector<Var> cheb, temporal, residual;
    Var cls_weight, cls_bias;
};

/// Tape-side handles of the forward pass.
struct ForwardVars {
    Var a_adp, alpha, a_sp, j_scaled, lambda_max;
    std::vector<Var> z_s, z_st, z_prime;
    Var logits, y_hat;
    Var l_agl;  // constant zero in fixed graph modes
    bool used_adaptive_graph = false;
};

ParamVars track_params(Tape& tape, const ModelParams& params, const ModelConfig& config,
                       bool trainable);

ForwardVars forward_pass(Tape& tape, Var x, const ParamVars& vars, const ModelConfig& config,
                         const Tensor* fixed_adjacency);

/// ReLU(phi * ReLU(z)) along time, same padding, independently per bus.
Var temporal_convolution(Tape& tape, Var z, Var phi);

/// ReLU((phi_res * ReLU(x_in)) + z_st), same padding.
Var residual_block(Tape& tape, Var x_in, Var z_st, Var phi_res);

struct Classification {
    Var logits;
    Var y_hat;
};
Classification classify(Tape& tape, Var features, Var weight, Var bias);

/// Cross-entropy against the (stable, unstable) probability pair.
Var classification_loss(Tape& tape, Var y_hat, int label);

/// gamma * l_agl + l_cm
Var total_loss(Tape& tape, Var l_agl, Var l_cm, double gamma);

}  // namespace stgcn

/// Plain-tensor forward pass.
ForwardTrace forward(const Tensor& x, const ModelParams& params, const ModelConfig& config);

}  // namespace astgl
