#pragma once

#include <vector>

#include "astgl/autodiff.hpp"
#include "astgl/tensor.hpp"

namespace astgl {

/// Learnable weights of the adaptive graph builder. `weights` is either
/// [N x N x F x L] (one matrix per bus pair, the default) or [F x L]
/// (shared across pairs, for larger grids).
struct AdaptiveGraphParams {
    Tensor weights;
    double lambda = 1e-4;  // regularization coefficient, >= 0

    bool shared() const { return weights.rank() == 2; }
};

/// Single-layer spatial attention: weight [N x N], bias [N].
struct AttentionParams {
    Tensor weight;
    Tensor bias;
};

/// All graph-side intermediates for one input window, for inspection/export.
struct GraphBundle {
    Tensor a_adp;
    Tensor alpha_sp;
    Tensor a_sp;
    Tensor j_scaled;
    std::vector<Tensor> cheb_basis;
    double lambda_max = 0.0;
};

namespace graph {

/// Input-conditioned adjacency. Row i of the result sums to 1/L by
/// construction (shared row denominator); every entry lies in (0, 1].
Var adaptive_adjacency(Tape& tape, Var x, Var weights);

/// sum_ij ||x_i - x_j||^2 e_ij + lambda ||A||_F^2
Var learning_loss(Tape& tape, Var x, Var a_adp, double lambda);

struct Attention {
    Var scores;  // sigmoid(w A + b), pre-normalization
    Var alpha;   // row-normalized attention
    Var a_sp;    // alpha ⊙ A_adp
};

/// `literal_row_norm` switches the normalization to exp(z)/rowsum(z)
/// (ablation variant); the default is a standard row softmax.
Attention spatial_attention(Tape& tape, Var a_adp, Var weight, Var bias,
                            bool literal_row_norm = false);

struct ScaledLaplacian {
    Var j;           // I - D^{-1/2} A_sym D^{-1/2}
    Var lambda_max;  // dominant eigenvalue (power iteration)
    Var j_scaled;    // 2 J / lambda_max - I
};

/// Symmetrizes A_sp, floors degrees at 1e-8, normalizes and rescales so the
/// spectrum lands in [-1, 1]. Rejects negative entries.
ScaledLaplacian normalized_scaled_laplacian(Tape& tape, Var a_sp);

/// T_0 = I, T_1 = J_scaled, T_k = 2 J_scaled T_{k-1} - T_{k-2}.
std::vector<Var> chebyshev_basis(Tape& tape, Var j_scaled, std::size_t order);

}  // namespace graph

/// Convenience evaluation of the full graph side on plain tensors.
GraphBundle build_graph_bundle(const Tensor& x, const AdaptiveGraphParams& agl,
                               const AttentionParams& attn, std::size_t order,
                               bool literal_row_norm = false);

}  // namespace astgl
