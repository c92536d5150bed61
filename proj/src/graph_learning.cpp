#include "astgl/graph_learning.hpp"

#include "astgl/common.hpp"

namespace astgl::graph {

Var adaptive_adjacency(Tape& tape, Var x, Var weights) {
    const Tensor& xt = x.value();
    if (xt.rank() != 3) {
        throw DimensionError(concat("adaptive_adjacency: trajectories must be [L x N x F], got ",
                                    xt.shape_string()));
    }
    if (xt.extent(1) < 2) {
        throw DimensionError(concat("adaptive_adjacency: need at least 2 buses, got ",
                                    xt.extent(1)));
    }
    const double inv_len = 1.0 / static_cast<double>(xt.extent(0));
    Var scores = tape.pair_scores(x, weights);                    // [N,N,L]
    Var damped = tape.exp(tape.neg(tape.relu(scores)));           // entries in (0,1]
    Var numer = tape.reduce_sum(damped, {2});                     // [N,N]
    Var denom = tape.reduce_sum(numer, {1});                      // [N], shared per row
    return tape.mul_scalar(tape.div_rows(numer, denom), inv_len);
}

Var learning_loss(Tape& tape, Var x, Var a_adp, double lambda) {
    if (lambda < 0.0) {
        throw ConfigError(concat("graph learning loss: lambda must be >= 0, got ", lambda));
    }
    const Tensor& at = a_adp.value();
    if (at.rank() != 2 || at.extent(0) != at.extent(1) || at.extent(0) != x.value().extent(1)) {
        throw DimensionError(concat("graph learning loss: adjacency ", at.shape_string(),
                                    " inconsistent with trajectories ", x.value().shape_string()));
    }
    Var dist = tape.pair_sqdist(x);
    Var smooth = tape.reduce_sum(tape.mul(dist, a_adp), {0, 1});
    Var reg = tape.mul_scalar(tape.frobenius_sq(a_adp), lambda);
    return tape.add(smooth, reg);
}

Attention spatial_attention(Tape& tape, Var a_adp, Var weight, Var bias, bool literal_row_norm) {
    Var pre = tape.add_rowwise(tape.matmul(weight, a_adp), bias);
    Var scores = tape.sigmoid(pre);
    Var alpha = literal_row_norm ? tape.softmax_rows_literal(scores) : tape.softmax_rows(scores);
    Var a_sp = tape.mul(alpha, a_adp);
    return {scores, alpha, a_sp};
}

ScaledLaplacian normalized_scaled_laplacian(Tape& tape, Var a_sp) {
    const Tensor& at = a_sp.value();
    if (at.rank() != 2 || at.extent(0) != at.extent(1)) {
        throw DimensionError(concat("laplacian: adjacency must be square, got ",
                                    at.shape_string()));
    }
    for (std::size_t i = 0; i < at.numel(); ++i) {
        if (at[i] < 0.0) {
            throw NumericalError(concat("laplacian: adjacency entry ", at[i],
                                        " is negative at linear index ", i));
        }
    }
    const std::size_t n = at.extent(0);
    Var sym = tape.mul_scalar(tape.add(a_sp, tape.transpose(a_sp)), 0.5);
    Var deg = tape.clamp_min(tape.reduce_sum(sym, {1}), 1e-8);
    Var dinv = tape.pow_const(deg, -0.5);
    Var normalized = tape.scale_cols(tape.scale_rows(sym, dinv), dinv);
    Var ident = tape.constant(Tensor::eye(n));
    Var j = tape.sub(ident, normalized);
    Var lambda_max = tape.dominant_eig(j);
    Var j_scaled = tape.sub(tape.mul(tape.mul_scalar(j, 2.0), tape.pow_const(lambda_max, -1.0)),
                            ident);
    return {j, lambda_max, j_scaled};
}

std::vector<Var> chebyshev_basis(Tape& tape, Var j_scaled, std::size_t order) {
    if (order < 1) throw ConfigError("chebyshev_basis: order must be >= 1");
    const std::size_t n = j_scaled.value().extent(0);
    std::vector<Var> basis;
    basis.reserve(order);
    basis.push_back(tape.constant(Tensor::eye(n)));
    if (order >= 2) basis.push_back(j_scaled);
    for (std::size_t k = 2; k < order; ++k) {
        Var next = tape.sub(tape.mul_scalar(tape.matmul(j_scaled, basis[k - 1]), 2.0),
                            basis[k - 2]);
        basis.push_back(next);
    }
    return basis;
}

}  // namespace astgl::graph

namespace astgl {

GraphBundle build_graph_bundle(const Tensor& x, const AdaptiveGraphParams& agl,
                               const AttentionParams& attn, std::size_t order,
                               bool literal_row_norm) {
    Tape tape;
    Var xv = tape.constant(x);
    Var wv = tape.constant(agl.weights);
    Var a_adp = graph::adaptive_adjacency(tape, xv, wv);
    graph::Attention att = graph::spatial_attention(tape, a_adp, tape.constant(attn.weight),
                                                    tape.constant(attn.bias), literal_row_norm);
    graph::ScaledLaplacian lap = graph::normalized_scaled_laplacian(tape, att.a_sp);
    std::vector<Var> basis = graph::chebyshev_basis(tape, lap.j_scaled, order);

    GraphBundle bundle;
    bundle.a_adp = a_adp.value();
    bundle.alpha_sp = att.alpha.value();
    bundle.a_sp = att.a_sp.value();
    bundle.j_scaled = lap.j_scaled.value();
    bundle.lambda_max = lap.lambda_max.value()[0];
    bundle.cheb_basis.reserve(basis.size());
    for (Var b : basis) bundle.cheb_basis.push_back(b.value());
    return bundle;
}

}  // namespace astgl
