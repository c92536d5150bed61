#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "astgl/kernels.hpp"
#include "astgl/tensor.hpp"

namespace astgl {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::int32_t id = -1;

    const Tensor& value() const;
    bool valid() const { return tape != nullptr && id >= 0; }
};

/// Gradients of one backward pass, addressed by tape node.
class Gradients {
public:
    explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

    /// Gradient of the loss w.r.t. `v`; zero tensor if the node never
    /// contributed to the loss.
    const Tensor& grad(Var v) const;

private:
    std::vector<Tensor> grads_;
    mutable std::vector<Tensor> zero_cache_;
};

/// Dynamic computation record (define-by-run). Confined to the thread that
/// builds it; independent tapes may run concurrently. Nodes are appended in
/// topological order by construction and replaying them from the leaves
/// reproduces every value bit-exactly.
class Tape {
public:
    enum class Op : std::uint8_t {
        leaf,
        add,
        sub,
        mul,
        add_scalar,
        mul_scalar,
        neg,
        abs,
        exp,
        relu,
        sigmoid,
        pow_const,
        clamp_min,
        transpose,
        reshape,
        reduce_sum,
        reduce_mean,
        frobenius_sq,
        softmax_rows,
        softmax_rows_literal,
        add_rowwise,
        scale_rows,
        scale_cols,
        div_rows,
        matmul,
        conv1d,
        pair_scores,
        pair_sqdist,
        dominant_eig,
        graph_conv,
        bce_loss,
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    const Tensor& value(Var v) const;
    void reserve(std::size_t n) { nodes_.reserve(n); }

    // --- leaves ---
    Var leaf(Tensor t);
    Var constant(Tensor t);  // leaf with requires_grad forced off

    // --- elementwise; binary ops take equal shapes or a 1-element operand ---
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var add_scalar(Var a, double c);
    Var mul_scalar(Var a, double c);
    Var neg(Var a);
    Var abs(Var a);
    Var exp(Var a);
    Var relu(Var a);
    Var sigmoid(Var a);
    Var pow_const(Var a, double exponent);
    Var clamp_min(Var a, double floor);

    // --- structure ---
    Var transpose(Var a);
    Var reshape(Var a, Shape shape);

    // --- reductions (axes given as a sorted list; result drops those axes,
    //     reducing over all axes yields a 1-element tensor) ---
    Var reduce_sum(Var a, const std::vector<std::size_t>& axes);
    Var reduce_mean(Var a, const std::vector<std::size_t>& axes);
    Var frobenius_sq(Var a);

    // --- row-structured ops on matrices [R x C] with vectors [R] ---
    Var softmax_rows(Var z);
    /// Literal variant dividing exp(z_ij) by the plain row sum of z (ablation).
    Var softmax_rows_literal(Var z);
    Var add_rowwise(Var m, Var v);
    Var scale_rows(Var m, Var v);
    Var scale_cols(Var m, Var v);
    Var div_rows(Var m, Var v);

    // --- linear algebra / convolution ---
    Var matmul(Var a, Var b);
    /// x rank-2 [L x C_in] or rank-3 [L x lanes x C_in]; kernel [K_t x C_in x C_out].
    Var conv1d(Var x, Var kernel, kernels::Padding pad);

    // --- fused model primitives ---
    /// s[i,j,t] = sum_f w(i,j,f,t) * |X[t,i,f] - X[t,j,f]|.
    /// weights shape [N,N,F,L] (per-pair) or [F,L] (shared).
    Var pair_scores(Var x, Var weights);
    /// d[i,j] = sum_{t,f} (X[t,i,f] - X[t,j,f])^2.
    Var pair_sqdist(Var x);
    /// Largest eigenvalue of a symmetric matrix via power iteration
    /// (<=200 iterations, eigen-residual tolerance 1e-9, fallback 2.0 on
    /// non-convergence; the fallback propagates no gradient).
    Var dominant_eig(Var m);
    /// Chebyshev-filtered spatial convolution; basis holds the K_s matrices.
    Var graph_conv(Var x, Var theta, const std::vector<Var>& basis);
    /// probs: probability pair (stable, unstable); label in {0,1}.
    /// Probabilities are clamped at 1e-12 before the log.
    Var bce_loss(Var probs, int label);

    /// Reverse-mode sweep from a scalar loss. Untouched requires_grad leaves
    /// receive zero gradients.
    Gradients backward(Var loss) const;

    /// Recomputes every non-leaf value from the leaves; returns true when all
    /// values reproduce bit-exactly (replay-determinism check).
    bool replay_check() const;

private:
    struct Node {
        Op op;
        std::vector<std::int32_t> in;
        Tensor value;
        Tensor aux;           // op-specific saved data (e.g. eigenvector, row sums)
        double c0 = 0.0;      // op-specific scalar
        std::int64_t i0 = 0;  // op-specific int (axis mask, padding, label, mode)
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;

    Var push(Node node);
    Tensor eval(const Node& node) const;
    void backprop_node(std::int32_t id, const Tensor& g, std::vector<Tensor>& grads) const;
    void accumulate(std::vector<Tensor>& grads, std::int32_t id, const Tensor& g) const;

    friend struct Var;
};

/// Central-difference gradient check. `f` is evaluated as a pure function of
/// the parameter list; `analytic` are the gradients under test. Returns the
/// max relative error with denominator max(1, |analytic|).
double finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& params, const std::vector<Tensor>& analytic,
                         double h = 1e-5);

}  // namespace astgl
