#include "astgl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace astgl {

namespace {

const char* op_name(Tape::Op op) {
    switch (op) {
        case Tape::Op::leaf: return "leaf";
        case Tape::Op::add: return "add";
        case Tape::Op::sub: return "sub";
        case Tape::Op::mul: return "mul";
        case Tape::Op::add_scalar: return "add_scalar";
        case Tape::Op::mul_scalar: return "mul_scalar";
        case Tape::Op::neg: return "neg";
        case Tape::Op::abs: return "abs";
        case Tape::Op::exp: return "exp";
        case Tape::Op::relu: return "relu";
        case Tape::Op::sigmoid: return "sigmoid";
        case Tape::Op::pow_const: return "pow_const";
        case Tape::Op::clamp_min: return "clamp_min";
        case Tape::Op::transpose: return "transpose";
        case Tape::Op::reshape: return "reshape";
        case Tape::Op::reduce_sum: return "reduce_sum";
        case Tape::Op::reduce_mean: return "reduce_mean";
        case Tape::Op::frobenius_sq: return "frobenius_sq";
        case Tape::Op::softmax_rows: return "softmax_rows";
        case Tape::Op::softmax_rows_literal: return "softmax_rows_literal";
        case Tape::Op::add_rowwise: return "add_rowwise";
        case Tape::Op::scale_rows: return "scale_rows";
        case Tape::Op::scale_cols: return "scale_cols";
        case Tape::Op::div_rows: return "div_rows";
        case Tape::Op::matmul: return "matmul";
        case Tape::Op::conv1d: return "conv1d";
        case Tape::Op::pair_scores: return "pair_scores";
        case Tape::Op::pair_sqdist: return "pair_sqdist";
        case Tape::Op::dominant_eig: return "dominant_eig";
        case Tape::Op::graph_conv: return "graph_conv";
        case Tape::Op::bce_loss: return "bce_loss";
    }
    return "?";
}

// Elementwise broadcast tag: 0 = equal shapes, 1 = b is 1-element, 2 = a is 1-element.
std::int64_t broadcast_mode(const Tensor& a, const Tensor& b, const char* what) {
    if (a.same_shape(b)) return 0;
    if (b.numel() == 1) return 1;
    if (a.numel() == 1) return 2;
    throw DimensionError(concat(what, ": shapes ", a.shape_string(), " and ", b.shape_string(),
                                " are neither equal nor scalar-broadcastable"));
}

// Coordinates of linear index `idx` under `shape`, written into coords.
inline void unravel(std::size_t idx, const Shape& shape, std::size_t* coords) {
    for (std::size_t a = shape.size(); a-- > 0;) {
        coords[a] = idx % shape[a];
        idx /= shape[a];
    }
}

struct ReducePlan {
    Shape out_shape;
    std::vector<std::size_t> out_index_of;  // out linear index per input linear index
    std::size_t reduced_count = 1;
};

ReducePlan make_reduce_plan(const Shape& in_shape, std::int64_t axis_mask) {
    ReducePlan plan;
    std::vector<bool> reduced(in_shape.size(), false);
    for (std::size_t a = 0; a < in_shape.size(); ++a) {
        if (axis_mask & (std::int64_t{1} << a)) {
            reduced[a] = true;
            plan.reduced_count *= in_shape[a];
        } else {
            plan.out_shape.push_back(in_shape[a]);
        }
    }
    if (plan.out_shape.empty()) plan.out_shape = {1};

    const std::size_t n = shape_numel(in_shape);
    plan.out_index_of.resize(n);
    std::size_t coords[8];
    for (std::size_t idx = 0; idx < n; ++idx) {
        unravel(idx, in_shape, coords);
        std::size_t out_idx = 0;
        for (std::size_t a = 0; a < in_shape.size(); ++a) {
            if (!reduced[a]) out_idx = out_idx * in_shape[a] + coords[a];
        }
        plan.out_index_of[idx] = out_idx;
    }
    return plan;
}

std::int64_t axes_to_mask(const std::vector<std::size_t>& axes, std::size_t rank,
                          const char* what) {
    std::int64_t mask = 0;
    for (std::size_t a : axes) {
        if (a >= rank) throw DimensionError(concat(what, ": axis ", a, " out of range for rank ", rank));
        mask |= std::int64_t{1} << a;
    }
    return mask;
}

// da[m x k] += g[m x n] * b^T, i.e. da[i,p] += sum_j g[i,j] * b[p,j]
void mm_acc_gbt(const Tensor& g, const Tensor& b, Tensor& da) {
    const std::size_t m = g.extent(0), n = g.extent(1), k = b.extent(0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += g.at(i, j) * b.at(p, j);
            da[i * k + p] += acc;
        }
    }
}

// db[k x n] += a^T * g, i.e. db[p,j] += sum_i a[i,p] * g[i,j]
void mm_acc_atg(const Tensor& a, const Tensor& g, Tensor& db) {
    const std::size_t m = a.extent(0), k = a.extent(1), n = g.extent(1);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * g.at(i, j);
        }
    }
}

struct ConvDims {
    std::size_t len, lanes, c_in, taps, c_out, out_len, pad_left;
    bool rank2;
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernel, kernels::Padding pad) {
    ConvDims d{};
    if (x.rank() == 2) {
        d.rank2 = true;
        d.len = x.extent(0);
        d.lanes = 1;
        d.c_in = x.extent(1);
    } else if (x.rank() == 3) {
        d.rank2 = false;
        d.len = x.extent(0);
        d.lanes = x.extent(1);
        d.c_in = x.extent(2);
    } else {
        throw DimensionError(concat("conv1d: input rank must be 2 or 3, got ", x.shape_string()));
    }
    if (kernel.rank() != 3) {
        throw DimensionError(concat("conv1d: kernel must be [taps x c_in x c_out], got ",
                                    kernel.shape_string()));
    }
    d.taps = kernel.extent(0);
    d.c_out = kernel.extent(2);
    if (kernel.extent(1) != d.c_in) {
        throw DimensionError(concat("conv1d: kernel input channels ", kernel.extent(1),
                                    " do not match input channels ", d.c_in));
    }
    if (pad == kernels::Padding::valid && d.taps > d.len) {
        throw DimensionError(concat("conv1d: kernel length ", d.taps,
                                    " exceeds sequence length ", d.len, " under valid padding"));
    }
    d.out_len = kernels::conv_out_len(d.len, d.taps, pad);
    d.pad_left = kernels::conv_pad_left(d.taps, pad);
    return d;
}

struct PairDims {
    std::size_t len, n, f;
    bool shared;
};

PairDims pair_dims(const Tensor& x, const Tensor* w) {
    if (x.rank() != 3) {
        throw DimensionError(concat("pair op: trajectories must be [L x N x F], got ",
                                    x.shape_string()));
    }
    PairDims d{x.extent(0), x.extent(1), x.extent(2), false};
    if (w != nullptr) {
        if (w->rank() == 4) {
            d.shared = false;
            if (w->extent(0) != d.n || w->extent(1) != d.n || w->extent(2) != d.f ||
                w->extent(3) != d.len) {
                throw DimensionError(concat("pair_scores: weights ", w->shape_string(),
                                            " inconsistent with trajectories ", x.shape_string()));
            }
        } else if (w->rank() == 2) {
            d.shared = true;
            if (w->extent(0) != d.f || w->extent(1) != d.len) {
                throw DimensionError(concat("pair_scores: shared weights ", w->shape_string(),
                                            " inconsistent with trajectories ", x.shape_string()));
            }
        } else {
            throw DimensionError(concat("pair_scores: weights must be [N x N x F x L] or [F x L], got ",
                                        w->shape_string()));
        }
    }
    return d;
}

constexpr double kEigTol = 1e-9;
constexpr int kEigMaxIter = 200;
constexpr double kEigFallback = 2.0;
constexpr double kProbClamp = 1e-12;

// Power iteration on a symmetric matrix. Starts from a normalized ramp vector
// (an all-ones start would be orthogonal to alternating-sign modes). Converged
// means the eigen-residual ||Mv - lambda v|| dropped to 1e-9; a Rayleigh-step
// difference criterion stalls on near-degenerate spectra and makes the
// converged/fallback decision unstable under bus relabeling. Returns the
// fallback 2.0 when not converged within 200 iterations; v holds the final
// iterate either way.
double power_iteration(const Tensor& m, std::vector<double>& v, bool& converged) {
    const std::size_t nn = m.extent(0);
    v.resize(nn);
    std::vector<double> w(nn);
    double norm = 0;
    for (std::size_t i = 0; i < nn; ++i) {
        v[i] = 1.0 + static_cast<double>(i) / static_cast<double>(nn);
        norm += v[i] * v[i];
    }
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    auto apply = [&]() {
        double rayleigh = 0;
        for (std::size_t i = 0; i < nn; ++i) {
            double acc = 0;
            for (std::size_t j = 0; j < nn; ++j) acc += m.at(i, j) * v[j];
            w[i] = acc;
            rayleigh += v[i] * acc;
        }
        return rayleigh;
    };
    double lambda = apply();
    converged = false;
    for (int iter = 0; iter < kEigMaxIter; ++iter) {
        double residual = 0;
        for (std::size_t i = 0; i < nn; ++i) {
            const double r = w[i] - lambda * v[i];
            residual += r * r;
        }
        if (std::sqrt(residual) <= kEigTol) {
            converged = true;
            break;
        }
        double wn = 0;
        for (double x : w) wn += x * x;
        wn = std::sqrt(wn);
        if (wn < 1e-300) break;
        for (std::size_t i = 0; i < nn; ++i) v[i] = w[i] / wn;
        lambda = apply();
    }
    return converged ? lambda : kEigFallback;
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Gradients

const Tensor& Var::value() const { return tape->value(*this); }

const Tensor& Gradients::grad(Var v) const {
    const std::size_t id = static_cast<std::size_t>(v.id);
    if (id < grads_.size() && !grads_[id].empty()) return grads_[id];
    if (zero_cache_.size() <= id) zero_cache_.resize(id + 1);
    if (zero_cache_[id].empty()) zero_cache_[id] = Tensor::zeros(v.value().shape());
    return zero_cache_[id];
}

// ---------------------------------------------------------------------------
// Tape basics

const Tensor& Tape::value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

Var Tape::push(Node node) {
    if (node.op != Op::leaf) {
        for (std::int32_t in : node.in) {
            if (nodes_[static_cast<std::size_t>(in)].needs_grad) {
                node.needs_grad = true;
                break;
            }
        }
        node.value.check_finite(op_name(node.op));
    }
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor t) {
    t.check_finite("leaf");
    Node n;
    n.op = Op::leaf;
    n.needs_grad = t.requires_grad;
    n.value = std::move(t);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor t) {
    t.requires_grad = false;
    return leaf(std::move(t));
}

// ---------------------------------------------------------------------------
// forward evaluation (shared by op builders and replay_check)

Tensor Tape::eval(const Node& n) const {
    auto in = [&](std::size_t i) -> const Tensor& {
        return nodes_[static_cast<std::size_t>(n.in[i])].value;
    };
    switch (n.op) {
        case Op::leaf:
            return n.value;
        case Op::add:
        case Op::sub:
        case Op::mul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            const Tensor& big = (n.i0 == 2) ? b : a;
            Tensor out(big.shape());
            const std::size_t sz = out.numel();
            for (std::size_t i = 0; i < sz; ++i) {
                const double av = (n.i0 == 2) ? a[0] : a[i];
                const double bv = (n.i0 == 1) ? b[0] : b[i];
                out[i] = n.op == Op::add ? av + bv : n.op == Op::sub ? av - bv : av * bv;
            }
            return out;
        }
        case Op::add_scalar: {
            Tensor out = in(0);
            for (double& v : out.vec()) v += n.c0;
            return out;
        }
        case Op::mul_scalar: {
            Tensor out = in(0);
            for (double& v : out.vec()) v *= n.c0;
            return out;
        }
        case Op::neg: {
            Tensor out = in(0);
            for (double& v : out.vec()) v = -v;
            return out;
        }
        case Op::abs: {
            Tensor out = in(0);
            for (double& v : out.vec()) v = std::fabs(v);
            return out;
        }
        case Op::exp: {
            Tensor out = in(0);
            for (double& v : out.vec()) v = std::exp(v);
            return out;
        }
        case Op::relu: {
            Tensor out = in(0);
            for (double& v : out.vec()) v = v > 0.0 ? v : 0.0;
            return out;
        }
        case Op::sigmoid: {
            Tensor out = in(0);
            for (double& v : out.vec()) v = 1.0 / (1.0 + std::exp(-v));
            return out;
        }
        case Op::pow_const: {
            Tensor out = in(0);
            for (double& v : out.vec()) v = std::pow(v, n.c0);
            return out;
        }
        case Op::clamp_min: {
            Tensor out = in(0);
            for (double& v : out.vec()) v = v > n.c0 ? v : n.c0;
            return out;
        }
        case Op::transpose: {
            const Tensor& a = in(0);
            Tensor out({a.extent(1), a.extent(0)});
            for (std::size_t i = 0; i < a.extent(0); ++i)
                for (std::size_t j = 0; j < a.extent(1); ++j) out.at(j, i) = a.at(i, j);
            return out;
        }
        case Op::reshape: {
            return Tensor(n.value.shape(), in(0).vec());
        }
        case Op::reduce_sum:
        case Op::reduce_mean: {
            const Tensor& a = in(0);
            ReducePlan plan = make_reduce_plan(a.shape(), n.i0);
            Tensor out(plan.out_shape);
            for (std::size_t i = 0; i < a.numel(); ++i) out[plan.out_index_of[i]] += a[i];
            if (n.op == Op::reduce_mean) {
                const double inv = 1.0 / static_cast<double>(plan.reduced_count);
                for (double& v : out.vec()) v *= inv;
            }
            return out;
        }
        case Op::frobenius_sq: {
            const Tensor& a = in(0);
            double acc = 0;
            for (double v : a.vec()) acc += v * v;
            return Tensor::scalar(acc);
        }
        case Op::softmax_rows: {
            const Tensor& z = in(0);
            const std::size_t rows = z.extent(0), cols = z.extent(1);
            Tensor out(z.shape());
            for (std::size_t i = 0; i < rows; ++i) {
                double mx = z.at(i, 0);
                for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, z.at(i, j));
                double sum = 0;
                for (std::size_t j = 0; j < cols; ++j) {
                    const double e = std::exp(z.at(i, j) - mx);
                    out.at(i, j) = e;
                    sum += e;
                }
                for (std::size_t j = 0; j < cols; ++j) out.at(i, j) /= sum;
            }
            return out;
        }
        case Op::softmax_rows_literal: {
            const Tensor& z = in(0);
            const std::size_t rows = z.extent(0), cols = z.extent(1);
            Tensor out(z.shape());
            for (std::size_t i = 0; i < rows; ++i) {
                double sum = 0;
                for (std::size_t j = 0; j < cols; ++j) sum += z.at(i, j);
                for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = std::exp(z.at(i, j)) / sum;
            }
            return out;
        }
        case Op::add_rowwise:
        case Op::scale_rows:
        case Op::div_rows: {
            const Tensor& m = in(0);
            const Tensor& v = in(1);
            Tensor out(m.shape());
            const std::size_t rows = m.extent(0), cols = m.extent(1);
            for (std::size_t i = 0; i < rows; ++i) {
                const double vi = v[i];
                for (std::size_t j = 0; j < cols; ++j) {
                    const double mv = m.at(i, j);
                    out.at(i, j) = n.op == Op::add_rowwise ? mv + vi
                                   : n.op == Op::scale_rows ? mv * vi
                                                            : mv / vi;
                }
            }
            return out;
        }
        case Op::scale_cols: {
            const Tensor& m = in(0);
            const Tensor& v = in(1);
            Tensor out(m.shape());
            for (std::size_t i = 0; i < m.extent(0); ++i)
                for (std::size_t j = 0; j < m.extent(1); ++j) out.at(i, j) = m.at(i, j) * v[j];
            return out;
        }
        case Op::matmul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            Tensor out({a.extent(0), b.extent(1)});
            kernels::matmul(a.data(), b.data(), out.data(), a.extent(0), a.extent(1), b.extent(1));
            return out;
        }
        case Op::conv1d: {
            const Tensor& x = in(0);
            const Tensor& k = in(1);
            const auto pad = static_cast<kernels::Padding>(n.i0);
            ConvDims d = conv_dims(x, k, pad);
            Tensor out(d.rank2 ? Shape{d.out_len, d.c_out} : Shape{d.out_len, d.lanes, d.c_out});
            kernels::conv1d(x.data(), k.data(), out.data(), d.len, d.lanes, d.c_in, d.taps, d.c_out,
                            pad);
            return out;
        }
        case Op::pair_scores: {
            const Tensor& x = in(0);
            const Tensor& w = in(1);
            PairDims d = pair_dims(x, &w);
            Tensor out({d.n, d.n, d.len});
            for (std::size_t i = 0; i < d.n; ++i) {
                for (std::size_t j = 0; j < d.n; ++j) {
                    for (std::size_t t = 0; t < d.len; ++t) {
                        double acc = 0;
                        for (std::size_t f = 0; f < d.f; ++f) {
                            const double diff = x.at(t, i, f) - x.at(t, j, f);
                            const double wv = d.shared ? w.at(f, t) : w.at(i, j, f, t);
                            acc += wv * std::fabs(diff);
                        }
                        out.at(i, j, t) = acc;
                    }
                }
            }
            return out;
        }
        case Op::pair_sqdist: {
            const Tensor& x = in(0);
            PairDims d = pair_dims(x, nullptr);
            Tensor out({d.n, d.n});
            for (std::size_t i = 0; i < d.n; ++i) {
                for (std::size_t j = 0; j < d.n; ++j) {
                    double acc = 0;
                    for (std::size_t t = 0; t < d.len; ++t) {
                        for (std::size_t f = 0; f < d.f; ++f) {
                            const double diff = x.at(t, i, f) - x.at(t, j, f);
                            acc += diff * diff;
                        }
                    }
                    out.at(i, j) = acc;
                }
            }
            return out;
        }
        case Op::dominant_eig: {
            std::vector<double> v;
            bool converged;
            return Tensor::scalar(power_iteration(in(0), v, converged));
        }
        case Op::graph_conv: {
            const Tensor& x = in(0);
            const Tensor& theta = in(1);
            const std::size_t order = n.in.size() - 2;
            const std::size_t len = x.extent(0), nb = x.extent(1), f_in = x.extent(2);
            const std::size_t c_out = theta.extent(2);
            Tensor basis({order, nb, nb});
            for (std::size_t k = 0; k < order; ++k) {
                std::memcpy(basis.data() + k * nb * nb, in(2 + k).data(),
                            nb * nb * sizeof(double));
            }
            Tensor out({len, nb, c_out});
            kernels::graph_conv(x.data(), basis.data(), theta.data(), out.data(), len, nb, f_in,
                                order, c_out);
            return out;
        }
        case Op::bce_loss: {
            const Tensor& p = in(0);
            const int label = static_cast<int>(n.i0);
            const double p_stable = std::max(p[0], kProbClamp);
            const double p_unstable = std::max(p[1], kProbClamp);
            const double loss = label == 1 ? -std::log(p_unstable) : -std::log(p_stable);
            return Tensor::scalar(loss);
        }
    }
    throw NumericalError("unknown op in eval");
}

// ---------------------------------------------------------------------------
// op builders

namespace {
void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw DimensionError(concat(what, ": expected a matrix, got ", t.shape_string()));
    }
}

void require_row_vector(const Tensor& m, const Tensor& v, const char* what) {
    require_rank2(m, what);
    if (v.numel() != m.extent(0)) {
        throw DimensionError(concat(what, ": vector length ", v.numel(),
                                    " does not match row count ", m.extent(0)));
    }
}
}  // namespace

Var Tape::add(Var a, Var b) {
    Node n;
    n.op = Op::add;
    n.in = {a.id, b.id};
    n.i0 = broadcast_mode(value(a), value(b), "add");
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
    Node n;
    n.op = Op::sub;
    n.in = {a.id, b.id};
    n.i0 = broadcast_mode(value(a), value(b), "sub");
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
    Node n;
    n.op = Op::mul;
    n.in = {a.id, b.id};
    n.i0 = broadcast_mode(value(a), value(b), "mul");
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::add_scalar(Var a, double c) {
    Node n;
    n.op = Op::add_scalar;
    n.in = {a.id};
    n.c0 = c;
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::mul_scalar(Var a, double c) {
    Node n;
    n.op = Op::mul_scalar;
    n.in = {a.id};
    n.c0 = c;
    n.value = eval(n);
    return push(std::move(n));
}

#define ASTGL_UNARY_BUILDER(name, opkind)      \
    Var Tape::name(Var a) {                    \
        Node n;                                \
        n.op = Op::opkind;                     \
        n.in = {a.id};                         \
        n.value = eval(n);                     \
        return push(std::move(n));             \
    }

ASTGL_UNARY_BUILDER(neg, neg)
ASTGL_UNARY_BUILDER(abs, abs)
ASTGL_UNARY_BUILDER(exp, exp)
ASTGL_UNARY_BUILDER(relu, relu)
ASTGL_UNARY_BUILDER(sigmoid, sigmoid)

#undef ASTGL_UNARY_BUILDER

Var Tape::pow_const(Var a, double exponent) {
    Node n;
    n.op = Op::pow_const;
    n.in = {a.id};
    n.c0 = exponent;
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::clamp_min(Var a, double floor) {
    Node n;
    n.op = Op::clamp_min;
    n.in = {a.id};
    n.c0 = floor;
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::transpose(Var a) {
    require_rank2(value(a), "transpose");
    Node n;
    n.op = Op::transpose;
    n.in = {a.id};
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::reshape(Var a, Shape shape) {
    if (shape_numel(shape) != value(a).numel()) {
        throw DimensionError(concat("reshape: cannot view ", value(a).shape_string(), " as ",
                                    shape_str(shape)));
    }
    Node n;
    n.op = Op::reshape;
    n.in = {a.id};
    n.value = Tensor(std::move(shape), value(a).vec());
    return push(std::move(n));
}

Var Tape::reduce_sum(Var a, const std::vector<std::size_t>& axes) {
    Node n;
    n.op = Op::reduce_sum;
    n.in = {a.id};
    n.i0 = axes_to_mask(axes, value(a).rank(), "reduce_sum");
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::reduce_mean(Var a, const std::vector<std::size_t>& axes) {
    Node n;
    n.op = Op::reduce_mean;
    n.in = {a.id};
    n.i0 = axes_to_mask(axes, value(a).rank(), "reduce_mean");
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::frobenius_sq(Var a) {
    Node n;
    n.op = Op::frobenius_sq;
    n.in = {a.id};
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::softmax_rows(Var z) {
    require_rank2(value(z), "softmax_rows");
    Node n;
    n.op = Op::softmax_rows;
    n.in = {z.id};
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::softmax_rows_literal(Var z) {
    require_rank2(value(z), "softmax_rows_literal");
    Node n;
    n.op = Op::softmax_rows_literal;
    n.in = {z.id};
    const Tensor& zt = value(z);
    Tensor sums({zt.extent(0)});
    for (std::size_t i = 0; i < zt.extent(0); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < zt.extent(1); ++j) s += zt.at(i, j);
        sums[i] = s;
    }
    n.aux = std::move(sums);
    n.value = eval(n);
    return push(std::move(n));
}

#define ASTGL_ROWWISE_BUILDER(name, opkind)                  \
    Var Tape::name(Var m, Var v) {                           \
        require_row_vector(value(m), value(v), #name);       \
        Node n;                                              \
        n.op = Op::opkind;                                   \
        n.in = {m.id, v.id};                                 \
        n.value = eval(n);                                   \
        return push(std::move(n));                           \
    }

ASTGL_ROWWISE_BUILDER(add_rowwise, add_rowwise)
ASTGL_ROWWISE_BUILDER(scale_rows, scale_rows)
ASTGL_ROWWISE_BUILDER(div_rows, div_rows)

#undef ASTGL_ROWWISE_BUILDER

Var Tape::scale_cols(Var m, Var v) {
    require_rank2(value(m), "scale_cols");
    if (value(v).numel() != value(m).extent(1)) {
        throw DimensionError(concat("scale_cols: vector length ", value(v).numel(),
                                    " does not match column count ", value(m).extent(1)));
    }
    Node n;
    n.op = Op::scale_cols;
    n.in = {m.id, v.id};
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
    const Tensor& at = value(a);
    const Tensor& bt = value(b);
    require_rank2(at, "matmul");
    require_rank2(bt, "matmul");
    if (at.extent(1) != bt.extent(0)) {
        throw DimensionError(concat("matmul: inner extents disagree between ", at.shape_string(),
                                    " and ", bt.shape_string()));
    }
    Node n;
    n.op = Op::matmul;
    n.in = {a.id, b.id};
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::conv1d(Var x, Var kernel, kernels::Padding pad) {
    conv_dims(value(x), value(kernel), pad);  // validates
    Node n;
    n.op = Op::conv1d;
    n.in = {x.id, kernel.id};
    n.i0 = static_cast<std::int64_t>(pad);
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::pair_scores(Var x, Var weights) {
    pair_dims(value(x), &value(weights));  // validates
    Node n;
    n.op = Op::pair_scores;
    n.in = {x.id, weights.id};
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::pair_sqdist(Var x) {
    pair_dims(value(x), nullptr);
    Node n;
    n.op = Op::pair_sqdist;
    n.in = {x.id};
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::dominant_eig(Var m) {
    const Tensor& mt = value(m);
    require_rank2(mt, "dominant_eig");
    if (mt.extent(0) != mt.extent(1)) {
        throw DimensionError(concat("dominant_eig: matrix must be square, got ", mt.shape_string()));
    }
    Node n;
    n.op = Op::dominant_eig;
    n.in = {m.id};
    std::vector<double> v;
    bool converged;
    const double lambda = power_iteration(mt, v, converged);
    n.value = Tensor::scalar(lambda);
    n.i0 = converged ? 1 : 0;
    // Saved eigenvector drives the backward rule dM += g * v v^T.
    n.aux = Tensor({mt.extent(0)}, std::move(v));
    return push(std::move(n));
}

Var Tape::graph_conv(Var x, Var theta, const std::vector<Var>& basis) {
    const Tensor& xt = value(x);
    const Tensor& th = value(theta);
    if (xt.rank() != 3) {
        throw DimensionError(concat("graph_conv: input must be [L x N x F], got ",
                                    xt.shape_string()));
    }
    if (th.rank() != 3) {
        throw DimensionError(concat("graph_conv: filters must be [K x F x C], got ",
                                    th.shape_string()));
    }
    if (basis.empty() || th.extent(0) != basis.size()) {
        throw DimensionError(concat("graph_conv: filter order ", th.extent(0),
                                    " does not match basis length ", basis.size()));
    }
    if (th.extent(1) != xt.extent(2)) {
        throw DimensionError(concat("graph_conv: filter input channels ", th.extent(1),
                                    " do not match data channels ", xt.extent(2)));
    }
    for (Var b : basis) {
        const Tensor& bt = value(b);
        if (bt.rank() != 2 || bt.extent(0) != xt.extent(1) || bt.extent(1) != xt.extent(1)) {
            throw DimensionError(concat("graph_conv: basis matrix ", bt.shape_string(),
                                        " does not match bus count ", xt.extent(1)));
        }
    }
    Node n;
    n.op = Op::graph_conv;
    n.in = {x.id, theta.id};
    for (Var b : basis) n.in.push_back(b.id);
    n.value = eval(n);
    return push(std::move(n));
}

Var Tape::bce_loss(Var probs, int label) {
    if (label != 0 && label != 1) {
        throw ConfigError(concat("bce_loss: label must be 0 or 1, got ", label));
    }
    if (value(probs).numel() != 2) {
        throw DimensionError(concat("bce_loss: expected a probability pair, got ",
                                    value(probs).shape_string()));
    }
    Node n;
    n.op = Op::bce_loss;
    n.in = {probs.id};
    n.i0 = label;
    n.value = eval(n);
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// backward

void Tape::accumulate(std::vector<Tensor>& grads, std::int32_t id, const Tensor& g) const {
    Tensor& slot = grads[static_cast<std::size_t>(id)];
    if (slot.empty()) {
        slot = g;
    } else {
        for (std::size_t i = 0; i < g.numel(); ++i) slot[i] += g[i];
    }
}

void Tape::backprop_node(std::int32_t id, const Tensor& g, std::vector<Tensor>& grads) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    auto in_val = [&](std::size_t i) -> const Tensor& {
        return nodes_[static_cast<std::size_t>(n.in[i])].value;
    };
    auto wants = [&](std::size_t i) {
        return nodes_[static_cast<std::size_t>(n.in[i])].needs_grad;
    };

    switch (n.op) {
        case Op::leaf:
            return;
        case Op::add:
        case Op::sub: {
            const double sign_b = n.op == Op::sub ? -1.0 : 1.0;
            if (wants(0)) {
                if (n.i0 == 2) {
                    double acc = 0;
                    for (double v : g.vec()) acc += v;
                    accumulate(grads, n.in[0], Tensor::scalar(acc));
                } else {
                    accumulate(grads, n.in[0], g);
                }
            }
            if (wants(1)) {
                if (n.i0 == 1) {
                    double acc = 0;
                    for (double v : g.vec()) acc += v;
                    accumulate(grads, n.in[1], Tensor::scalar(sign_b * acc));
                } else if (sign_b < 0) {
                    Tensor gb = g;
                    for (double& v : gb.vec()) v = -v;
                    accumulate(grads, n.in[1], gb);
                } else {
                    accumulate(grads, n.in[1], g);
                }
            }
            return;
        }
        case Op::mul: {
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            if (wants(0)) {
                if (n.i0 == 2) {
                    double acc = 0;
                    for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * b[i];
                    accumulate(grads, n.in[0], Tensor::scalar(acc));
                } else {
                    Tensor da(g.shape());
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        da[i] = g[i] * (n.i0 == 1 ? b[0] : b[i]);
                    accumulate(grads, n.in[0], da);
                }
            }
            if (wants(1)) {
                if (n.i0 == 1) {
                    double acc = 0;
                    for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * a[i];
                    accumulate(grads, n.in[1], Tensor::scalar(acc));
                } else {
                    Tensor db(g.shape());
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        db[i] = g[i] * (n.i0 == 2 ? a[0] : a[i]);
                    accumulate(grads, n.in[1], db);
                }
            }
            return;
        }
        case Op::add_scalar:
            if (wants(0)) accumulate(grads, n.in[0], g);
            return;
        case Op::mul_scalar: {
            if (!wants(0)) return;
            Tensor da = g;
            for (double& v : da.vec()) v *= n.c0;
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::neg: {
            if (!wants(0)) return;
            Tensor da = g;
            for (double& v : da.vec()) v = -v;
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::abs: {
            if (!wants(0)) return;
            const Tensor& a = in_val(0);
            Tensor da(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) {
                da[i] = a[i] > 0 ? g[i] : a[i] < 0 ? -g[i] : 0.0;
            }
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::exp: {
            if (!wants(0)) return;
            Tensor da(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] = g[i] * n.value[i];
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::relu: {
            if (!wants(0)) return;
            const Tensor& a = in_val(0);
            Tensor da(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] = a[i] > 0 ? g[i] : 0.0;
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::sigmoid: {
            if (!wants(0)) return;
            Tensor da(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) {
                da[i] = g[i] * n.value[i] * (1.0 - n.value[i]);
            }
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::pow_const: {
            if (!wants(0)) return;
            const Tensor& a = in_val(0);
            Tensor da(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) {
                da[i] = g[i] * n.c0 * std::pow(a[i], n.c0 - 1.0);
            }
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::clamp_min: {
            if (!wants(0)) return;
            const Tensor& a = in_val(0);
            Tensor da(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] = a[i] > n.c0 ? g[i] : 0.0;
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::transpose: {
            if (!wants(0)) return;
            Tensor da({g.extent(1), g.extent(0)});
            for (std::size_t i = 0; i < g.extent(0); ++i)
                for (std::size_t j = 0; j < g.extent(1); ++j) da.at(j, i) = g.at(i, j);
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::reshape: {
            if (!wants(0)) return;
            accumulate(grads, n.in[0], Tensor(in_val(0).shape(), g.vec()));
            return;
        }
        case Op::reduce_sum:
        case Op::reduce_mean: {
            if (!wants(0)) return;
            const Tensor& a = in_val(0);
            ReducePlan plan = make_reduce_plan(a.shape(), n.i0);
            const double scale =
                n.op == Op::reduce_mean ? 1.0 / static_cast<double>(plan.reduced_count) : 1.0;
            Tensor da(a.shape());
            for (std::size_t i = 0; i < a.numel(); ++i) da[i] = g[plan.out_index_of[i]] * scale;
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::frobenius_sq: {
            if (!wants(0)) return;
            const Tensor& a = in_val(0);
            Tensor da(a.shape());
            const double g0 = g[0];
            for (std::size_t i = 0; i < a.numel(); ++i) da[i] = 2.0 * g0 * a[i];
            accumulate(grads, n.in[0], da);
            return;
        }
        case Op::softmax_rows: {
            if (!wants(0)) return;
            const Tensor& y = n.value;
            const std::size_t rows = y.extent(0), cols = y.extent(1);
            Tensor dz(y.shape());
            for (std::size_t i = 0; i < rows; ++i) {
                double dot = 0;
                for (std::size_t j = 0; j < cols; ++j) dot += g.at(i, j) * y.at(i, j);
                for (std::size_t j = 0; j < cols; ++j) {
                    dz.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
                }
            }
            accumulate(grads, n.in[0], dz);
            return;
        }
        case Op::softmax_rows_literal: {
            if (!wants(0)) return;
            const Tensor& y = n.value;
            const Tensor& sums = n.aux;
            const std::size_t rows = y.extent(0), cols = y.extent(1);
            Tensor dz(y.shape());
            for (std::size_t i = 0; i < rows; ++i) {
                double dot = 0;
                for (std::size_t j = 0; j < cols; ++j) dot += g.at(i, j) * y.at(i, j);
                for (std::size_t j = 0; j < cols; ++j) {
                    dz.at(i, j) = g.at(i, j) * y.at(i, j) - dot / sums[i];
                }
            }
            accumulate(grads, n.in[0], dz);
            return;
        }
        case Op::add_rowwise: {
            if (wants(0)) accumulate(grads, n.in[0], g);
            if (wants(1)) {
                const std::size_t rows = g.extent(0), cols = g.extent(1);
                Tensor dv({rows});
                for (std::size_t i = 0; i < rows; ++i) {
                    double acc = 0;
                    for (std::size_t j = 0; j < cols; ++j) acc += g.at(i, j);
                    dv[i] = acc;
                }
                accumulate(grads, n.in[1], dv);
            }
            return;
        }
        case Op::scale_rows: {
            const Tensor& m = in_val(0);
            const Tensor& v = in_val(1);
            const std::size_t rows = g.extent(0), cols = g.extent(1);
            if (wants(0)) {
                Tensor dm(m.shape());
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) dm.at(i, j) = g.at(i, j) * v[i];
                accumulate(grads, n.in[0], dm);
            }
            if (wants(1)) {
                Tensor dv({rows});
                for (std::size_t i = 0; i < rows; ++i) {
                    double acc = 0;
                    for (std::size_t j = 0; j < cols; ++j) acc += g.at(i, j) * m.at(i, j);
                    dv[i] = acc;
                }
                accumulate(grads, n.in[1], dv);
            }
            return;
        }
        case Op::scale_cols: {
            const Tensor& m = in_val(0);
            const Tensor& v = in_val(1);
            const std::size_t rows = g.extent(0), cols = g.extent(1);
            if (wants(0)) {
                Tensor dm(m.shape());
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) dm.at(i, j) = g.at(i, j) * v[j];
                accumulate(grads, n.in[0], dm);
            }
            if (wants(1)) {
                Tensor dv({cols});
                for (std::size_t j = 0; j < cols; ++j) {
                    double acc = 0;
                    for (std::size_t i = 0; i < rows; ++i) acc += g.at(i, j) * m.at(i, j);
                    dv[j] = acc;
                }
                accumulate(grads, n.in[1], dv);
            }
            return;
        }
        case Op::div_rows: {
            const Tensor& m = in_val(0);
            const Tensor& v = in_val(1);
            const std::size_t rows = g.extent(0), cols = g.extent(1);
            if (wants(0)) {
                Tensor dm(m.shape());
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) dm.at(i, j) = g.at(i, j) / v[i];
                accumulate(grads, n.in[0], dm);
            }
            if (wants(1)) {
                Tensor dv({rows});
                for (std::size_t i = 0; i < rows; ++i) {
                    double acc = 0;
                    for (std::size_t j = 0; j < cols; ++j) acc += g.at(i, j) * m.at(i, j);
                    dv[i] = -acc / (v[i] * v[i]);
                }
                accumulate(grads, n.in[1], dv);
            }
            return;
        }
        case Op::matmul: {
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            if (wants(0)) {
                Tensor da(a.shape());
                mm_acc_gbt(g, b, da);
                accumulate(grads, n.in[0], da);
            }
            if (wants(1)) {
                Tensor db(b.shape());
                mm_acc_atg(a, g, db);
                accumulate(grads, n.in[1], db);
            }
            return;
        }
        case Op::conv1d: {
            const Tensor& x = in_val(0);
            const Tensor& k = in_val(1);
            const auto pad = static_cast<kernels::Padding>(n.i0);
            ConvDims d = conv_dims(x, k, pad);
            auto gv = [&](std::size_t t, std::size_t lane, std::size_t co) {
                return g[(t * d.lanes + lane) * d.c_out + co];
            };
            if (wants(0)) {
                Tensor dx(x.shape());
                for (std::size_t t = 0; t < d.out_len; ++t) {
                    for (std::size_t kk = 0; kk < d.taps; ++kk) {
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + kk) -
                                                   static_cast<std::ptrdiff_t>(d.pad_left);
                        if (src < 0 || src >= static_cast<std::ptrdiff_t>(d.len)) continue;
                        for (std::size_t lane = 0; lane < d.lanes; ++lane) {
                            for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                                double acc = 0;
                                for (std::size_t co = 0; co < d.c_out; ++co) {
                                    acc += gv(t, lane, co) * k[(kk * d.c_in + ci) * d.c_out + co];
                                }
                                dx[(static_cast<std::size_t>(src) * d.lanes + lane) * d.c_in + ci] +=
                                    acc;
                            }
                        }
                    }
                }
                accumulate(grads, n.in[0], dx);
            }
            if (wants(1)) {
                Tensor dk(k.shape());
                for (std::size_t t = 0; t < d.out_len; ++t) {
                    for (std::size_t kk = 0; kk < d.taps; ++kk) {
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + kk) -
                                                   static_cast<std::ptrdiff_t>(d.pad_left);
                        if (src < 0 || src >= static_cast<std::ptrdiff_t>(d.len)) continue;
                        for (std::size_t lane = 0; lane < d.lanes; ++lane) {
                            for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                                const double xv =
                                    x[(static_cast<std::size_t>(src) * d.lanes + lane) * d.c_in + ci];
                                for (std::size_t co = 0; co < d.c_out; ++co) {
                                    dk[(kk * d.c_in + ci) * d.c_out + co] += xv * gv(t, lane, co);
                                }
                            }
                        }
                    }
                }
                accumulate(grads, n.in[1], dk);
            }
            return;
        }
        case Op::pair_scores: {
            const Tensor& x = in_val(0);
            const Tensor& w = in_val(1);
            PairDims d = pair_dims(x, &w);
            Tensor dx(x.shape());
            Tensor dw(w.shape());
            const bool want_x = wants(0), want_w = wants(1);
            for (std::size_t i = 0; i < d.n; ++i) {
                for (std::size_t j = 0; j < d.n; ++j) {
                    for (std::size_t t = 0; t < d.len; ++t) {
                        const double gv = g.at(i, j, t);
                        if (gv == 0.0) continue;
                        for (std::size_t f = 0; f < d.f; ++f) {
                            const double diff = x.at(t, i, f) - x.at(t, j, f);
                            const double wv = d.shared ? w.at(f, t) : w.at(i, j, f, t);
                            if (want_w) {
                                const double dval = gv * std::fabs(diff);
                                if (d.shared) {
                                    dw.at(f, t) += dval;
                                } else {
                                    dw.at(i, j, f, t) += dval;
                                }
                            }
                            if (want_x && diff != 0.0) {
                                const double s = diff > 0 ? 1.0 : -1.0;
                                dx.at(t, i, f) += gv * wv * s;
                                dx.at(t, j, f) -= gv * wv * s;
                            }
                        }
                    }
                }
            }
            if (want_x) accumulate(grads, n.in[0], dx);
            if (want_w) accumulate(grads, n.in[1], dw);
            return;
        }
        case Op::pair_sqdist: {
            if (!wants(0)) return;
            const Tensor& x = in_val(0);
            PairDims d = pair_dims(x, nullptr);
            Tensor dx(x.shape());
            for (std::size_t i = 0; i < d.n; ++i) {
                for (std::size_t j = 0; j < d.n; ++j) {
                    const double gv = g.at(i, j);
                    if (gv == 0.0) continue;
                    for (std::size_t t = 0; t < d.len; ++t) {
                        for (std::size_t f = 0; f < d.f; ++f) {
                            const double diff = x.at(t, i, f) - x.at(t, j, f);
                            dx.at(t, i, f) += 2.0 * gv * diff;
                            dx.at(t, j, f) -= 2.0 * gv * diff;
                        }
                    }
                }
            }
            accumulate(grads, n.in[0], dx);
            return;
        }
        case Op::dominant_eig: {
            if (!wants(0) || n.i0 == 0) return;  // fallback value is a constant
            const Tensor& v = n.aux;
            const std::size_t nn = v.numel();
            Tensor dm({nn, nn});
            const double g0 = g[0];
            for (std::size_t i = 0; i < nn; ++i)
                for (std::size_t j = 0; j < nn; ++j) dm.at(i, j) = g0 * v[i] * v[j];
            accumulate(grads, n.in[0], dm);
            return;
        }
        case Op::graph_conv: {
            const Tensor& x = in_val(0);
            const Tensor& theta = in_val(1);
            const std::size_t order = n.in.size() - 2;
            const std::size_t len = x.extent(0), nb = x.extent(1), f_in = x.extent(2);
            const std::size_t c_out = theta.extent(2);
            const bool want_x = wants(0), want_theta = wants(1);
            bool want_basis = false;
            for (std::size_t k = 0; k < order; ++k) want_basis = want_basis || wants(2 + k);

            Tensor dx = want_x ? Tensor(x.shape()) : Tensor();
            Tensor dtheta = want_theta ? Tensor(theta.shape()) : Tensor();
            std::vector<double> yk(nb * f_in);   // (T_k x_t)
            std::vector<double> gk(nb * f_in);   // theta_k-contracted incoming gradient
            std::vector<Tensor> dbasis(order);
            for (std::size_t k = 0; k < order; ++k) {
                if (wants(2 + k)) dbasis[k] = Tensor({nb, nb});
            }

            for (std::size_t k = 0; k < order; ++k) {
                const Tensor& tk = in_val(2 + k);
                const double* th = theta.data() + k * f_in * c_out;
                for (std::size_t t = 0; t < len; ++t) {
                    const double* xt = x.data() + t * nb * f_in;
                    const double* gt = g.data() + t * nb * c_out;
                    // gk[v,f] = sum_c theta[k,f,c] * g[t,v,c]
                    if (want_x || want_theta || !dbasis[k].empty()) {
                        for (std::size_t v = 0; v < nb; ++v) {
                            for (std::size_t f = 0; f < f_in; ++f) {
                                double acc = 0;
                                for (std::size_t c = 0; c < c_out; ++c) {
                                    acc += th[f * c_out + c] * gt[v * c_out + c];
                                }
                                gk[v * f_in + f] = acc;
                            }
                        }
                    }
                    if (want_theta) {
                        kernels::matmul_serial(tk.data(), xt, yk.data(), nb, nb, f_in);
                        double* dth = dtheta.data() + k * f_in * c_out;
                        for (std::size_t v = 0; v < nb; ++v) {
                            for (std::size_t f = 0; f < f_in; ++f) {
                                const double yv = yk[v * f_in + f];
                                for (std::size_t c = 0; c < c_out; ++c) {
                                    dth[f * c_out + c] += yv * gt[v * c_out + c];
                                }
                            }
                        }
                    }
                    if (want_x) {
                        // dx[t,m,f] += sum_v T_k[v,m] * gk[v,f]
                        double* dxt = dx.data() + t * nb * f_in;
                        for (std::size_t v = 0; v < nb; ++v) {
                            for (std::size_t m = 0; m < nb; ++m) {
                                const double tv = tk.at(v, m);
                                if (tv == 0.0) continue;
                                for (std::size_t f = 0; f < f_in; ++f) {
                                    dxt[m * f_in + f] += tv * gk[v * f_in + f];
                                }
                            }
                        }
                    }
                    if (!dbasis[k].empty()) {
                        // dT_k[v,m] += sum_f gk[v,f] * x[t,m,f]
                        for (std::size_t v = 0; v < nb; ++v) {
                            for (std::size_t m = 0; m < nb; ++m) {
                                double acc = 0;
                                for (std::size_t f = 0; f < f_in; ++f) {
                                    acc += gk[v * f_in + f] * xt[m * f_in + f];
                                }
                                dbasis[k].at(v, m) += acc;
                            }
                        }
                    }
                }
            }
            if (want_x) accumulate(grads, n.in[0], dx);
            if (want_theta) accumulate(grads, n.in[1], dtheta);
            for (std::size_t k = 0; k < order; ++k) {
                if (!dbasis[k].empty()) accumulate(grads, n.in[2 + k], dbasis[k]);
            }
            return;
        }
        case Op::bce_loss: {
            if (!wants(0)) return;
            const Tensor& p = in_val(0);
            const int label = static_cast<int>(n.i0);
            Tensor dp(p.shape());
            const double g0 = g[0];
            if (label == 1) {
                if (p[1] > kProbClamp) dp[1] = -g0 / p[1];
            } else {
                if (p[0] > kProbClamp) dp[0] = -g0 / p[0];
            }
            accumulate(grads, n.in[0], dp);
            return;
        }
    }
}

Gradients Tape::backward(Var loss) const {
    if (loss.tape != this || loss.id < 0 ||
        static_cast<std::size_t>(loss.id) >= nodes_.size()) {
        throw DimensionError("backward: loss does not belong to this computation record");
    }
    const Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
    if (ln.value.numel() != 1) {
        throw DimensionError(concat("backward: loss must be scalar, got ",
                                    ln.value.shape_string()));
    }

    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.id)] = Tensor::scalar(1.0);
    for (std::int32_t id = loss.id; id >= 0; --id) {
        const Node& node = nodes_[static_cast<std::size_t>(id)];
        if (!node.needs_grad) continue;
        Tensor& g = grads[static_cast<std::size_t>(id)];
        if (g.empty()) continue;
        g.check_finite("backward");
        backprop_node(id, g, grads);
    }
    // Tracked leaves untouched by the loss still report (zero) gradients.
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        const Node& node = nodes_[id];
        if (node.op == Op::leaf && node.needs_grad && grads[id].empty()) {
            grads[id] = Tensor::zeros(node.value.shape());
        }
    }
    return Gradients(std::move(grads));
}

bool Tape::replay_check() const {
    for (const Node& n : nodes_) {
        if (n.op == Op::leaf) continue;
        Tensor v = eval(n);
        if (!(v == n.value)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// finite differences

double finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& params, const std::vector<Tensor>& analytic,
                         double h) {
    if (params.size() != analytic.size()) {
        throw DimensionError("finite_diff_check: analytic gradient count mismatch");
    }
    std::vector<Tensor> work = params;
    double max_rel = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (!params[p].same_shape(analytic[p])) {
            throw DimensionError(concat("finite_diff_check: gradient shape ",
                                        analytic[p].shape_string(), " does not match parameter ",
                                        params[p].shape_string()));
        }
        for (std::size_t i = 0; i < params[p].numel(); ++i) {
            const double orig = work[p][i];
            work[p][i] = orig + h;
            const double fp = f(work);
            work[p][i] = orig - h;
            const double fm = f(work);
            work[p][i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericalError("finite_diff_check: non-finite function evaluation");
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[p][i];
            const double rel = std::fabs(numeric - a) / std::max(1.0, std::fabs(a));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace astgl
