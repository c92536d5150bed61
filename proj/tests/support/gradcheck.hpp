#pragma once

#include <functional>
#include <vector>

#include "astgl/autodiff.hpp"
#include "astgl/rng.hpp"
#include "astgl/tensor.hpp"

namespace testsupport {

inline astgl::Tensor random_tensor(astgl::Shape shape, astgl::Rng& rng, double lo = -1.0,
                                   double hi = 1.0) {
    astgl::Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

/// Builds the loss twice: once tracked (analytic gradients), then repeatedly
/// untracked inside the central-difference probe. Returns the max relative
/// gradient error across all parameter coordinates.
inline double grad_check(
    const std::function<astgl::Var(astgl::Tape&, const std::vector<astgl::Var>&)>& build,
    const std::vector<astgl::Tensor>& params, double h = 1e-5) {
    using namespace astgl;
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) {
        Tensor t = p;
        t.requires_grad = true;
        vars.push_back(tape.leaf(std::move(t)));
    }
    Var loss = build(tape, vars);
    Gradients grads = tape.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(vars.size());
    for (Var v : vars) analytic.push_back(grads.grad(v));

    auto f = [&](const std::vector<Tensor>& ps) {
        Tape probe;
        std::vector<Var> vs;
        vs.reserve(ps.size());
        for (const Tensor& p : ps) vs.push_back(probe.leaf(p));
        return build(probe, vs).value()[0];
    };
    return finite_diff_check(f, params, analytic, h);
}

}  // namespace testsupport
