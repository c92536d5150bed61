#include "astgl/stgcn.hpp"

#include "astgl/common.hpp"

namespace astgl {

std::string graph_mode_name(GraphMode mode) {
    switch (mode) {
        case GraphMode::adaptive: return "adaptive";
        case GraphMode::fixed_connectivity: return "fixed_connectivity";
        case GraphMode::fixed_admittance: return "fixed_admittance";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (n_buses < 2) throw ConfigError("model: need at least 2 buses");
    if (window_len < 1 || in_channels < 1) throw ConfigError("model: empty input window");
    if (cheb_order < 1) throw ConfigError("model: cheb_order must be >= 1");
    if (temporal_taps < 1) throw ConfigError("model: temporal_taps must be >= 1");
    if (temporal_taps > window_len) {
        throw ConfigError(concat("model: temporal_taps ", temporal_taps,
                                 " exceeds window length ", window_len));
    }
    if (gcn_channels < 1 || tcn_channels < 1 || num_blocks < 1) {
        throw ConfigError("model: channel counts and num_blocks must be >= 1");
    }
    if (lambda_reg < 0.0) throw ConfigError("model: lambda_reg must be >= 0");
    if (gamma_agl < 0.0) throw ConfigError("model: gamma_agl must be >= 0");
}

namespace stgcn {

namespace {

template <typename Fn>
auto stage(const char* name, Fn&& fn) {
    try {
        return fn();
    } catch (const DimensionError& e) {
        throw DimensionError(concat(name, ": ", e.what()));
    } catch (const NumericalError& e) {
        throw NumericalError(concat(name, ": ", e.what()));
    }
}

}  // namespace

ParamVars track_params(Tape& tape, const ModelParams& params, const ModelConfig& config,
                       bool trainable) {
    auto track = [&](const Tensor& t) {
        Tensor copy = t;
        copy.requires_grad = trainable;
        return tape.leaf(std::move(copy));
    };
    ParamVars vars;
    if (config.adaptive()) {
        vars.pair_weights = track(params.agl.weights);
        vars.attn_weight = track(params.attention.weight);
        vars.attn_bias = track(params.attention.bias);
    }
    for (std::size_t b = 0; b < config.num_blocks; ++b) {
        vars.cheb.push_back(track(params.stgcn.cheb_filters[b]));
        vars.temporal.push_back(track(params.stgcn.temporal_filters[b]));
        vars.residual.push_back(track(params.stgcn.residual_filters[b]));
    }
    vars.cls_weight = track(params.stgcn.classifier_weight);
    vars.cls_bias = track(params.stgcn.classifier_bias);
    return vars;
}

Var temporal_convolution(Tape& tape, Var z, Var phi) {
    const std::size_t taps = phi.value().extent(0);
    const std::size_t len = z.value().extent(0);
    if (taps > len) {
        throw DimensionError(concat("temporal convolution: kernel taps ", taps,
                                    " exceed sequence length ", len));
    }
    return tape.relu(tape.conv1d(tape.relu(z), phi, kernels::Padding::same));
}

Var residual_block(Tape& tape, Var x_in, Var z_st, Var phi_res) {
    Var skip = tape.conv1d(tape.relu(x_in), phi_res, kernels::Padding::same);
    return tape.relu(tape.add(skip, z_st));
}

Classification classify(Tape& tape, Var features, Var weight, Var bias) {
    const std::size_t flat = features.value().numel();
    if (weight.value().extent(0) != flat) {
        throw DimensionError(concat("classify: flattened feature length ", flat,
                                    " does not match classifier rows ",
                                    weight.value().extent(0)));
    }
    Var row = tape.reshape(features, {1, flat});
    Var logits = tape.add(tape.matmul(row, weight), tape.reshape(bias, {1, 2}));
    Var y_hat = tape.softmax_rows(logits);
    return {logits, y_hat};
}

Var classification_loss(Tape& tape, Var y_hat, int label) {
    return tape.bce_loss(y_hat, label);
}

Var total_loss(Tape& tape, Var l_agl, Var l_cm, double gamma) {
    if (gamma < 0.0) throw ConfigError(concat("total_loss: gamma must be >= 0, got ", gamma));
    return tape.add(tape.mul_scalar(l_agl, gamma), l_cm);
}

ForwardVars forward_pass(Tape& tape, Var x, const ParamVars& vars, const ModelConfig& config,
                         const Tensor* fixed_adjacency) {
    const Tensor& xt = x.value();
    if (xt.rank() != 3 || xt.extent(0) != config.window_len || xt.extent(1) != config.n_buses ||
        xt.extent(2) != config.in_channels) {
        throw DimensionError(concat("forward: input ", xt.shape_string(),
                                    " does not match configured [",
                                    config.window_len, "x", config.n_buses, "x",
                                    config.in_channels, "]"));
    }

    ForwardVars out;
    if (config.adaptive()) {
        out.used_adaptive_graph = true;
        out.a_adp = stage("adaptive graph", [&] {
            return graph::adaptive_adjacency(tape, x, vars.pair_weights);
        });
        graph::Attention att = stage("spatial attention", [&] {
            return graph::spatial_attention(tape, out.a_adp, vars.attn_weight, vars.attn_bias,
                                            config.literal_row_norm);
        });
        out.alpha = att.alpha;
        out.a_sp = att.a_sp;
        out.l_agl = stage("graph learning loss", [&] {
            return graph::learning_loss(tape, x, out.a_adp, config.lambda_reg);
        });
    } else {
        if (fixed_adjacency == nullptr || fixed_adjacency->empty()) {
            throw DataError("forward: fixed graph mode needs a base-topology adjacency");
        }
        out.a_sp = tape.constant(*fixed_adjacency);
        out.l_agl = tape.constant(Tensor::scalar(0.0));
    }

    graph::ScaledLaplacian lap = stage("laplacian", [&] {
        return graph::normalized_scaled_laplacian(tape, out.a_sp);
    });
    out.j_scaled = lap.j_scaled;
    out.lambda_max = lap.lambda_max;
    std::vector<Var> basis = stage("chebyshev basis", [&] {
        return graph::chebyshev_basis(tape, out.j_scaled, config.cheb_order);
    });

    Var h = x;
    for (std::size_t b = 0; b < config.num_blocks; ++b) {
        Var z_s = stage("graph convolution", [&] {
            return tape.graph_conv(h, vars.cheb[b], basis);
        });
        Var z_st = stage("temporal convolution", [&] {
            return temporal_convolution(tape, z_s, vars.temporal[b]);
        });
        Var z_prime = stage("residual fusion", [&] {
            return residual_block(tape, h, z_st, vars.residual[b]);
        });
        out.z_s.push_back(z_s);
        out.z_st.push_back(z_st);
        out.z_prime.push_back(z_prime);
        h = z_prime;
    }

    Classification cls = stage("classifier", [&] {
        return classify(tape, h, vars.cls_weight, vars.cls_bias);
    });
    out.logits = cls.logits;
    out.y_hat = cls.y_hat;
    return out;
}

}  // namespace stgcn

ForwardTrace forward(const Tensor& x, const ModelParams& params, const ModelConfig& config) {
    config.validate();
    Tape tape;
    Var xv = tape.constant(x);
    stgcn::ParamVars vars = stgcn::track_params(tape, params, config, /*trainable=*/false);
    stgcn::ForwardVars fwd = stgcn::forward_pass(tape, xv, vars, config,
                                                 config.adaptive() ? nullptr
                                                                   : &params.fixed_adjacency);
    ForwardTrace trace;
    trace.used_adaptive_graph = fwd.used_adaptive_graph;
    if (fwd.used_adaptive_graph) {
        trace.a_adp = fwd.a_adp.value();
        trace.alpha_sp = fwd.alpha.value();
    }
    trace.a_sp = fwd.a_sp.value();
    trace.j_scaled = fwd.j_scaled.value();
    trace.lambda_max = fwd.lambda_max.value()[0];
    for (Var v : fwd.z_s) trace.z_s.push_back(v.value());
    for (Var v : fwd.z_st) trace.z_st.push_back(v.value());
    for (Var v : fwd.z_prime) trace.z_st_prime.push_back(v.value());
    trace.logits = fwd.logits.value();
    trace.y_hat = fwd.y_hat.value();
    trace.l_agl = fwd.l_agl.value()[0];
    return trace;
}

}  // namespace astgl
