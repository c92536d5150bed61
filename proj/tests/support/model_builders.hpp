#pragma once

#include <vector>

#include "astgl/stgcn.hpp"
#include "support/gradcheck.hpp"

namespace testsupport {

inline astgl::ModelParams zero_params(const astgl::ModelConfig& cfg) {
    using astgl::Tensor;
    astgl::ModelParams p;
    if (cfg.adaptive()) {
        p.agl.weights = cfg.shared_pair_weights
                            ? Tensor::zeros({cfg.in_channels, cfg.window_len})
                            : Tensor::zeros({cfg.n_buses, cfg.n_buses, cfg.in_channels,
                                             cfg.window_len});
        p.agl.lambda = cfg.lambda_reg;
        p.attention.weight = Tensor::zeros({cfg.n_buses, cfg.n_buses});
        p.attention.bias = Tensor::zeros({cfg.n_buses});
    }
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
        const std::size_t f_in = cfg.block_in_channels(b);
        p.stgcn.cheb_filters.push_back(Tensor::zeros({cfg.cheb_order, f_in, cfg.gcn_channels}));
        p.stgcn.temporal_filters.push_back(
            Tensor::zeros({cfg.temporal_taps, cfg.gcn_channels, cfg.tcn_channels}));
        p.stgcn.residual_filters.push_back(
            Tensor::zeros({cfg.temporal_taps, f_in, cfg.tcn_channels}));
    }
    p.stgcn.classifier_weight = Tensor::zeros({cfg.flat_features(), 2});
    p.stgcn.classifier_bias = Tensor::zeros({2});
    return p;
}

inline astgl::ModelParams random_params(const astgl::ModelConfig& cfg, astgl::Rng& rng,
                                        double scale = 0.4) {
    astgl::ModelParams p = zero_params(cfg);
    astgl::for_each_param(p, [&](const std::string&, astgl::Tensor& t) {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-scale, scale);
    });
    return p;
}

inline std::vector<astgl::Tensor> param_list(const astgl::ModelParams& p) {
    std::vector<astgl::Tensor> out;
    astgl::for_each_param(const_cast<astgl::ModelParams&>(p),
                          [&](const std::string&, astgl::Tensor& t) { out.push_back(t); });
    return out;
}

inline astgl::stgcn::ParamVars vars_from_list(const std::vector<astgl::Var>& v,
                                              const astgl::ModelConfig& cfg) {
    astgl::stgcn::ParamVars pv;
    std::size_t i = 0;
    if (cfg.adaptive()) {
        pv.pair_weights = v[i++];
        pv.attn_weight = v[i++];
        pv.attn_bias = v[i++];
    }
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
        pv.cheb.push_back(v[i++]);
        pv.temporal.push_back(v[i++]);
        pv.residual.push_back(v[i++]);
    }
    pv.cls_weight = v[i++];
    pv.cls_bias = v[i++];
    return pv;
}

}  // namespace testsupport
