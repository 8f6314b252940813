#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "elpg/error.hpp"
#include "elpg/tensor.hpp"

namespace elpg {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// Per-parameter Adam moments.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;

    static AdamState for_param(const Tensor& p) {
        AdamState s;
        s.m.assign(p.size(), 0.0);
        s.v.assign(p.size(), 0.0);
        return s;
    }
};

/// One Adam update for a single parameter. Weight decay is added into the
/// gradient before the moment update; the gradient is zeroed afterwards.
inline void adam_step(Tensor& param, AdamState& state, const AdamConfig& cfg,
                      bool apply_decay = true) {
    if (!param.has_grad()) {
        throw ContractError("adam_step: parameter " + shape_str(param.shape()) +
                            " has no gradient; call backward first");
    }
    if (state.m.size() != param.size() || state.v.size() != param.size()) {
        throw ContractError("adam_step: state size does not match parameter");
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    auto& theta = param.data();
    const auto& grad = param.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
        double g = grad[i];
        if (apply_decay) g += cfg.weight_decay * theta[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    param.zero_grad();
}

inline void adam_step(std::vector<Tensor>& params, std::vector<AdamState>& states,
                      const AdamConfig& cfg) {
    if (params.size() != states.size()) {
        throw ContractError("adam_step: params/states not aligned");
    }
    for (std::size_t i = 0; i < params.size(); ++i) adam_step(params[i], states[i], cfg);
}

}  // namespace elpg
