#pragma once

#include <cmath>
#include <vector>

#include "elpg/error.hpp"
#include "elpg/rng.hpp"
#include "elpg/tensor.hpp"

namespace elpg {

/// How a direction's per-step hidden states become one vector per channel.
enum class SeqAggregate { kLastState, kMeanState };

/// One weight set per direction; gate blocks are ordered
/// (input, forget, cell, output) along the 4H axis.
struct BiLstmParams {
    std::size_t input_size = 10;
    std::size_t hidden_size = 64;
    Tensor w_x_fwd, w_h_fwd, b_fwd;  // {F,4H}, {H,4H}, {4H}
    Tensor w_x_bwd, w_h_bwd, b_bwd;

    static BiLstmParams init(std::size_t input, std::size_t hidden, Rng& rng) {
        BiLstmParams p;
        p.input_size = input;
        p.hidden_size = hidden;
        const double k = 1.0 / std::sqrt(static_cast<double>(hidden));
        auto uniform = [&](Shape shape) {
            std::vector<double> v(shape_numel(shape));
            for (double& x : v) x = rng.uniform(-k, k);
            return Tensor::param(std::move(shape), std::move(v));
        };
        auto bias = [&] {
            std::vector<double> v(4 * hidden);
            for (double& x : v) x = rng.uniform(-k, k);
            // forget-gate block starts nearly open
            for (std::size_t i = hidden; i < 2 * hidden; ++i) v[i] = 1.0;
            return Tensor::param({4 * hidden}, std::move(v));
        };
        p.w_x_fwd = uniform({input, 4 * hidden});
        p.w_h_fwd = uniform({hidden, 4 * hidden});
        p.b_fwd = bias();
        p.w_x_bwd = uniform({input, 4 * hidden});
        p.w_h_bwd = uniform({hidden, 4 * hidden});
        p.b_bwd = bias();
        return p;
    }

    std::vector<Tensor> trainable() const {
        return {w_x_fwd, w_h_fwd, b_fwd, w_x_bwd, w_h_bwd, b_bwd};
    }
};

namespace detail {

struct LstmDirection {
    const Tensor& w_x;
    const Tensor& w_h;
    const Tensor& b;
};

// Runs all channels in parallel as rows of the step matrices.
inline Tensor lstm_direction(const std::vector<Tensor>& steps, const LstmDirection& d,
                             std::size_t hidden, bool reversed, SeqAggregate agg) {
    const std::size_t n_rows = steps[0].dim(0);
    const Tensor bias = reshape(d.b, {1, 4 * hidden});
    Tensor h = Tensor::zeros({n_rows, hidden});
    Tensor c = Tensor::zeros({n_rows, hidden});
    Tensor mean_acc = Tensor::zeros({n_rows, hidden});
    for (std::size_t s = 0; s < steps.size(); ++s) {
        const Tensor& x = steps[reversed ? steps.size() - 1 - s : s];
        Tensor gates = add(add(matmul(x, d.w_x), matmul(h, d.w_h)), bias);
        Tensor in_gate = sigmoid(slice(gates, 1, 0, hidden));
        Tensor forget_gate = sigmoid(slice(gates, 1, hidden, hidden));
        Tensor cell_cand = tanh(slice(gates, 1, 2 * hidden, hidden));
        Tensor out_gate = sigmoid(slice(gates, 1, 3 * hidden, hidden));
        c = add(mul(forget_gate, c), mul(in_gate, cell_cand));
        h = mul(out_gate, tanh(c));
        if (agg == SeqAggregate::kMeanState) mean_acc = add(mean_acc, h);
    }
    if (agg == SeqAggregate::kMeanState) {
        return mul_scalar(mean_acc, 1.0 / static_cast<double>(steps.size()));
    }
    return h;
}

}  // namespace detail

/// Encodes a T-step sequence of per-channel feature rows into one N x 2H node
/// matrix. One weight-shared cell runs over every channel's sequence, forward
/// and backward; the directions' aggregated states are concatenated.
inline Tensor bilstm_encode(const std::vector<Tensor>& steps, const BiLstmParams& p,
                            SeqAggregate agg = SeqAggregate::kLastState) {
    if (steps.empty()) throw DimensionError("bilstm_encode: empty sequence");
    for (const Tensor& s : steps) {
        if (s.ndim() != 2 || s.dim(1) != p.input_size || s.dim(0) != steps[0].dim(0)) {
            throw DimensionError("bilstm_encode: step shape " + shape_str(s.shape()) +
                                 " does not match input size " + std::to_string(p.input_size));
        }
    }
    Tensor fwd = detail::lstm_direction(steps, {p.w_x_fwd, p.w_h_fwd, p.b_fwd}, p.hidden_size,
                                        false, agg);
    Tensor bwd = detail::lstm_direction(steps, {p.w_x_bwd, p.w_h_bwd, p.b_bwd}, p.hidden_size,
                                        true, agg);
    return concat({fwd, bwd}, 1);
}

}  // namespace elpg
