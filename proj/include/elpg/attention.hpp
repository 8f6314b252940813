#pragma once

#include <cmath>

#include "elpg/error.hpp"
#include "elpg/tensor.hpp"

namespace elpg {

/// Rank-1 channel-band attention: mask = sigmoid(chan) outer sigmoid(band).
struct ChannelBandMask {
    Tensor chan_logits;  // {N}, trainable
    Tensor band_logits;  // {B}, trainable

    static ChannelBandMask init(std::size_t n_channels, std::size_t n_bands) {
        ChannelBandMask m;
        m.chan_logits = Tensor::param({n_channels}, std::vector<double>(n_channels, 0.0));
        m.band_logits = Tensor::param({n_bands}, std::vector<double>(n_bands, 0.0));
        return m;
    }

    /// N x B mask with entries in (0, 1).
    Tensor mask() const { return outer(sigmoid(chan_logits), sigmoid(band_logits)); }
};

/// Bernoulli prior on mask entries with KL weight beta.
struct SparsityPrior {
    double p0 = 0.2;
    double beta = 1e-3;

    void validate() const {
        if (!(p0 > 0.0 && p0 < 1.0)) {
            throw ConfigError("sparsity prior: p0 must lie strictly inside (0,1)");
        }
        if (beta < 0.0) throw ConfigError("sparsity prior: beta must be nonnegative");
    }
};

/// Elementwise product of the mask with one window's DE matrix (N x B).
inline Tensor apply_mask(const Tensor& de, const Tensor& mask) {
    if (de.shape() != mask.shape()) {
        throw DimensionError("apply_mask: features " + shape_str(de.shape()) +
                             " vs mask " + shape_str(mask.shape()));
    }
    return mul(de, mask);
}

/// beta * sum KL(Bernoulli(q) || Bernoulli(p0)) over all mask cells,
/// probabilities clamped to [1e-6, 1-1e-6].
inline Tensor kl_sparsity(const ChannelBandMask& m, const SparsityPrior& prior) {
    prior.validate();
    Tensor q = clamp(m.mask(), 1e-6, 1.0 - 1e-6);
    Tensor one_minus_q = add_scalar(neg(q), 1.0);
    Tensor keep = mul(q, add_scalar(log(q), -std::log(prior.p0)));
    Tensor drop = mul(one_minus_q, add_scalar(log(one_minus_q), -std::log(1.0 - prior.p0)));
    return mul_scalar(sum(add(keep, drop)), prior.beta);
}

}  // namespace elpg
