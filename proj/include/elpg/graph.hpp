#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "elpg/error.hpp"
#include "elpg/signal.hpp"
#include "elpg/tensor.hpp"

namespace elpg {

// ---------------------------------------------------------------------------
// Seed adjacency
// ---------------------------------------------------------------------------

/// |Pearson correlation| between channels over the full preprocessed
/// recording; zero diagonal. Fixed per subject, not trainable.
struct SeedAdjacency {
    std::size_t n = 0;
    std::vector<double> a0;  // N x N

    double at(std::size_t i, std::size_t j) const { return a0[i * n + j]; }
};

inline SeedAdjacency pearson_seed(const Recording& rec) {
    const std::size_t n = rec.n_channels();
    const std::size_t s = rec.n_samples();
    std::vector<double> mean(n, 0.0), sd(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (double v : rec.channels[i]) mean[i] += v;
        mean[i] /= static_cast<double>(s);
        for (double v : rec.channels[i]) sd[i] += (v - mean[i]) * (v - mean[i]);
        if (sd[i] <= 0.0) {
            throw DomainError("pearson_seed: channel " + std::to_string(i) + " is constant");
        }
        sd[i] = std::sqrt(sd[i]);
    }
    SeedAdjacency seed;
    seed.n = n;
    seed.a0.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double dot = 0.0;
            const auto& xi = rec.channels[i];
            const auto& xj = rec.channels[j];
            for (std::size_t k = 0; k < s; ++k) dot += (xi[k] - mean[i]) * (xj[k] - mean[j]);
            const double rho = std::min(1.0, std::abs(dot / (sd[i] * sd[j])));
            seed.a0[i * n + j] = rho;
            seed.a0[j * n + i] = rho;
        }
    }
    return seed;
}

// ---------------------------------------------------------------------------
// Learnable edge mask
// ---------------------------------------------------------------------------

/// Per-edge multiplier sigmoid(logits) in (0,1). Zero logits start every
/// edge at exactly 0.5 so trained weights can move either way.
struct EdgeMask {
    Tensor logits;  // {N, N}, trainable

    static EdgeMask init(std::size_t n) {
        EdgeMask m;
        m.logits = Tensor::param({n, n}, std::vector<double>(n * n, 0.0));
        return m;
    }
};

/// A = A0 (elementwise) sigmoid(W_alpha); differentiable through the logits.
inline Tensor apply_edge_mask(const SeedAdjacency& seed, const EdgeMask& mask) {
    if (mask.logits.shape() != Shape{seed.n, seed.n}) {
        throw DimensionError("apply_edge_mask: mask " + shape_str(mask.logits.shape()) +
                             " vs seed [" + std::to_string(seed.n) + "x" +
                             std::to_string(seed.n) + "]");
    }
    Tensor a0 = Tensor::from({seed.n, seed.n}, seed.a0);
    return mul(a0, sigmoid(mask.logits));
}

// ---------------------------------------------------------------------------
// Inverse-square distance prior
// ---------------------------------------------------------------------------

struct DistancePrior {
    std::size_t n = 0;
    double delta = 6.0;  // mm^2
    std::vector<double> a_dist;  // N x N, entries in [0.1, 1], zero diagonal

    double at(std::size_t i, std::size_t j) const { return a_dist[i * n + j]; }
};

inline DistancePrior distance_prior(const std::vector<std::array<double, 3>>& coords_mm,
                                    double delta = 6.0) {
    const std::size_t n = coords_mm.size();
    DistancePrior prior;
    prior.n = n;
    prior.delta = delta;
    prior.a_dist.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double d2 = 0.0;
            for (int k = 0; k < 3; ++k) {
                const double d = coords_mm[i][k] - coords_mm[j][k];
                d2 += d * d;
            }
            if (d2 <= 0.0) {
                throw DataError("distance_prior: electrodes " + std::to_string(i) + " and " +
                                std::to_string(j) + " coincide");
            }
            const double w = std::min(1.0, std::max(0.1, delta / d2));
            prior.a_dist[i * n + j] = w;
            prior.a_dist[j * n + i] = w;
        }
    }
    return prior;
}

// ---------------------------------------------------------------------------
// Parcellation
// ---------------------------------------------------------------------------

/// Channel -> cortical-group map; K groups, every group nonempty.
struct Parcellation {
    std::vector<std::size_t> group_of;  // length N
    std::size_t n_groups = 9;

    void validate() const {
        std::vector<std::size_t> count(n_groups, 0);
        for (std::size_t g : group_of) {
            if (g >= n_groups) {
                throw DataError("parcellation: group index " + std::to_string(g) +
                                " out of range 0-" + std::to_string(n_groups - 1));
            }
            ++count[g];
        }
        for (std::size_t g = 0; g < n_groups; ++g) {
            if (count[g] == 0) {
                throw DataError("parcellation: group " + std::to_string(g) + " is empty");
            }
        }
    }

    std::vector<std::vector<std::size_t>> members() const {
        std::vector<std::vector<std::size_t>> m(n_groups);
        for (std::size_t ch = 0; ch < group_of.size(); ++ch) m[group_of[ch]].push_back(ch);
        return m;
    }

    /// Contiguous equal blocks, the default for generated montages.
    static Parcellation contiguous_blocks(std::size_t n_channels, std::size_t n_groups = 9) {
        if (n_channels < n_groups) {
            throw ConfigError("parcellation: need at least " + std::to_string(n_groups) +
                              " channels for " + std::to_string(n_groups) + " groups");
        }
        Parcellation p;
        p.n_groups = n_groups;
        p.group_of.resize(n_channels);
        for (std::size_t ch = 0; ch < n_channels; ++ch) {
            p.group_of[ch] = std::min(n_groups - 1, ch * n_groups / n_channels);
        }
        return p;
    }
};

/// Text format: one "channel_index group_index" pair per line.
inline void write_parcellation(std::ostream& os, const Parcellation& p) {
    for (std::size_t ch = 0; ch < p.group_of.size(); ++ch) {
        os << ch << ' ' << p.group_of[ch] << '\n';
    }
}

inline Parcellation read_parcellation(std::istream& is, std::size_t n_groups = 9) {
    Parcellation p;
    p.n_groups = n_groups;
    std::string line;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::size_t ch = 0, g = 0;
        if (!(ls >> ch >> g)) throw DataError("parcellation: malformed line '" + line + "'");
        pairs.emplace_back(ch, g);
    }
    p.group_of.assign(pairs.size(), 0);
    for (auto [ch, g] : pairs) {
        if (ch >= p.group_of.size()) {
            throw DataError("parcellation: channel index " + std::to_string(ch) +
                            " out of range for " + std::to_string(pairs.size()) + " entries");
        }
        p.group_of[ch] = g;
    }
    p.validate();
    return p;
}

inline Parcellation load_parcellation(const std::string& path, std::size_t n_groups = 9) {
    std::ifstream is(path);
    if (!is) throw DataError("parcellation: cannot open " + path);
    return read_parcellation(is, n_groups);
}

// ---------------------------------------------------------------------------
// Sinusoidal positional embedding
// ---------------------------------------------------------------------------

inline constexpr std::size_t kPosFrequencies = 4;   // scales 1, 2, 4, 8
inline constexpr std::size_t kPosEmbedDim = 3 * 2 * kPosFrequencies;  // 24

/// Min-max rescale of each montage axis to [0,1]; degenerate axes map to 0.
inline std::vector<std::array<double, 3>> rescale_unit_cube(
    const std::vector<std::array<double, 3>>& coords) {
    std::array<double, 3> lo{}, hi{};
    for (int k = 0; k < 3; ++k) {
        lo[k] = coords[0][k];
        hi[k] = coords[0][k];
    }
    for (const auto& c : coords) {
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], c[k]);
            hi[k] = std::max(hi[k], c[k]);
        }
    }
    std::vector<std::array<double, 3>> out(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            const double span = hi[k] - lo[k];
            out[i][k] = span > 0.0 ? (coords[i][k] - lo[k]) / span : 0.0;
        }
    }
    return out;
}

/// Per node: for each frequency f in {1,2,4,8}, sin(f*pi*p) then cos(f*pi*p)
/// over the three rescaled axes. Row-major N x 24.
inline std::vector<double> positional_embed(const std::vector<std::array<double, 3>>& coords) {
    const auto unit = rescale_unit_cube(coords);
    constexpr double pi = 3.14159265358979323846;
    std::vector<double> out(coords.size() * kPosEmbedDim);
    for (std::size_t i = 0; i < unit.size(); ++i) {
        std::size_t col = 0;
        for (std::size_t f = 0; f < kPosFrequencies; ++f) {
            const double scale = static_cast<double>(std::size_t{1} << f) * pi;
            for (int k = 0; k < 3; ++k) out[i * kPosEmbedDim + col++] = std::sin(scale * unit[i][k]);
            for (int k = 0; k < 3; ++k) out[i * kPosEmbedDim + col++] = std::cos(scale * unit[i][k]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Operator normalization and sparsification
// ---------------------------------------------------------------------------

struct NormalizedOperator {
    Tensor l_tilde;   // M x M propagation operator
    Tensor degrees;   // {M} cached row sums of S
};

/// L = D^{-1/2} S D^{-1/2} with D the row-sum degrees of S. Differentiable
/// through S; rejects isolated nodes by name.
inline NormalizedOperator normalize_operator(const Tensor& s) {
    if (s.ndim() != 2 || s.dim(0) != s.dim(1)) {
        throw DimensionError("normalize_operator: expected square matrix, got " +
                             shape_str(s.shape()));
    }
    Tensor deg = sum(s, 1);
    for (std::size_t i = 0; i < deg.size(); ++i) {
        if (!(deg.at(i) > 0.0)) {
            throw DomainError("normalize_operator: node " + std::to_string(i) +
                              " has zero degree (isolated)");
        }
    }
    Tensor dinv = pow_scalar(deg, -0.5);
    return {mul(s, outer(dinv, dinv)), deg};
}

/// S = A + A_dist, then symmetric-style normalization.
inline NormalizedOperator combine_and_normalize(const Tensor& a, const DistancePrior& prior) {
    if (a.shape() != Shape{prior.n, prior.n}) {
        throw DimensionError("combine_and_normalize: adjacency " + shape_str(a.shape()) +
                             " vs prior [" + std::to_string(prior.n) + "x" +
                             std::to_string(prior.n) + "]");
    }
    Tensor dist = Tensor::from({prior.n, prior.n}, prior.a_dist);
    return normalize_operator(add(a, dist));
}

/// Per row keep the ceil(keep_frac * M) largest entries (ties toward the
/// lower column index), zero the rest. No renormalization here; gradients
/// flow through the retained entries only.
inline Tensor topk_sparsify(const Tensor& a, double keep_frac) {
    if (!(keep_frac > 0.0 && keep_frac <= 1.0)) {
        throw ConfigError("topk_sparsify: keep fraction must lie in (0, 1]");
    }
    if (a.ndim() != 2) {
        throw DimensionError("topk_sparsify: expected matrix, got " + shape_str(a.shape()));
    }
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    const auto k = static_cast<std::size_t>(
        std::ceil(keep_frac * static_cast<double>(cols)) + 1e-12);
    if (k >= cols) return mul_scalar(a, 1.0);  // keep everything
    std::vector<double> keep_mask(rows * cols, 0.0);
    std::vector<std::size_t> order(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                          order.end(), [&](std::size_t x, std::size_t y) {
                              const double vx = a.at(r * cols + x), vy = a.at(r * cols + y);
                              if (vx != vy) return vx > vy;
                              return x < y;
                          });
        for (std::size_t i = 0; i < k; ++i) keep_mask[r * cols + order[i]] = 1.0;
    }
    return mul(a, Tensor::from({rows, cols}, std::move(keep_mask)));
}

/// Retained entries per row under topk_sparsify.
inline std::size_t topk_keep_count(std::size_t cols, double keep_frac) {
    return std::min(cols, static_cast<std::size_t>(
                              std::ceil(keep_frac * static_cast<double>(cols)) + 1e-12));
}

}  // namespace elpg
