#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "elpg/error.hpp"
#include "elpg/signal.hpp"
#include "elpg/tensor.hpp"

namespace elpg {

// Feature tensors are inputs to the model, not trained quantities, so they
// are plain arrays rather than graph tensors.

/// Differential entropies, nats: T x N x B.
struct DeTensor {
    std::size_t n_windows = 0, n_channels = 0, n_bands = 0;
    std::vector<double> values;

    double at(std::size_t t, std::size_t n, std::size_t b) const {
        return values[(t * n_channels + n) * n_bands + b];
    }
};

/// Within-channel band-pair mutual information, nats: T x N x P with
/// P = B(B-1)/2 and pairs ordered (0,1),(0,2),(0,3),(1,2),(1,3),(2,3).
struct MiTensor {
    std::size_t n_windows = 0, n_channels = 0, n_pairs = 0;
    std::vector<double> values;

    double at(std::size_t t, std::size_t n, std::size_t p) const {
        return values[(t * n_channels + n) * n_pairs + p];
    }
};

namespace detail {

inline double population_variance(std::span<const double> x) {
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    return var / static_cast<double>(x.size());
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
    const auto n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) throw DomainError("pearson: zero-variance input");
    return sab / std::sqrt(saa * sbb);
}

}  // namespace detail

inline constexpr double kVarianceFloor = 1e-12;

/// h = 0.5 ln(2 pi e sigma^2), the closed form for a zero-mean Gaussian
/// band signal; sigma^2 is the population variance of the window.
inline double differential_entropy(std::span<const double> x) {
    if (x.size() < 2) throw DomainError("differential_entropy: need at least 2 samples");
    const double var = detail::population_variance(x);
    if (var <= 0.0) throw DomainError("differential_entropy: zero variance");
    constexpr double two_pi_e = 2.0 * 3.14159265358979323846 * 2.718281828459045235360287;
    return 0.5 * std::log(two_pi_e * std::max(var, kVarianceFloor));
}

/// Gaussian MI estimator: -0.5 ln(1 - rho^2), clamped so the log argument
/// stays at or above 1e-12. Exact for bivariate Gaussians.
inline double mutual_information(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 8) {
        throw DomainError("mutual_information: need equal lengths >= 8");
    }
    const double rho = detail::pearson(a, b);
    const double one_minus = std::max(1.0 - rho * rho, 1e-12);
    return std::max(0.0, -0.5 * std::log(one_minus));
}

/// Plug-in estimator from an equal-width bins x bins joint histogram.
/// Non-differentiable; kept as an independent oracle for the Gaussian path.
inline double mutual_information_histogram(std::span<const double> a, std::span<const double> b,
                                           std::size_t bins) {
    if (a.size() != b.size() || a.empty()) {
        throw DomainError("mutual_information_histogram: need equal nonempty inputs");
    }
    if (bins < 2) throw DomainError("mutual_information_histogram: need >= 2 bins");
    auto edges = [&](std::span<const double> x) {
        double lo = x[0], hi = x[0];
        for (double v : x) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        return std::pair{lo, hi};
    };
    const auto [alo, ahi] = edges(a);
    const auto [blo, bhi] = edges(b);
    auto bin_of = [bins](double v, double lo, double hi) -> std::size_t {
        if (hi <= lo) return 0;
        auto k = static_cast<std::ptrdiff_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
        if (k < 0) k = 0;
        if (k >= static_cast<std::ptrdiff_t>(bins)) k = static_cast<std::ptrdiff_t>(bins) - 1;
        return static_cast<std::size_t>(k);
    };
    std::vector<double> joint(bins * bins, 0.0);
    std::vector<double> pa(bins, 0.0), pb(bins, 0.0);
    const double w = 1.0 / static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t ia = bin_of(a[i], alo, ahi);
        const std::size_t ib = bin_of(b[i], blo, bhi);
        joint[ia * bins + ib] += w;
        pa[ia] += w;
        pb[ib] += w;
    }
    double mi = 0.0;
    for (std::size_t i = 0; i < bins; ++i) {
        for (std::size_t j = 0; j < bins; ++j) {
            const double pij = joint[i * bins + j];
            if (pij > 0.0) mi += pij * std::log(pij / (pa[i] * pb[j]));
        }
    }
    return std::max(0.0, mi);
}

/// DE over every (window, channel, band) cell plus Gaussian MI over every
/// within-channel band pair.
inline std::pair<DeTensor, MiTensor> extract_features(const BandDecomposition& bands) {
    const std::size_t B = bands.n_bands;
    const std::size_t P = B * (B - 1) / 2;
    DeTensor de;
    de.n_windows = bands.n_windows;
    de.n_channels = bands.n_channels;
    de.n_bands = B;
    de.values.resize(bands.n_windows * bands.n_channels * B);
    MiTensor mi;
    mi.n_windows = bands.n_windows;
    mi.n_channels = bands.n_channels;
    mi.n_pairs = P;
    mi.values.resize(bands.n_windows * bands.n_channels * P);

    for (std::size_t t = 0; t < bands.n_windows; ++t) {
        for (std::size_t n = 0; n < bands.n_channels; ++n) {
            for (std::size_t b = 0; b < B; ++b) {
                std::span<const double> sig(bands.window_band(t, n, b), bands.window_len);
                de.values[(t * de.n_channels + n) * B + b] = differential_entropy(sig);
            }
            std::size_t p = 0;
            for (std::size_t b1 = 0; b1 < B; ++b1) {
                for (std::size_t b2 = b1 + 1; b2 < B; ++b2, ++p) {
                    std::span<const double> s1(bands.window_band(t, n, b1), bands.window_len);
                    std::span<const double> s2(bands.window_band(t, n, b2), bands.window_len);
                    mi.values[(t * mi.n_channels + n) * P + p] = mutual_information(s1, s2);
                }
            }
        }
    }
    return {std::move(de), std::move(mi)};
}

// ---------------------------------------------------------------------------
// Feature cache file: u64le T, N, B, P then DE values then MI values (f64le).
// ---------------------------------------------------------------------------

inline void write_features(std::ostream& os, const DeTensor& de, const MiTensor& mi) {
    detail::put_u64le(os, de.n_windows);
    detail::put_u64le(os, de.n_channels);
    detail::put_u64le(os, de.n_bands);
    detail::put_u64le(os, mi.n_pairs);
    for (double v : de.values) detail::put_f64le(os, v);
    for (double v : mi.values) detail::put_f64le(os, v);
}

inline std::pair<DeTensor, MiTensor> read_features(std::istream& is) {
    DeTensor de;
    MiTensor mi;
    de.n_windows = mi.n_windows = detail::get_u64le(is);
    de.n_channels = mi.n_channels = detail::get_u64le(is);
    de.n_bands = detail::get_u64le(is);
    mi.n_pairs = detail::get_u64le(is);
    if (de.n_windows > (1u << 24) || de.n_channels > (1u << 16) || de.n_bands > 64 ||
        mi.n_pairs > 2048) {
        throw DataError("feature cache: implausible header");
    }
    de.values.resize(de.n_windows * de.n_channels * de.n_bands);
    mi.values.resize(mi.n_windows * mi.n_channels * mi.n_pairs);
    for (double& v : de.values) v = detail::get_f64le(is);
    for (double& v : mi.values) v = detail::get_f64le(is);
    if (!is) throw DataError("feature cache: truncated payload");
    return {std::move(de), std::move(mi)};
}

}  // namespace elpg
