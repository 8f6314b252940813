#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "elpg/error.hpp"

namespace elpg {

/// Multi-channel EEG recording. Samples are microvolts, channel-major.
struct Recording {
    std::string subject_id;
    int label = 0;  // class index, 0 = control, 1 = positive
    double fs = 0.0;
    std::vector<std::vector<double>> channels;        // N x S
    std::vector<std::array<double, 3>> coords;        // N x 3, millimeters

    std::size_t n_channels() const { return channels.size(); }
    std::size_t n_samples() const { return channels.empty() ? 0 : channels[0].size(); }
    double duration_sec() const { return static_cast<double>(n_samples()) / fs; }

    void validate() const {
        if (n_channels() < 2) throw DataError("recording: need at least 2 channels");
        if (fs <= 0.0) throw DataError("recording: nonpositive sampling rate");
        for (const auto& ch : channels) {
            if (ch.size() != n_samples()) throw DataError("recording: ragged channel lengths");
        }
        if (!coords.empty() && coords.size() != n_channels()) {
            throw DataError("recording: coordinate count does not match channels");
        }
        for (const auto& c : coords) {
            for (double v : c) {
                if (!std::isfinite(v)) throw DataError("recording: non-finite electrode coordinate");
            }
        }
    }
};

struct BandSpec {
    std::string name;
    double lo = 0.0;  // Hz
    double hi = 0.0;  // Hz
};

/// Conventional clinical band edges, compatible with a 0.3-30 Hz front filter.
inline std::vector<BandSpec> clinical_bands() {
    return {{"delta", 0.5, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 13.0}, {"beta", 13.0, 30.0}};
}

inline void validate_band(const BandSpec& band, double fs) {
    if (!(band.lo > 0.0) || !(band.lo < band.hi)) {
        throw ConfigError("band " + band.name + ": edges " + std::to_string(band.lo) + "-" +
                          std::to_string(band.hi) + " Hz are not ordered");
    }
    if (band.hi >= fs / 2.0) {
        throw ConfigError("band " + band.name + ": upper edge " + std::to_string(band.hi) +
                          " Hz at or above Nyquist (" + std::to_string(fs / 2.0) + " Hz)");
    }
}

/// Overlapping fixed-length windows of a recording, each a contiguous slice.
struct WindowedRecording {
    std::size_t n_windows = 0;   // T
    std::size_t n_channels = 0;  // N
    std::size_t window_len = 0;  // L, samples
    std::size_t hop = 0;
    double fs = 0.0;
    std::vector<double> windows;  // T x N x L

    double& at(std::size_t t, std::size_t n, std::size_t l) {
        return windows[(t * n_channels + n) * window_len + l];
    }
    double at(std::size_t t, std::size_t n, std::size_t l) const {
        return windows[(t * n_channels + n) * window_len + l];
    }
};

/// Per-band decomposition of every window.
struct BandDecomposition {
    std::size_t n_windows = 0, n_channels = 0, n_bands = 0, window_len = 0;
    std::vector<double> values;  // T x N x B x L

    double at(std::size_t t, std::size_t n, std::size_t b, std::size_t l) const {
        return values[((t * n_channels + n) * n_bands + b) * window_len + l];
    }
    const double* window_band(std::size_t t, std::size_t n, std::size_t b) const {
        return values.data() + ((t * n_channels + n) * n_bands + b) * window_len;
    }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Recording trim_edges(const Recording& rec, double head_sec, double tail_sec) {
    const auto head = static_cast<std::size_t>(std::llround(head_sec * rec.fs));
    const auto tail = static_cast<std::size_t>(std::llround(tail_sec * rec.fs));
    if (head + tail >= rec.n_samples()) {
        throw DataError("trim_edges: recording of " + std::to_string(rec.n_samples()) +
                        " samples too short for trim of " + std::to_string(head + tail));
    }
    Recording out = rec;
    for (auto& ch : out.channels) {
        ch = std::vector<double>(ch.begin() + static_cast<std::ptrdiff_t>(head),
                                 ch.end() - static_cast<std::ptrdiff_t>(tail));
    }
    return out;
}

namespace detail {

/// Hamming-windowed sinc bandpass, linear phase, odd tap count.
inline std::vector<double> design_bandpass(double lo, double hi, double fs, std::size_t taps) {
    const double f1 = lo / fs;
    const double f2 = hi / fs;
    const auto mid = static_cast<double>(taps - 1) / 2.0;
    std::vector<double> h(taps);
    auto sinc = [](double x) {
        if (x == 0.0) return 1.0;
        const double px = 3.14159265358979323846 * x;
        return std::sin(px) / px;
    };
    for (std::size_t n = 0; n < taps; ++n) {
        const double k = static_cast<double>(n) - mid;
        const double ideal = 2.0 * f2 * sinc(2.0 * f2 * k) - 2.0 * f1 * sinc(2.0 * f1 * k);
        const double w =
            0.54 - 0.46 * std::cos(2.0 * 3.14159265358979323846 * static_cast<double>(n) /
                                   static_cast<double>(taps - 1));
        h[n] = ideal * w;
    }
    return h;
}

/// Centered same-length convolution with zero padding outside the signal.
inline std::vector<double> convolve_same(const std::vector<double>& x,
                                         const std::vector<double>& h) {
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.size());
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(h.size());
    const std::ptrdiff_t half = (m - 1) / 2;
    std::vector<double> y(x.size(), 0.0);
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const std::ptrdiff_t kmin = std::max<std::ptrdiff_t>(0, i + half - n + 1);
        const std::ptrdiff_t kmax = std::min<std::ptrdiff_t>(m - 1, i + half);
        double acc = 0.0;
        const double* xs = x.data() + (i + half - kmin);
        const double* hs = h.data() + kmin;
        for (std::ptrdiff_t k = kmin; k <= kmax; ++k) acc += *hs++ * *xs--;
        y[static_cast<std::size_t>(i)] = acc;
    }
    return y;
}

inline void filtfilt_inplace(std::vector<double>& x, const std::vector<double>& h) {
    x = convolve_same(x, h);
    std::reverse(x.begin(), x.end());
    x = convolve_same(x, h);
    std::reverse(x.begin(), x.end());
}

}  // namespace detail

inline constexpr std::size_t kFirTaps = 251;

/// Zero-phase FIR bandpass: windowed-sinc design applied forward-backward,
/// so the magnitude response is squared and no group delay is introduced.
inline std::vector<double> fir_bandpass(const std::vector<double>& x, const BandSpec& band,
                                        double fs, std::size_t taps = kFirTaps) {
    validate_band(band, fs);
    const std::vector<double> h = detail::design_bandpass(band.lo, band.hi, fs, taps);
    std::vector<double> y = x;
    detail::filtfilt_inplace(y, h);
    return y;
}

inline Recording fir_bandpass(const Recording& rec, const BandSpec& band,
                              std::size_t taps = kFirTaps) {
    validate_band(band, rec.fs);
    const std::vector<double> h = detail::design_bandpass(band.lo, band.hi, rec.fs, taps);
    Recording out = rec;
    for (auto& ch : out.channels) detail::filtfilt_inplace(ch, h);
    return out;
}

/// Window-wise baseline subtraction followed by electrode-wise l2
/// normalization. Baseline blocks are consecutive aligned window_sec spans
/// (the final partial block is baselined too).
inline Recording baseline_and_normalize(const Recording& rec, double window_sec = 4.0) {
    Recording out = rec;
    const auto block = static_cast<std::size_t>(std::llround(window_sec * rec.fs));
    for (std::size_t n = 0; n < out.n_channels(); ++n) {
        auto& ch = out.channels[n];
        for (std::size_t start = 0; start < ch.size(); start += block) {
            const std::size_t stop = std::min(ch.size(), start + block);
            double mu = 0.0;
            for (std::size_t i = start; i < stop; ++i) mu += ch[i];
            mu /= static_cast<double>(stop - start);
            for (std::size_t i = start; i < stop; ++i) ch[i] -= mu;
        }
        double norm2 = 0.0;
        for (double v : ch) norm2 += v * v;
        if (norm2 <= 0.0) {
            throw DataError("baseline_and_normalize: channel " + std::to_string(n) +
                            " is zero after baseline subtraction");
        }
        const double inv = 1.0 / std::sqrt(norm2);
        for (double& v : ch) v *= inv;
    }
    return out;
}

inline WindowedRecording segment_windows(const Recording& rec, double window_sec = 4.0,
                                         double overlap = 0.5) {
    const auto L = static_cast<std::size_t>(std::llround(window_sec * rec.fs));
    if (L == 0 || rec.n_samples() < L) {
        throw DataError("segment_windows: recording shorter than one window");
    }
    const auto hop =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                     static_cast<double>(L) * (1.0 - overlap))));
    WindowedRecording out;
    out.n_channels = rec.n_channels();
    out.window_len = L;
    out.hop = hop;
    out.fs = rec.fs;
    out.n_windows = (rec.n_samples() - L) / hop + 1;
    out.windows.resize(out.n_windows * out.n_channels * L);
    for (std::size_t t = 0; t < out.n_windows; ++t) {
        for (std::size_t n = 0; n < out.n_channels; ++n) {
            const double* src = rec.channels[n].data() + t * hop;
            std::copy_n(src, L, out.windows.begin() +
                                    static_cast<std::ptrdiff_t>((t * out.n_channels + n) * L));
        }
    }
    return out;
}

/// Closed-form window count for a given duration/rate, shared with tests.
inline std::size_t window_count(std::size_t n_samples, double fs, double window_sec = 4.0,
                                double overlap = 0.5) {
    const auto L = static_cast<std::size_t>(std::llround(window_sec * fs));
    if (n_samples < L) return 0;
    const auto hop =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                     static_cast<double>(L) * (1.0 - overlap))));
    return (n_samples - L) / hop + 1;
}

/// Per-window band filtering. Each window is re-centered (per channel) before
/// filtering so residual DC from overlapped segmentation cannot leak through
/// the low bands.
inline BandDecomposition band_decompose(const WindowedRecording& win,
                                        const std::vector<BandSpec>& bands,
                                        std::size_t taps = kFirTaps) {
    for (const auto& b : bands) validate_band(b, win.fs);
    std::vector<std::vector<double>> kernels;
    kernels.reserve(bands.size());
    for (const auto& b : bands) kernels.push_back(detail::design_bandpass(b.lo, b.hi, win.fs, taps));

    BandDecomposition out;
    out.n_windows = win.n_windows;
    out.n_channels = win.n_channels;
    out.n_bands = bands.size();
    out.window_len = win.window_len;
    out.values.resize(out.n_windows * out.n_channels * out.n_bands * out.window_len);

    std::vector<double> centered(win.window_len);
    for (std::size_t t = 0; t < win.n_windows; ++t) {
        for (std::size_t n = 0; n < win.n_channels; ++n) {
            const double* src = &win.windows[(t * win.n_channels + n) * win.window_len];
            double mu = 0.0;
            for (std::size_t l = 0; l < win.window_len; ++l) mu += src[l];
            mu /= static_cast<double>(win.window_len);
            for (std::size_t l = 0; l < win.window_len; ++l) centered[l] = src[l] - mu;
            for (std::size_t b = 0; b < bands.size(); ++b) {
                std::vector<double> y = centered;
                detail::filtfilt_inplace(y, kernels[b]);
                std::copy(y.begin(), y.end(),
                          out.values.begin() +
                              static_cast<std::ptrdiff_t>(
                                  ((t * out.n_channels + n) * out.n_bands + b) * out.window_len));
            }
        }
    }
    return out;
}

}  // namespace elpg
