#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "elpg/error.hpp"
#include "elpg/graph.hpp"
#include "elpg/infofeat.hpp"
#include "elpg/log.hpp"
#include "elpg/rng.hpp"
#include "elpg/signal.hpp"

namespace elpg {

// ---------------------------------------------------------------------------
// Electrode layout: text file, "unit mm" line then "name x y z" per channel.
// ---------------------------------------------------------------------------

struct ElectrodeLayout {
    std::vector<std::string> names;
    std::vector<std::array<double, 3>> coords;  // millimeters

    std::size_t size() const { return names.size(); }

    void validate() const {
        for (std::size_t i = 0; i < coords.size(); ++i) {
            for (std::size_t j = i + 1; j < coords.size(); ++j) {
                if (coords[i] == coords[j]) {
                    throw DataError("layout: electrodes " + names[i] + " and " + names[j] +
                                    " share a position");
                }
            }
        }
    }
};

inline void write_layout(std::ostream& os, const ElectrodeLayout& layout) {
    os << "unit mm\n";
    os.precision(17);
    for (std::size_t i = 0; i < layout.size(); ++i) {
        os << layout.names[i] << ' ' << layout.coords[i][0] << ' ' << layout.coords[i][1] << ' '
           << layout.coords[i][2] << '\n';
    }
}

inline ElectrodeLayout read_layout(std::istream& is) {
    ElectrodeLayout layout;
    std::string line;
    if (!std::getline(is, line)) throw DataError("layout: empty file");
    std::istringstream header(line);
    std::string key, unit;
    header >> key >> unit;
    if (key != "unit" || unit != "mm") {
        throw DataError("layout: first line must declare 'unit mm', got '" + line + "'");
    }
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string name;
        double x = 0, y = 0, z = 0;
        if (!(ls >> name >> x >> y >> z)) {
            throw DataError("layout: malformed line '" + line + "'");
        }
        layout.names.push_back(name);
        layout.coords.push_back({x, y, z});
    }
    layout.validate();
    return layout;
}

inline ElectrodeLayout load_layout(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("layout: cannot open " + path);
    return read_layout(is);
}

// ---------------------------------------------------------------------------
// Recording binary: magic "EEGR", version byte 1, u64le channels, u64le
// samples, f64le sampling rate, then channel-major f64le samples.
// ---------------------------------------------------------------------------

inline void write_recording(std::ostream& os, const Recording& rec) {
    os.write("EEGR", 4);
    const char version = 1;
    os.write(&version, 1);
    detail::put_u64le(os, rec.n_channels());
    detail::put_u64le(os, rec.n_samples());
    detail::put_f64le(os, rec.fs);
    for (const auto& ch : rec.channels) {
        for (double v : ch) detail::put_f64le(os, v);
    }
}

inline Recording read_recording(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "EEGR") {
        throw DataError("recording: bad magic (expected EEGR)");
    }
    char version = 0;
    is.read(&version, 1);
    if (version != 1) {
        throw DataError("recording: unsupported version " + std::to_string(int(version)));
    }
    Recording rec;
    const std::uint64_t n_channels = detail::get_u64le(is);
    const std::uint64_t n_samples = detail::get_u64le(is);
    rec.fs = detail::get_f64le(is);
    if (n_channels == 0 || n_channels > (1u << 16) || n_samples > (1u << 28)) {
        throw DataError("recording: implausible header");
    }
    rec.channels.resize(n_channels);
    for (auto& ch : rec.channels) {
        ch.resize(n_samples);
        for (double& v : ch) v = detail::get_f64le(is);
    }
    if (!is) throw DataError("recording: truncated payload");
    return rec;
}

inline void save_recording(const std::string& path, const Recording& rec) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("recording: cannot open " + path + " for writing");
    write_recording(os, rec);
}

/// Loads samples from disk and attaches the layout's coordinates.
inline Recording load_recording(const std::string& path, const ElectrodeLayout& layout) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("recording: cannot open " + path);
    Recording rec = read_recording(is);
    if (layout.size() != rec.n_channels()) {
        throw DataError("recording " + path + ": layout has " + std::to_string(layout.size()) +
                        " electrodes, file has " + std::to_string(rec.n_channels()) +
                        " channels");
    }
    rec.coords = layout.coords;
    rec.validate();
    return rec;
}

// ---------------------------------------------------------------------------
// Subject manifest: CSV with header subject_id,label,path; cohort metadata
// carried in leading '#' comment lines.
// ---------------------------------------------------------------------------

struct SubjectManifest {
    struct Row {
        std::string subject_id;
        int label = 0;
        std::string path;
    };
    std::vector<Row> rows;
    double fs = 0.0;
    std::size_t n_channels = 0;
    double duration_sec = 0.0;
    std::string base_dir;  // directory of the manifest file; resolves paths

    std::string resolve(const Row& row) const {
        std::filesystem::path p(row.path);
        if (p.is_absolute() || base_dir.empty()) return row.path;
        return (std::filesystem::path(base_dir) / p).string();
    }
};

inline void write_manifest(std::ostream& os, const SubjectManifest& manifest) {
    os.precision(17);
    os << "# fs " << manifest.fs << '\n';
    os << "# n_channels " << manifest.n_channels << '\n';
    os << "# duration_sec " << manifest.duration_sec << '\n';
    os << "subject_id,label,path\n";
    for (const auto& row : manifest.rows) {
        os << row.subject_id << ',' << row.label << ',' << row.path << '\n';
    }
}

inline SubjectManifest read_manifest(std::istream& is) {
    SubjectManifest m;
    std::string line;
    bool header_seen = false;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ls(line.substr(1));
            std::string key;
            ls >> key;
            if (key == "fs") ls >> m.fs;
            if (key == "n_channels") ls >> m.n_channels;
            if (key == "duration_sec") ls >> m.duration_sec;
            continue;
        }
        if (!header_seen) {
            if (line != "subject_id,label,path") {
                throw DataError("manifest: expected header subject_id,label,path, got '" + line +
                                "'");
            }
            header_seen = true;
            continue;
        }
        std::istringstream ls(line);
        SubjectManifest::Row row;
        std::string label_str;
        if (!std::getline(ls, row.subject_id, ',') || !std::getline(ls, label_str, ',') ||
            !std::getline(ls, row.path)) {
            throw DataError("manifest line " + std::to_string(line_no) + ": malformed row '" +
                            line + "'");
        }
        try {
            row.label = std::stoi(label_str);
        } catch (const std::exception&) {
            throw DataError("manifest line " + std::to_string(line_no) + ": bad label '" +
                            label_str + "'");
        }
        if (row.label != 0 && row.label != 1) {
            throw DataError("manifest line " + std::to_string(line_no) + ": label " +
                            std::to_string(row.label) + " outside {0,1}");
        }
        m.rows.push_back(std::move(row));
    }
    for (std::size_t i = 0; i < m.rows.size(); ++i) {
        for (std::size_t j = i + 1; j < m.rows.size(); ++j) {
            if (m.rows[i].subject_id == m.rows[j].subject_id) {
                throw DataError("manifest: duplicate subject id " + m.rows[i].subject_id);
            }
        }
    }
    return m;
}

inline SubjectManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("manifest: cannot open " + path);
    SubjectManifest m = read_manifest(is);
    m.base_dir = std::filesystem::path(path).parent_path().string();
    for (const auto& row : m.rows) {
        if (!std::filesystem::exists(m.resolve(row))) {
            throw DataError("manifest: subject " + row.subject_id + " references missing file " +
                            row.path);
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Preprocessing parameters and the feature cache
// ---------------------------------------------------------------------------

struct PreprocessConfig {
    double trim_head_sec = 10.0;
    double trim_tail_sec = 10.0;
    double broadband_lo = 0.3;
    double broadband_hi = 30.0;
    double window_sec = 4.0;
    double overlap = 0.5;
    std::size_t fir_taps = kFirTaps;
    std::vector<BandSpec> bands = clinical_bands();

    std::string cache_key_string() const {
        std::ostringstream os;
        os.precision(17);
        os << trim_head_sec << '|' << trim_tail_sec << '|' << broadband_lo << '|' << broadband_hi
           << '|' << window_sec << '|' << overlap << '|' << fir_taps;
        for (const auto& b : bands) os << '|' << b.name << ':' << b.lo << '-' << b.hi;
        return os.str();
    }
};

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex16(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

}  // namespace detail

/// Content hash over the recording file's bytes and the preprocessing
/// parameters; a changed band edge or trim means a cache miss.
inline std::uint64_t feature_cache_hash(const std::string& recording_path,
                                        const PreprocessConfig& cfg) {
    std::ifstream is(recording_path, std::ios::binary);
    if (!is) throw DataError("cache: cannot open " + recording_path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        h = detail::fnv1a(buf, static_cast<std::size_t>(is.gcount()), h);
        if (is.eof()) break;
    }
    const std::string params = cfg.cache_key_string();
    return detail::fnv1a(params.data(), params.size(), h);
}

inline std::string feature_cache_path(const std::string& cache_dir, const std::string& subject_id,
                                      std::uint64_t hash) {
    return (std::filesystem::path(cache_dir) / (subject_id + "_" + detail::hex16(hash) + ".feat"))
        .string();
}

/// Atomic write: temp file in the same directory, then rename.
inline void cache_features(const std::string& path, const DeTensor& de, const MiTensor& mi) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw DataError("cache: cannot open " + tmp + " for writing");
        write_features(os, de, mi);
    }
    std::filesystem::rename(tmp, path);
}

/// nullopt on miss or corruption; corruption is logged and the caller
/// recomputes.
inline std::optional<std::pair<DeTensor, MiTensor>> load_cached_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return std::nullopt;
    try {
        return read_features(is);
    } catch (const DataError& e) {
        log_warn(std::string("corrupt feature cache ") + path + " (" + e.what() +
                 "); recomputing");
        return std::nullopt;
    }
}

// ---------------------------------------------------------------------------
// Synthetic cohort generator
// ---------------------------------------------------------------------------

struct CohortConfig {
    std::size_t n_per_class = 20;
    std::size_t n_channels = 16;
    double fs = 250.0;
    double duration_sec = 60.0;
    double alpha_power_ratio = 1.0;  // class-1 frontal alpha power multiplier
    double coupling_delta = 0.0;     // class-1 increment to inter-channel coupling
    double noise_std = 0.05;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_per_class == 0) throw ConfigError("cohort: need at least one subject per class");
        if (n_channels < 9) throw ConfigError("cohort: need at least 9 channels for 9 groups");
        if (fs <= 2.0 * 30.0) {
            throw ConfigError("cohort: sampling rate " + std::to_string(fs) +
                              " too low for a 30 Hz band edge");
        }
        if (duration_sec < 4.0) throw ConfigError("cohort: duration below one window");
        if (alpha_power_ratio < 0.0 || coupling_delta < 0.0) {
            throw ConfigError("cohort: effect sizes must be nonnegative");
        }
    }
};

/// Upper-hemisphere spiral montage, head radius 90 mm, nose toward +y.
inline ElectrodeLayout spherical_cap_layout(std::size_t n_channels) {
    ElectrodeLayout layout;
    constexpr double radius = 90.0;
    constexpr double golden = 2.399963229728653;
    constexpr double theta_max = 1.3;  // radians from vertex
    for (std::size_t i = 0; i < n_channels; ++i) {
        const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(n_channels);
        const double theta = std::acos(1.0 - t * (1.0 - std::cos(theta_max)));
        const double phi = golden * static_cast<double>(i);
        layout.names.push_back("E" + std::to_string(i));
        layout.coords.push_back({radius * std::sin(theta) * std::cos(phi),
                                 radius * std::sin(theta) * std::sin(phi),
                                 radius * std::cos(theta)});
    }
    layout.validate();
    return layout;
}

/// Channels toward the front of the montage (largest y), about a quarter of
/// the cap. These carry the class-1 alpha power effect.
inline std::vector<std::size_t> frontal_channels(const ElectrodeLayout& layout) {
    std::vector<std::size_t> order(layout.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (layout.coords[a][1] != layout.coords[b][1])
            return layout.coords[a][1] > layout.coords[b][1];
        return a < b;
    });
    const std::size_t count = std::max<std::size_t>(1, layout.size() / 4);
    order.resize(count);
    std::sort(order.begin(), order.end());
    return order;
}

namespace detail {

inline std::vector<double> band_noise(Rng& rng, std::size_t n, const BandSpec& band, double fs) {
    std::vector<double> x(n);
    for (double& v : x) v = rng.normal();
    x = fir_bandpass(x, band, fs);
    // normalize to unit power so amplitudes mean what they say
    double p = 0.0;
    for (double v : x) p += v * v;
    p = std::sqrt(p / static_cast<double>(n));
    if (p > 0) {
        for (double& v : x) v /= p;
    }
    return x;
}

}  // namespace detail

/// One subject's channels: per band, a mix of a channel-private source and a
/// cohort-shared source (mixing weight = coupling), scaled by per-band
/// amplitudes. Class 1 multiplies frontal alpha power by alpha_power_ratio
/// and raises coupling by coupling_delta.
inline Recording synthesize_subject(const CohortConfig& cfg, const ElectrodeLayout& layout,
                                    const std::vector<std::size_t>& frontal, int label,
                                    std::uint64_t subject_seed) {
    const auto n = static_cast<std::size_t>(cfg.duration_sec * cfg.fs);
    const std::vector<BandSpec> bands = clinical_bands();
    const double base_amp[4] = {1.0, 0.8, 0.7, 0.5};  // delta, theta, alpha, beta
    const double base_coupling = 0.3;

    Rng rng(subject_seed);
    // cohort-shared drivers are re-seeded per subject from the same stream
    // position, so coupling raises within-subject channel correlation without
    // tying subjects together
    std::vector<std::vector<double>> shared(bands.size());
    for (std::size_t b = 0; b < bands.size(); ++b) shared[b] = detail::band_noise(rng, n, bands[b], cfg.fs);

    const double coupling = std::min(0.95, base_coupling + (label == 1 ? cfg.coupling_delta : 0.0));
    std::vector<bool> is_frontal(layout.size(), false);
    for (std::size_t ch : frontal) is_frontal[ch] = true;

    Recording rec;
    rec.fs = cfg.fs;
    rec.label = label;
    rec.coords = layout.coords;
    rec.channels.resize(layout.size());
    for (std::size_t ch = 0; ch < layout.size(); ++ch) {
        // mild per-subject-channel power jitter
        const double jitter = std::exp(0.05 * rng.normal());
        std::vector<double> x(n, 0.0);
        for (std::size_t b = 0; b < bands.size(); ++b) {
            double amp = base_amp[b] * jitter;
            if (b == 2 && label == 1 && is_frontal[ch]) {
                amp *= std::sqrt(cfg.alpha_power_ratio);
            }
            std::vector<double> own = detail::band_noise(rng, n, bands[b], cfg.fs);
            const double wo = std::sqrt(1.0 - coupling * coupling);
            for (std::size_t i = 0; i < n; ++i) {
                x[i] += amp * (wo * own[i] + coupling * shared[b][i]);
            }
        }
        for (std::size_t i = 0; i < n; ++i) x[i] += cfg.noise_std * rng.normal();
        rec.channels[ch] = std::move(x);
    }
    return rec;
}

/// Writes recordings, layout, default parcellation, and manifest under
/// out_dir. Deterministic: the same config writes byte-identical files.
inline SubjectManifest generate_synthetic_cohort(const CohortConfig& cfg,
                                                 const std::string& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const ElectrodeLayout layout = spherical_cap_layout(cfg.n_channels);
    const std::vector<std::size_t> frontal = frontal_channels(layout);
    {
        std::ofstream os((std::filesystem::path(out_dir) / "layout.txt").string());
        write_layout(os, layout);
    }
    {
        std::ofstream os((std::filesystem::path(out_dir) / "parcellation.txt").string());
        write_parcellation(os, Parcellation::contiguous_blocks(cfg.n_channels, 9));
    }

    SubjectManifest manifest;
    manifest.fs = cfg.fs;
    manifest.n_channels = cfg.n_channels;
    manifest.duration_sec = cfg.duration_sec;
    manifest.base_dir = out_dir;
    const std::size_t total = 2 * cfg.n_per_class;
    for (std::size_t idx = 0; idx < total; ++idx) {
        const int label = idx < cfg.n_per_class ? 0 : 1;
        std::ostringstream id;
        id << "s" << (idx < 10 ? "0" : "") << idx;
        const std::uint64_t subject_seed =
            detail::fnv1a(&idx, sizeof(idx), 0xcbf29ce484222325ULL ^ cfg.seed);
        Recording rec = synthesize_subject(cfg, layout, frontal, label, subject_seed);
        rec.subject_id = id.str();
        const std::string filename = id.str() + ".eeg";
        save_recording((std::filesystem::path(out_dir) / filename).string(), rec);
        manifest.rows.push_back({id.str(), label, filename});
    }
    {
        std::ofstream os((std::filesystem::path(out_dir) / "manifest.csv").string());
        write_manifest(os, manifest);
    }
    return manifest;
}

}  // namespace elpg
