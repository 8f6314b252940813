#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "elpg/attention.hpp"
#include "elpg/bilstm.hpp"
#include "elpg/error.hpp"
#include "elpg/graph.hpp"
#include "elpg/infofeat.hpp"
#include "elpg/rng.hpp"
#include "elpg/tensor.hpp"

namespace elpg {

struct ModelConfig {
    std::size_t n_channels = 16;   // N
    std::size_t n_bands = 4;       // B
    std::size_t n_groups = 9;      // K
    std::size_t node_dim = 128;    // C
    std::size_t lstm_hidden = 64;  // per direction
    std::size_t n_heads = 6;
    double keep_frac = 0.25;
    double gate_bias_init = -4.0;
    SeqAggregate seq_aggregate = SeqAggregate::kLastState;
    bool virtual_in_maxpool = true;

    // Ablation switches.
    bool use_channel_band_mask = true;  // off: features pass unmasked
    bool use_mi_features = true;        // off: MI columns zeroed
    bool learnable_adjacency = true;    // off: edge logits frozen at 0 (mask 0.5)
    bool use_prior_gate = true;         // off: gates forced closed and frozen

    std::size_t head_dim() const { return node_dim / n_heads; }
    std::size_t mi_pairs() const { return n_bands * (n_bands - 1) / 2; }
    std::size_t feature_dim() const { return n_bands + mi_pairs(); }
    std::size_t n_nodes_total() const { return n_channels + n_groups; }

    void validate() const {
        if (n_channels < 2) throw ConfigError("model: need at least 2 channels");
        if (node_dim != 2 * lstm_hidden) {
            throw ConfigError("model: node dim must equal twice the BiLSTM hidden size");
        }
        if (head_dim() == 0) throw ConfigError("model: more heads than feature dims");
        if (!(keep_frac > 0.0 && keep_frac <= 1.0)) {
            throw ConfigError("model: keep fraction outside (0,1]");
        }
    }
};

inline constexpr std::size_t kPriorRawDim = 9 + kPosEmbedDim + 2;  // 35

// ---------------------------------------------------------------------------
// Parameter groups
// ---------------------------------------------------------------------------

struct VirtualCenterParams {
    Tensor w_p;  // {C, C}
    Tensor q;    // {C}
};

struct GlobalAttentionParams {
    struct Head {
        Tensor q_w, k_w, v_w;  // {C, d_k} each
    };
    std::vector<Head> heads;
    Tensor out_w;  // {heads * d_k, C}
    Tensor out_b;  // {C}
};

struct PriorGateParams {
    Tensor w_g;  // {C, C}
    Tensor b_g;  // {C}
};

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay = true;      // participates in weight decay
    bool trainable = true;  // participates in optimizer updates
};

/// All trainable state of the network plus the ablation wiring that created
/// it. Identical seeds draw identical weights regardless of which ablation
/// switches are set; switches only override or freeze afterwards.
struct Model {
    ModelConfig cfg;
    ChannelBandMask mask;
    BiLstmParams lstm;
    Tensor pos_lift_w, pos_lift_b;      // 24 -> C
    EdgeMask edge_mask;
    VirtualCenterParams vc;
    GlobalAttentionParams attn;
    Tensor gcn1_w, gcn2_w;              // {C, C}
    Tensor prior_lift_w, prior_lift_b;  // 35 -> C
    PriorGateParams gate1, gate2;
    Tensor head_w1, head_b1, head_w2, head_b2;  // C -> 64 -> 2

    static Model init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng(seed);
        const std::size_t C = cfg.node_dim;
        auto uniform = [&rng](Shape shape, double bound) {
            std::vector<double> v(shape_numel(shape));
            for (double& x : v) x = rng.uniform(-bound, bound);
            return Tensor::param(std::move(shape), std::move(v));
        };
        // Variance-preserving bounds: sqrt(3/fan_in) uniform keeps unit
        // variance through a linear map, sqrt(6/fan_in) compensates the
        // halving of a following ReLU. Without these the five-layer stack
        // starts with vanishing logits and a long flat warmup.
        auto linear_init = [&uniform](Shape shape) {
            const double bound = std::sqrt(3.0 / static_cast<double>(shape[0]));
            return uniform(std::move(shape), bound);
        };
        auto relu_init = [&uniform](Shape shape) {
            const double bound = std::sqrt(6.0 / static_cast<double>(shape[0]));
            return uniform(std::move(shape), bound);
        };
        auto zeros_param = [](Shape shape) {
            return Tensor::param(std::move(shape), std::vector<double>(shape_numel(shape), 0.0));
        };

        m.mask = ChannelBandMask::init(cfg.n_channels, cfg.n_bands);
        m.lstm = BiLstmParams::init(cfg.feature_dim(), cfg.lstm_hidden, rng);
        m.pos_lift_w = linear_init({kPosEmbedDim, C});
        m.pos_lift_b = zeros_param({C});
        m.edge_mask = EdgeMask::init(cfg.n_channels);
        m.vc.w_p = linear_init({C, C});
        m.vc.q = uniform({C}, std::sqrt(3.0 / static_cast<double>(C)));
        const std::size_t dk = cfg.head_dim();
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            m.attn.heads.push_back(
                {linear_init({C, dk}), linear_init({C, dk}), linear_init({C, dk})});
        }
        m.attn.out_w = linear_init({cfg.n_heads * dk, C});
        m.attn.out_b = zeros_param({C});
        m.gcn1_w = relu_init({C, C});
        m.gcn2_w = relu_init({C, C});
        m.prior_lift_w = linear_init({kPriorRawDim, C});
        m.prior_lift_b = zeros_param({C});
        m.gate1.w_g = uniform({C, C}, 0.01);
        m.gate1.b_g = Tensor::param({C}, std::vector<double>(C, cfg.gate_bias_init));
        m.gate2.w_g = uniform({C, C}, 0.01);
        m.gate2.b_g = Tensor::param({C}, std::vector<double>(C, cfg.gate_bias_init));
        m.head_w1 = relu_init({C, 64});
        m.head_b1 = zeros_param({64});
        m.head_w2 = linear_init({64, 2});
        m.head_b2 = zeros_param({2});

        if (!cfg.use_prior_gate) {
            for (PriorGateParams* g : {&m.gate1, &m.gate2}) {
                std::fill(g->w_g.data().begin(), g->w_g.data().end(), 0.0);
                std::fill(g->b_g.data().begin(), g->b_g.data().end(), -40.0);
            }
        }
        return m;
    }

    std::vector<NamedParam> named_params() const {
        std::vector<NamedParam> ps;
        auto add = [&ps](const std::string& name, const Tensor& t, bool decay, bool trainable) {
            ps.push_back({name, t, decay, trainable});
        };
        // Attention logits and biases are excluded from weight decay.
        add("mask.chan_logits", mask.chan_logits, false, cfg.use_channel_band_mask);
        add("mask.band_logits", mask.band_logits, false, cfg.use_channel_band_mask);
        add("lstm.w_x_fwd", lstm.w_x_fwd, true, true);
        add("lstm.w_h_fwd", lstm.w_h_fwd, true, true);
        add("lstm.b_fwd", lstm.b_fwd, false, true);
        add("lstm.w_x_bwd", lstm.w_x_bwd, true, true);
        add("lstm.w_h_bwd", lstm.w_h_bwd, true, true);
        add("lstm.b_bwd", lstm.b_bwd, false, true);
        add("pos_lift.w", pos_lift_w, true, true);
        add("pos_lift.b", pos_lift_b, false, true);
        add("edge_mask.logits", edge_mask.logits, true, cfg.learnable_adjacency);
        add("vc.w_p", vc.w_p, true, true);
        add("vc.q", vc.q, true, true);
        for (std::size_t h = 0; h < attn.heads.size(); ++h) {
            const std::string base = "attn.head" + std::to_string(h);
            add(base + ".q_w", attn.heads[h].q_w, true, true);
            add(base + ".k_w", attn.heads[h].k_w, true, true);
            add(base + ".v_w", attn.heads[h].v_w, true, true);
        }
        add("attn.out_w", attn.out_w, true, true);
        add("attn.out_b", attn.out_b, false, true);
        add("gcn1.w", gcn1_w, true, true);
        add("gcn2.w", gcn2_w, true, true);
        add("prior_lift.w", prior_lift_w, true, true);
        add("prior_lift.b", prior_lift_b, false, true);
        add("gate1.w_g", gate1.w_g, true, cfg.use_prior_gate);
        add("gate1.b_g", gate1.b_g, false, cfg.use_prior_gate);
        add("gate2.w_g", gate2.w_g, true, cfg.use_prior_gate);
        add("gate2.b_g", gate2.b_g, false, cfg.use_prior_gate);
        add("head.w1", head_w1, true, true);
        add("head.b1", head_b1, false, true);
        add("head.w2", head_w2, true, true);
        add("head.b2", head_b2, false, true);
        return ps;
    }
};

// ---------------------------------------------------------------------------
// Per-subject constants
// ---------------------------------------------------------------------------

/// Everything about a subject's montage and recording that the forward pass
/// treats as fixed input: seed graph, priors, selection matrices.
struct SubjectContext {
    std::size_t n_channels = 0;
    std::size_t n_groups = 0;
    SeedAdjacency seed;
    Tensor pos_embed;            // {N, 24}
    Tensor dist_and_virtual;     // {M, M}: padded distance prior + virtual edges
    Tensor raw_prior;            // {M, 35}
    std::vector<Tensor> group_select;  // per group: {|G_k|, N} one-hot rows
    std::vector<std::vector<std::size_t>> group_members;
};

inline SubjectContext build_subject_context(const Recording& rec, const Parcellation& parc,
                                            const ModelConfig& cfg) {
    if (rec.coords.size() != rec.n_channels()) {
        throw DataError("subject context: recording lacks electrode coordinates");
    }
    if (parc.group_of.size() != rec.n_channels()) {
        throw DataError("subject context: parcellation covers " +
                        std::to_string(parc.group_of.size()) + " channels, recording has " +
                        std::to_string(rec.n_channels()));
    }
    parc.validate();

    SubjectContext ctx;
    ctx.n_channels = rec.n_channels();
    ctx.n_groups = parc.n_groups;
    ctx.seed = pearson_seed(rec);
    ctx.group_members = parc.members();

    const std::size_t N = ctx.n_channels;
    const std::size_t K = ctx.n_groups;
    const std::size_t M = N + K;

    ctx.pos_embed = Tensor::from({N, kPosEmbedDim}, positional_embed(rec.coords));

    DistancePrior dist = distance_prior(rec.coords);
    std::vector<double> dv(M * M, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) dv[i * M + j] = dist.at(i, j);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t ch : ctx.group_members[k]) {
            dv[ch * M + (N + k)] = 1.0;
            dv[(N + k) * M + ch] = 1.0;
        }
    }
    ctx.dist_and_virtual = Tensor::from({M, M}, std::move(dv));

    // Raw prior rows: [group one-hot | positional embedding | distance row
    // mean, distance row max]. Virtual nodes carry their group's one-hot, the
    // member-centroid embedding, and member-averaged distance stats.
    const auto unit = rescale_unit_cube(rec.coords);
    constexpr double pi = 3.14159265358979323846;
    auto embed_unit = [&](const std::array<double, 3>& p, double* out) {
        std::size_t col = 0;
        for (std::size_t f = 0; f < kPosFrequencies; ++f) {
            const double scale = static_cast<double>(std::size_t{1} << f) * pi;
            for (int a = 0; a < 3; ++a) out[col++] = std::sin(scale * p[a]);
            for (int a = 0; a < 3; ++a) out[col++] = std::cos(scale * p[a]);
        }
    };
    std::vector<double> dist_mean(N, 0.0), dist_max(N, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        double s = 0.0, mx = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
            s += dist.at(i, j);
            mx = std::max(mx, dist.at(i, j));
        }
        dist_mean[i] = s / static_cast<double>(N);
        dist_max[i] = mx;
    }
    std::vector<double> raw(M * kPriorRawDim, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        double* row = raw.data() + i * kPriorRawDim;
        row[parc.group_of[i]] = 1.0;
        embed_unit(unit[i], row + 9);
        row[9 + kPosEmbedDim] = dist_mean[i];
        row[9 + kPosEmbedDim + 1] = dist_max[i];
    }
    for (std::size_t k = 0; k < K; ++k) {
        double* row = raw.data() + (N + k) * kPriorRawDim;
        row[k] = 1.0;
        std::array<double, 3> centroid{0.0, 0.0, 0.0};
        double mean_stat = 0.0, max_stat = 0.0;
        const auto& members = ctx.group_members[k];
        for (std::size_t ch : members) {
            for (int a = 0; a < 3; ++a) centroid[a] += unit[ch][a];
            mean_stat += dist_mean[ch];
            max_stat += dist_max[ch];
        }
        const double inv = 1.0 / static_cast<double>(members.size());
        for (int a = 0; a < 3; ++a) centroid[a] *= inv;
        embed_unit(centroid, row + 9);
        row[9 + kPosEmbedDim] = mean_stat * inv;
        row[9 + kPosEmbedDim + 1] = max_stat * inv;
    }
    ctx.raw_prior = Tensor::from({M, kPriorRawDim}, std::move(raw));

    for (std::size_t k = 0; k < K; ++k) {
        const auto& members = ctx.group_members[k];
        std::vector<double> sel(members.size() * N, 0.0);
        for (std::size_t r = 0; r < members.size(); ++r) sel[r * N + members[r]] = 1.0;
        ctx.group_select.push_back(Tensor::from({members.size(), N}, std::move(sel)));
    }
    (void)cfg;
    return ctx;
}

// ---------------------------------------------------------------------------
// Network blocks
// ---------------------------------------------------------------------------

/// Attention-pooled virtual node per group, appended below the channel rows.
inline Tensor virtual_pool(const Tensor& x_node, const SubjectContext& ctx,
                           const VirtualCenterParams& p) {
    std::vector<Tensor> rows;
    rows.reserve(ctx.n_groups + 1);
    rows.push_back(x_node);
    Tensor q_col = reshape(p.q, {p.q.size(), 1});
    for (std::size_t k = 0; k < ctx.n_groups; ++k) {
        Tensor members = matmul(ctx.group_select[k], x_node);          // {g, C}
        Tensor scores = matmul(tanh(matmul(members, p.w_p)), q_col);   // {g, 1}
        Tensor weights = softmax(scores, 0);
        rows.push_back(matmul(transpose(weights), members));           // {1, C}
    }
    return concat(rows, 0);  // {M, C}
}

struct AttentionResult {
    Tensor a_glob;         // {M, M} dense head-averaged attention
    Tensor a_glob_sparse;  // {M, M} after per-row top-k
    Tensor h_out;          // {M, C}
};

/// Six-head scaled dot-product attention building a global adjacency; only
/// the strongest keep_frac of each row survives.
inline AttentionResult global_attention(const Tensor& h, const GlobalAttentionParams& p,
                                        double keep_frac) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.heads[0].q_w.dim(1)));
    std::vector<Tensor> head_outs;
    Tensor a_sum;
    bool first = true;
    for (const auto& head : p.heads) {
        Tensor q = matmul(h, head.q_w);
        Tensor k = matmul(h, head.k_w);
        Tensor v = matmul(h, head.v_w);
        Tensor a = softmax(mul_scalar(matmul(q, transpose(k)), scale), 1);
        head_outs.push_back(matmul(a, v));
        a_sum = first ? a : add(a_sum, a);
        first = false;
    }
    AttentionResult out;
    out.a_glob = mul_scalar(a_sum, 1.0 / static_cast<double>(p.heads.size()));
    out.a_glob_sparse = topk_sparsify(out.a_glob, keep_frac);
    out.h_out = add(matmul(concat(head_outs, 1), p.out_w), p.out_b);
    return out;
}

/// One spectral propagation step: relu(L H W).
inline Tensor gcn_layer(const Tensor& h, const Tensor& l_tilde, const Tensor& w) {
    return relu(matmul(matmul(l_tilde, h), w));
}

/// Gated residual injection of prior features: H + sigmoid(P W_g + b_g) * P.
inline Tensor prior_gate(const Tensor& h_data, const Tensor& p, const PriorGateParams& g) {
    if (p.shape() != h_data.shape()) {
        throw DimensionError("prior_gate: prior " + shape_str(p.shape()) + " vs data " +
                             shape_str(h_data.shape()));
    }
    Tensor gate = sigmoid(add(matmul(p, g.w_g), g.b_g));
    return add(h_data, mul(gate, p));
}

/// Lifted prior feature matrix P (depends only on montage and lift weights).
inline Tensor build_prior_matrix(const SubjectContext& ctx, const Tensor& lift_w,
                                 const Tensor& lift_b) {
    return add(matmul(ctx.raw_prior, lift_w), lift_b);
}

/// Coordinate-wise max over node rows, then affine-ReLU-affine to 2 logits.
inline Tensor classify(const Tensor& h_final, const Model& m) {
    Tensor pooled = h_final;
    if (!m.cfg.virtual_in_maxpool) {
        pooled = slice(h_final, 0, 0, m.cfg.n_channels);
    }
    Tensor features = reshape(max(pooled, 0), {1, m.cfg.node_dim});
    Tensor hidden = relu(add(matmul(features, m.head_w1), m.head_b1));
    return reshape(add(matmul(hidden, m.head_w2), m.head_b2), {2});
}

namespace detail {

inline Tensor pad_square(const Tensor& a, std::size_t m) {
    const std::size_t n = a.dim(0);
    if (n == m) return a;
    Tensor top = concat({a, Tensor::zeros({n, m - n})}, 1);
    return concat({top, Tensor::zeros({m - n, m})}, 0);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

/// Runs the whole network on the window range [t_begin, t_end) of one
/// subject's features and returns the 2 class logits.
inline Tensor forward_full(const Model& m, const SubjectContext& ctx, const DeTensor& de,
                           const MiTensor& mi, std::size_t t_begin, std::size_t t_end) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t N = cfg.n_channels;
    const std::size_t B = cfg.n_bands;
    const std::size_t P = cfg.mi_pairs();
    if (de.n_channels != N || de.n_bands != B || mi.n_pairs != P) {
        throw DimensionError("forward_full: feature tensors do not match the model config");
    }
    if (t_begin >= t_end || t_end > de.n_windows) {
        throw ContractError("forward_full: bad window range");
    }

    // Channel-band attention over DE, MI concatenated unmasked.
    Tensor mask;
    if (cfg.use_channel_band_mask) mask = m.mask.mask();
    std::vector<Tensor> steps;
    steps.reserve(t_end - t_begin);
    for (std::size_t t = t_begin; t < t_end; ++t) {
        std::vector<double> de_row(de.values.begin() + static_cast<std::ptrdiff_t>((t * N) * B),
                                   de.values.begin() +
                                       static_cast<std::ptrdiff_t>((t * N + N) * B));
        Tensor de_t = Tensor::from({N, B}, std::move(de_row));
        if (cfg.use_channel_band_mask) de_t = apply_mask(de_t, mask);
        Tensor mi_t;
        if (cfg.use_mi_features) {
            std::vector<double> mi_row(
                mi.values.begin() + static_cast<std::ptrdiff_t>((t * N) * P),
                mi.values.begin() + static_cast<std::ptrdiff_t>((t * N + N) * P));
            mi_t = Tensor::from({N, P}, std::move(mi_row));
        } else {
            mi_t = Tensor::zeros({N, P});
        }
        steps.push_back(concat({de_t, mi_t}, 1));
    }

    // Temporal encoding plus positional lift.
    Tensor x_node = bilstm_encode(steps, m.lstm, cfg.seq_aggregate);
    x_node = add(x_node, add(matmul(ctx.pos_embed, m.pos_lift_w), m.pos_lift_b));

    // Mesoscopic virtual centers and global attention.
    Tensor h = virtual_pool(x_node, ctx, m.vc);
    AttentionResult attn = global_attention(h, m.attn, cfg.keep_frac);

    // Mixed propagation operator over one normalization.
    Tensor masked_adj = apply_edge_mask(ctx.seed, m.edge_mask);
    Tensor s = add(add(detail::pad_square(masked_adj, cfg.n_nodes_total()),
                       ctx.dist_and_virtual),
                   attn.a_glob_sparse);
    NormalizedOperator op = normalize_operator(s);

    // Two spectral layers, each followed by a gated prior injection.
    Tensor h1 = gcn_layer(attn.h_out, op.l_tilde, m.gcn1_w);
    if (cfg.use_prior_gate) {
        Tensor prior = build_prior_matrix(ctx, m.prior_lift_w, m.prior_lift_b);
        h1 = prior_gate(h1, prior, m.gate1);
        Tensor h2 = gcn_layer(h1, op.l_tilde, m.gcn2_w);
        h2 = prior_gate(h2, prior, m.gate2);
        return classify(h2, m);
    }
    Tensor h2 = gcn_layer(h1, op.l_tilde, m.gcn2_w);
    return classify(h2, m);
}

// ---------------------------------------------------------------------------
// FLOP bookkeeping
// ---------------------------------------------------------------------------

struct FlopsReport {
    std::uint64_t attention = 0;  // N^2 d
    std::uint64_t gcn = 0;        // keep_frac N^2 d
};

inline FlopsReport flops_report(std::uint64_t n_nodes, std::uint64_t feature_dim,
                                double keep_frac) {
    if (n_nodes == 0 || feature_dim == 0 || keep_frac <= 0.0) {
        throw ConfigError("flops_report: inputs must be positive");
    }
    FlopsReport r;
    r.attention = n_nodes * n_nodes * feature_dim;
    r.gcn = static_cast<std::uint64_t>(
        std::llround(keep_frac * static_cast<double>(r.attention)));
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: binary tensor dumps plus a text manifest of names and shapes.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const Model& m, const std::string& bin_path,
                            const std::string& manifest_path) {
    std::ofstream bin(bin_path, std::ios::binary);
    std::ofstream man(manifest_path);
    if (!bin || !man) throw DataError("checkpoint: cannot open " + bin_path + " for writing");
    for (const NamedParam& p : m.named_params()) {
        write_tensor(bin, p.tensor);
        man << p.name;
        for (std::size_t d = 0; d < p.tensor.ndim(); ++d) man << ' ' << p.tensor.dim(d);
        man << '\n';
    }
}

inline void load_checkpoint(Model& m, const std::string& bin_path,
                            const std::string& manifest_path) {
    std::ifstream bin(bin_path, std::ios::binary);
    std::ifstream man(manifest_path);
    if (!bin || !man) throw DataError("checkpoint: cannot open " + bin_path);
    for (NamedParam& p : m.named_params()) {
        std::string line;
        if (!std::getline(man, line)) throw DataError("checkpoint: manifest too short");
        std::istringstream ls(line);
        std::string name;
        ls >> name;
        if (name != p.name) {
            throw DataError("checkpoint: expected parameter " + p.name + ", manifest has " +
                            name);
        }
        Tensor t = read_tensor(bin);
        if (t.shape() != p.tensor.shape()) {
            throw DataError("checkpoint: shape mismatch for " + p.name);
        }
        p.tensor.data() = t.data();
    }
}

/// In-memory snapshot for early-stopping rollbacks.
inline std::vector<std::vector<double>> snapshot_params(const Model& m) {
    std::vector<std::vector<double>> snap;
    for (const NamedParam& p : m.named_params()) snap.push_back(p.tensor.data());
    return snap;
}

inline void restore_params(Model& m, const std::vector<std::vector<double>>& snap) {
    auto ps = m.named_params();
    if (snap.size() != ps.size()) throw ContractError("restore_params: snapshot mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i].tensor.data() = snap[i];
}

}  // namespace elpg
