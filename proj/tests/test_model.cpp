#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "elpg/gradcheck.hpp"
#include "elpg/model.hpp"
#include "elpg/rng.hpp"

using namespace elpg;

namespace {

// Small geometry shared by most cases: 9 channels, 9 singleton groups, C=16.
ModelConfig toy_config(std::size_t n_channels = 9, std::size_t n_groups = 9) {
    ModelConfig cfg;
    cfg.n_channels = n_channels;
    cfg.n_groups = n_groups;
    cfg.lstm_hidden = 8;
    cfg.node_dim = 16;
    cfg.n_heads = 6;
    return cfg;
}

Recording toy_recording(Rng& rng, std::size_t n_channels, std::size_t n_samples = 2000) {
    Recording rec;
    rec.fs = 250.0;
    rec.subject_id = "toy";
    rec.channels.resize(n_channels);
    for (auto& ch : rec.channels) {
        ch.resize(n_samples);
        for (double& v : ch) v = rng.normal();
    }
    rec.coords.resize(n_channels);
    for (auto& c : rec.coords)
        c = {rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(0, 80)};
    return rec;
}

struct ToyWorld {
    ModelConfig cfg;
    Model model;
    SubjectContext ctx;
    DeTensor de;
    MiTensor mi;
};

ToyWorld make_world(std::uint64_t seed, std::size_t n_channels = 9, std::size_t T = 5,
                    ModelConfig cfg_override = toy_config()) {
    Rng rng(seed);
    ToyWorld w{cfg_override, Model(), SubjectContext(), DeTensor(), MiTensor()};
    w.cfg.n_channels = n_channels;
    w.model = Model::init(w.cfg, seed);
    Recording rec = toy_recording(rng, n_channels);
    Parcellation parc = Parcellation::contiguous_blocks(n_channels, w.cfg.n_groups);
    w.ctx = build_subject_context(rec, parc, w.cfg);
    w.de.n_windows = T;
    w.de.n_channels = n_channels;
    w.de.n_bands = w.cfg.n_bands;
    w.de.values.resize(T * n_channels * w.cfg.n_bands);
    for (double& v : w.de.values) v = rng.normal();
    w.mi.n_windows = T;
    w.mi.n_channels = n_channels;
    w.mi.n_pairs = w.cfg.mi_pairs();
    w.mi.values.resize(T * n_channels * w.mi.n_pairs);
    for (double& v : w.mi.values) v = std::abs(rng.normal());
    return w;
}

}  // namespace

TEST_CASE("virtual pooling respects the convex hull of each group") {
    ToyWorld w = make_world(1, 12);
    Rng rng(2);
    std::vector<double> xv(12 * w.cfg.node_dim);
    for (double& v : xv) v = rng.normal();
    Tensor x = Tensor::from({12, w.cfg.node_dim}, xv);
    Tensor h = virtual_pool(x, w.ctx, w.model.vc);
    REQUIRE(h.shape() == Shape{12 + 9, w.cfg.node_dim});

    for (std::size_t k = 0; k < 9; ++k) {
        const auto& members = w.ctx.group_members[k];
        for (std::size_t c = 0; c < w.cfg.node_dim; ++c) {
            double lo = 1e300, hi = -1e300;
            for (std::size_t ch : members) {
                lo = std::min(lo, x.at(ch * w.cfg.node_dim + c));
                hi = std::max(hi, x.at(ch * w.cfg.node_dim + c));
            }
            const double v = h.at((12 + k) * w.cfg.node_dim + c);
            REQUIRE(v >= lo - 1e-12);
            REQUIRE(v <= hi + 1e-12);
        }
    }
}

TEST_CASE("a singleton group's virtual node copies its member") {
    // 9 channels over 9 groups: every group is a singleton
    ToyWorld w = make_world(3, 9);
    Rng rng(4);
    std::vector<double> xv(9 * w.cfg.node_dim);
    for (double& v : xv) v = rng.normal();
    Tensor x = Tensor::from({9, w.cfg.node_dim}, xv);
    Tensor h = virtual_pool(x, w.ctx, w.model.vc);
    for (std::size_t k = 0; k < 9; ++k) {
        const std::size_t ch = w.ctx.group_members[k][0];
        for (std::size_t c = 0; c < w.cfg.node_dim; ++c) {
            REQUIRE(h.at((9 + k) * w.cfg.node_dim + c) == x.at(ch * w.cfg.node_dim + c));
        }
    }
}

TEST_CASE("a group of identical rows pools to that row") {
    ToyWorld w = make_world(5, 18);
    Rng rng(6);
    std::vector<double> row(w.cfg.node_dim);
    for (double& v : row) v = rng.normal();
    std::vector<double> xv;
    for (std::size_t n = 0; n < 18; ++n) xv.insert(xv.end(), row.begin(), row.end());
    Tensor x = Tensor::from({18, w.cfg.node_dim}, xv);
    Tensor h = virtual_pool(x, w.ctx, w.model.vc);
    for (std::size_t k = 0; k < 9; ++k) {
        for (std::size_t c = 0; c < w.cfg.node_dim; ++c) {
            REQUIRE(h.at((18 + k) * w.cfg.node_dim + c) == Catch::Approx(row[c]).margin(1e-12));
        }
    }
}

TEST_CASE("global attention rows: uniform for equal features, sum to one, exact top-k") {
    ToyWorld w = make_world(7, 9);
    const std::size_t M = w.cfg.n_nodes_total();

    SECTION("identical node features give uniform attention") {
        Tensor h = Tensor::full({M, w.cfg.node_dim}, 0.37);
        AttentionResult res = global_attention(h, w.model.attn, w.cfg.keep_frac);
        for (std::size_t i = 0; i < M * M; ++i) {
            REQUIRE(res.a_glob.at(i) == Catch::Approx(1.0 / static_cast<double>(M)).margin(1e-12));
        }
    }
    SECTION("random features: stochastic rows and sparsity contract") {
        Rng rng(8);
        std::vector<double> hv(M * w.cfg.node_dim);
        for (double& v : hv) v = rng.normal();
        AttentionResult res =
            global_attention(Tensor::from({M, w.cfg.node_dim}, hv), w.model.attn, 0.25);
        const std::size_t expect = topk_keep_count(M, 0.25);
        for (std::size_t r = 0; r < M; ++r) {
            double s = 0.0;
            std::size_t nonzero = 0;
            for (std::size_t c = 0; c < M; ++c) {
                s += res.a_glob.at(r * M + c);
                if (res.a_glob_sparse.at(r * M + c) != 0.0) ++nonzero;
            }
            REQUIRE(s == Catch::Approx(1.0).margin(1e-10));
            REQUIRE(nonzero == expect);
        }
        REQUIRE(res.h_out.shape() == Shape{M, w.cfg.node_dim});
    }
}

TEST_CASE("gcn layer identity propagation and permutation equivariance") {
    SECTION("identity operator and weights pass nonnegative features through") {
        Tensor h = Tensor::from({3, 3}, {1, 0, 2, 3, 4, 0, 0.5, 1, 7});
        std::vector<double> eye(9, 0.0);
        eye[0] = eye[4] = eye[8] = 1.0;
        Tensor l = Tensor::from({3, 3}, eye);
        Tensor out = gcn_layer(h, l, Tensor::from({3, 3}, eye));
        REQUIRE(out.data() == h.data());
    }
    SECTION("permutation equivariance on random graphs") {
        Rng rng(9);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t m = 6, c = 5;
            std::vector<double> hv(m * c), lv(m * m), wv(c * c);
            for (double& v : hv) v = rng.normal();
            for (double& v : lv) v = rng.uniform01();
            for (double& v : wv) v = rng.normal();
            std::vector<std::size_t> perm(m);
            for (std::size_t i = 0; i < m; ++i) perm[i] = i;
            rng.shuffle(perm);

            Tensor h = Tensor::from({m, c}, hv);
            Tensor l = Tensor::from({m, m}, lv);
            Tensor wt = Tensor::from({c, c}, wv);
            Tensor base = gcn_layer(h, l, wt);

            std::vector<double> ph(m * c), pl(m * m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < c; ++j) ph[i * c + j] = hv[perm[i] * c + j];
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j) pl[i * m + j] = lv[perm[i] * m + perm[j]];
            Tensor permuted = gcn_layer(Tensor::from({m, c}, ph), Tensor::from({m, m}, pl), wt);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    REQUIRE(std::abs(permuted.at(i * c + j) - base.at(perm[i] * c + j)) <= 1e-10);
                }
        }
    }
    SECTION("gradient check at toy scale") {
        Rng rng(10);
        const std::size_t m = 8, c = 4;
        std::vector<double> lv(m * m), hv(m * c), readout(m * c);
        for (double& v : lv) v = rng.uniform01();
        for (double& v : hv) v = rng.normal();
        for (double& v : readout) v = rng.normal();
        Tensor l = Tensor::from({m, m}, lv);
        Tensor h = Tensor::from({m, c}, hv);
        Tensor r = Tensor::from({m, c}, readout);
        auto f = [&](const Tensor& wt) { return sum(mul(gcn_layer(h, l, wt), r)); };
        REQUIRE(check_gradient(f, Tensor::from({c, c}, std::vector<double>(c * c, 0.3)), 1e-5,
                               1e-4)
                    .pass);
    }
}

TEST_CASE("prior gate closed forms") {
    const std::size_t m = 4, c = 3;
    Rng rng(11);
    std::vector<double> hv(m * c), pv(m * c);
    for (double& v : hv) v = rng.normal();
    for (double& v : pv) v = rng.normal();
    Tensor h = Tensor::from({m, c}, hv);
    Tensor p = Tensor::from({m, c}, pv);

    SECTION("zero gate weights and bias -4 add sigma(-4) of the prior") {
        PriorGateParams g{Tensor::from({c, c}, std::vector<double>(c * c, 0.0)),
                          Tensor::from({c}, std::vector<double>(c, -4.0))};
        Tensor out = prior_gate(h, p, g);
        const double s4 = 1.0 / (1.0 + std::exp(4.0));
        REQUIRE(s4 == Catch::Approx(0.017986).margin(1e-6));
        for (std::size_t i = 0; i < m * c; ++i) {
            REQUIRE(out.at(i) == Catch::Approx(hv[i] + s4 * pv[i]).margin(1e-12));
        }
    }
    SECTION("bias -40 closes the gate") {
        PriorGateParams g{Tensor::from({c, c}, std::vector<double>(c * c, 0.0)),
                          Tensor::from({c}, std::vector<double>(c, -40.0))};
        Tensor out = prior_gate(h, p, g);
        for (std::size_t i = 0; i < m * c; ++i) {
            REQUIRE(out.at(i) == Catch::Approx(hv[i]).margin(1e-10));
        }
    }
    SECTION("zero prior is exactly pass-through") {
        PriorGateParams g{Tensor::from({c, c}, std::vector<double>(c * c, 0.4)),
                          Tensor::from({c}, std::vector<double>(c, -4.0))};
        Tensor out = prior_gate(h, Tensor::zeros({m, c}), g);
        REQUIRE(out.data() == hv);
    }
}

TEST_CASE("raw prior matrix structure") {
    Rng rng(12);
    ModelConfig cfg = toy_config(12);
    Recording rec = toy_recording(rng, 12);
    rec.coords[3] = rec.coords[2];  // same point, same block group
    Parcellation parc = Parcellation::contiguous_blocks(12, 9);
    parc.group_of[3] = parc.group_of[2];
    parc.group_of[4] = 2;  // keep the group freed by channel 3 nonempty
    REQUIRE_THROWS_AS(build_subject_context(rec, parc, cfg), DataError);  // coincident coords

    rec.coords[3] = {rec.coords[2][0] + 5.0, rec.coords[2][1], rec.coords[2][2]};
    SubjectContext ctx = build_subject_context(rec, parc, cfg);

    // exactly one 1 among the first 9 raw features of every node
    const std::size_t M = 12 + 9;
    for (std::size_t i = 0; i < M; ++i) {
        std::size_t ones = 0;
        for (std::size_t gidx = 0; gidx < 9; ++gidx) {
            const double v = ctx.raw_prior.at(i * kPriorRawDim + gidx);
            REQUIRE((v == 0.0 || v == 1.0));
            if (v == 1.0) ++ones;
        }
        REQUIRE(ones == 1);
    }

    // montage-only dependence: rebuilding gives identical raw features
    SubjectContext again = build_subject_context(rec, parc, cfg);
    REQUIRE(again.raw_prior.data() == ctx.raw_prior.data());

    // identical coordinates and group would give identical rows; verify via
    // two channels in the same group placed at the same spot in a fresh montage
    Recording twin = toy_recording(rng, 12);
    twin.coords[5] = twin.coords[4];
    twin.coords[5][0] += 1e-9;  // distinct but nearly equal
    Parcellation p2 = Parcellation::contiguous_blocks(12, 9);
    p2.group_of[5] = p2.group_of[4];  // both already share block group 3
    SubjectContext c2 = build_subject_context(twin, p2, cfg);
    for (std::size_t k = 0; k < kPriorRawDim; ++k) {
        REQUIRE(c2.raw_prior.at(4 * kPriorRawDim + k) ==
                Catch::Approx(c2.raw_prior.at(5 * kPriorRawDim + k)).margin(1e-6));
    }
}

TEST_CASE("classifier head: max-pool idempotence and zero fixed point") {
    ToyWorld w = make_world(13, 9);
    const std::size_t M = w.cfg.n_nodes_total();
    Rng rng(14);
    std::vector<double> hv(M * w.cfg.node_dim);
    for (double& v : hv) v = rng.normal();

    Tensor logits = classify(Tensor::from({M, w.cfg.node_dim}, hv), w.model);
    REQUIRE(logits.shape() == Shape{2});

    // duplicating the coordinate-wise best rows cannot change the pool
    std::vector<double> hv2 = hv;
    for (std::size_t c = 0; c < w.cfg.node_dim; ++c) {
        double best = -1e300;
        for (std::size_t r = 0; r < M; ++r) best = std::max(best, hv[r * w.cfg.node_dim + c]);
        hv2[0 * w.cfg.node_dim + c] = best;  // overwrite row 0 with the pooled row
    }
    Tensor logits2 = classify(Tensor::from({M, w.cfg.node_dim}, hv2), w.model);
    REQUIRE(logits2.data() == logits.data());

    // zero features and biases give (0,0) and an even softmax
    Model zero_model = w.model;
    std::fill(zero_model.head_w1.data().begin(), zero_model.head_w1.data().end(), 0.0);
    std::fill(zero_model.head_w2.data().begin(), zero_model.head_w2.data().end(), 0.0);
    Tensor z = classify(Tensor::zeros({M, w.cfg.node_dim}), zero_model);
    REQUIRE(z.data() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("forward_full contract: shape, determinism, node count") {
    ToyWorld w = make_world(15);
    Tensor logits = forward_full(w.model, w.ctx, w.de, w.mi, 0, w.de.n_windows);
    REQUIRE(logits.shape() == Shape{2});
    REQUIRE(std::isfinite(logits.at(0)));

    ToyWorld w2 = make_world(15);
    Tensor logits2 = forward_full(w2.model, w2.ctx, w2.de, w2.mi, 0, w2.de.n_windows);
    REQUIRE(logits.data() == logits2.data());

    // virtual node count is 9 regardless of N
    ToyWorld big = make_world(16, 14);
    REQUIRE(big.cfg.n_nodes_total() == 14 + 9);
    REQUIRE_THROWS_AS(forward_full(w.model, w.ctx, w.de, w.mi, 3, 3), ContractError);
}

TEST_CASE("full model is channel-permutation invariant at init") {
    const std::size_t N = 12, T = 3;
    Rng rng(17);
    ModelConfig cfg = toy_config(N);
    Model model = Model::init(cfg, 99);
    Recording rec = toy_recording(rng, N);
    Parcellation parc = Parcellation::contiguous_blocks(N, 9);

    DeTensor de;
    de.n_windows = T;
    de.n_channels = N;
    de.n_bands = 4;
    de.values.resize(T * N * 4);
    for (double& v : de.values) v = rng.normal();
    MiTensor mi;
    mi.n_windows = T;
    mi.n_channels = N;
    mi.n_pairs = 6;
    mi.values.resize(T * N * 6);
    for (double& v : mi.values) v = std::abs(rng.normal());

    SubjectContext ctx = build_subject_context(rec, parc, cfg);
    Tensor base = forward_full(model, ctx, de, mi, 0, T);

    std::vector<std::size_t> perm(N);
    for (std::size_t i = 0; i < N; ++i) perm[i] = i;
    rng.shuffle(perm);
    Recording prec = rec;
    Parcellation pparc = parc;
    DeTensor pde = de;
    MiTensor pmi = mi;
    for (std::size_t i = 0; i < N; ++i) {
        prec.channels[i] = rec.channels[perm[i]];
        prec.coords[i] = rec.coords[perm[i]];
        pparc.group_of[i] = parc.group_of[perm[i]];
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t b = 0; b < 4; ++b)
                pde.values[(t * N + i) * 4 + b] = de.values[(t * N + perm[i]) * 4 + b];
            for (std::size_t pr = 0; pr < 6; ++pr)
                pmi.values[(t * N + i) * 6 + pr] = mi.values[(t * N + perm[i]) * 6 + pr];
        }
    }
    SubjectContext pctx = build_subject_context(prec, pparc, cfg);
    Tensor permuted = forward_full(model, pctx, pde, pmi, 0, T);
    REQUIRE(std::abs(permuted.at(0) - base.at(0)) <= 1e-8);
    REQUIRE(std::abs(permuted.at(1) - base.at(1)) <= 1e-8);
}

TEST_CASE("closing the gates by bias equals the prior-ablated model") {
    ToyWorld full = make_world(18);
    for (PriorGateParams* g : {&full.model.gate1, &full.model.gate2}) {
        std::fill(g->b_g.data().begin(), g->b_g.data().end(), -40.0);
        std::fill(g->w_g.data().begin(), g->w_g.data().end(), 0.0);
    }
    ModelConfig ablated_cfg = full.cfg;
    ablated_cfg.use_prior_gate = false;
    ToyWorld ablated = make_world(18, 9, 5, ablated_cfg);

    Tensor a = forward_full(full.model, full.ctx, full.de, full.mi, 0, 5);
    Tensor b = forward_full(ablated.model, ablated.ctx, ablated.de, ablated.mi, 0, 5);
    REQUIRE(std::abs(a.at(0) - b.at(0)) <= 1e-8);
    REQUIRE(std::abs(a.at(1) - b.at(1)) <= 1e-8);
}

TEST_CASE("gate starts nearly closed on standardized inputs") {
    ToyWorld w = make_world(19, 16);
    const std::size_t M = w.cfg.n_nodes_total();
    Tensor p = build_prior_matrix(w.ctx, w.model.prior_lift_w, w.model.prior_lift_b);
    Tensor gate = sigmoid(add(matmul(p, w.model.gate1.w_g), w.model.gate1.b_g));
    double mean_act = 0.0;
    for (std::size_t i = 0; i < gate.size(); ++i) mean_act += gate.at(i);
    mean_act /= static_cast<double>(gate.size());
    REQUIRE(mean_act <= 0.02);

    Rng rng(20);
    std::vector<double> hv(M * w.cfg.node_dim);
    for (double& v : hv) v = rng.normal();
    double gp = 0.0, hn = 0.0;
    for (std::size_t i = 0; i < gate.size(); ++i) {
        gp += gate.at(i) * p.at(i) * gate.at(i) * p.at(i);
        hn += hv[i] * hv[i];
    }
    REQUIRE(std::sqrt(gp) / std::sqrt(hn) <= 0.05);
}

TEST_CASE("forward_full gradients match finite differences through key parameters") {
    ToyWorld w = make_world(21);
    Tensor target = Tensor::from({2}, {1.0, -1.0});
    auto readout = [&](const Model& model) {
        return sum(mul(forward_full(model, w.ctx, w.de, w.mi, 0, w.de.n_windows), target));
    };

    struct Case {
        const char* name;
        Tensor Model::* field;
    };
    auto check_field = [&](const char* name, Tensor current, auto rebind) {
        auto f = [&](const Tensor& t) {
            Model patched = w.model;
            rebind(patched, t);
            return readout(patched);
        };
        auto report = check_gradient(f, current, 1e-5, 1e-4, 16);
        INFO(name << " rel err " << report.max_rel_err);
        CHECK(report.pass);
    };

    check_field("gcn1.w", w.model.gcn1_w,
                [](Model& m, const Tensor& t) { m.gcn1_w = t; });
    check_field("edge_mask", w.model.edge_mask.logits,
                [](Model& m, const Tensor& t) { m.edge_mask.logits = t; });
    check_field("chan_logits", w.model.mask.chan_logits,
                [](Model& m, const Tensor& t) { m.mask.chan_logits = t; });
    check_field("gate1.w_g", w.model.gate1.w_g,
                [](Model& m, const Tensor& t) { m.gate1.w_g = t; });
    check_field("vc.q", w.model.vc.q, [](Model& m, const Tensor& t) { m.vc.q = t; });
    check_field("attn.head0.q_w", w.model.attn.heads[0].q_w,
                [](Model& m, const Tensor& t) { m.attn.heads[0].q_w = t; });
    check_field("head.w2", w.model.head_w2,
                [](Model& m, const Tensor& t) { m.head_w2 = t; });
    check_field("pos_lift.w", w.model.pos_lift_w,
                [](Model& m, const Tensor& t) { m.pos_lift_w = t; });
}

TEST_CASE("flop figures") {
    FlopsReport r = flops_report(128, 64, 0.25);
    REQUIRE(r.attention == 1048576);
    REQUIRE(r.gcn == 262144);

    FlopsReport tiny = flops_report(1, 64, 0.25);
    REQUIRE(tiny.attention == 64);
    REQUIRE(tiny.gcn == 16);

    REQUIRE_THROWS_AS(flops_report(0, 64, 0.25), ConfigError);
}

TEST_CASE("checkpoint save and load round trips bit-exactly") {
    ToyWorld w = make_world(22);
    const std::string bin = "ckpt_test.bin";
    const std::string man = "ckpt_test.txt";
    save_checkpoint(w.model, bin, man);

    Model other = Model::init(w.cfg, 777);  // different weights
    load_checkpoint(other, bin, man);
    auto a = w.model.named_params();
    auto b = other.named_params();
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].tensor.data() == b[i].tensor.data());
    }

    // identical bytes when re-saved
    save_checkpoint(other, "ckpt_test2.bin", "ckpt_test2.txt");
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    REQUIRE(slurp(bin) == slurp("ckpt_test2.bin"));
    REQUIRE(slurp(man) == slurp("ckpt_test2.txt"));
    std::remove(bin.c_str());
    std::remove(man.c_str());
    std::remove("ckpt_test2.bin");
    std::remove("ckpt_test2.txt");
}

TEST_CASE("ablation switches freeze the right parameters") {
    ModelConfig cfg = toy_config(9);
    cfg.learnable_adjacency = false;
    cfg.use_prior_gate = false;
    cfg.use_channel_band_mask = false;
    Model m = Model::init(cfg, 1);
    for (const NamedParam& p : m.named_params()) {
        if (p.name == "edge_mask.logits" || p.name.rfind("gate", 0) == 0 ||
            p.name.rfind("mask.", 0) == 0) {
            REQUIRE_FALSE(p.trainable);
        } else {
            REQUIRE(p.trainable);
        }
    }
    for (double v : m.gate1.b_g.data()) REQUIRE(v == -40.0);
    for (double v : m.gate2.w_g.data()) REQUIRE(v == 0.0);
}
