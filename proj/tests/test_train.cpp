#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "elpg/rng.hpp"
#include "elpg/train.hpp"

using namespace elpg;

namespace {

// Hand-built subjects with class-separated DE features; bypasses the signal
// pipeline so harness behavior is tested in isolation.
std::vector<SubjectData> toy_subjects(std::size_t n_per_class, std::size_t n_channels,
                                      std::size_t T, double gap, std::uint64_t seed,
                                      const ModelConfig& cfg) {
    Rng rng(seed);
    // one montage shared by the whole cohort, as real recordings would be
    std::vector<std::array<double, 3>> coords(n_channels);
    for (auto& c : coords)
        c = {rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(0, 80)};
    std::vector<SubjectData> subjects;
    for (std::size_t i = 0; i < 2 * n_per_class; ++i) {
        const int label = i < n_per_class ? 0 : 1;
        SubjectData s;
        s.id = "t" + std::to_string(i);
        s.label = label;

        Recording rec;
        rec.fs = 250.0;
        rec.channels.resize(n_channels);
        for (auto& ch : rec.channels) {
            ch.resize(600);
            for (double& v : ch) v = rng.normal();
        }
        rec.coords = coords;
        s.ctx = build_subject_context(rec, Parcellation::contiguous_blocks(n_channels, cfg.n_groups),
                                      cfg);

        s.de.n_windows = T;
        s.de.n_channels = n_channels;
        s.de.n_bands = cfg.n_bands;
        s.de.values.resize(T * n_channels * cfg.n_bands);
        for (double& v : s.de.values) v = rng.normal() + (label == 1 ? gap : 0.0);
        s.mi.n_windows = T;
        s.mi.n_channels = n_channels;
        s.mi.n_pairs = cfg.mi_pairs();
        s.mi.values.resize(T * n_channels * s.mi.n_pairs);
        for (double& v : s.mi.values) v = std::abs(rng.normal()) * 0.1;
        subjects.push_back(std::move(s));
    }
    return subjects;
}

ModelConfig tiny_model_config(std::size_t n_channels) {
    ModelConfig cfg;
    cfg.n_channels = n_channels;
    cfg.lstm_hidden = 8;
    cfg.node_dim = 16;
    return cfg;
}

}  // namespace

TEST_CASE("cross-entropy closed forms") {
    REQUIRE(cross_entropy(Tensor::from({2}, {0.0, 0.0}), 0).item() ==
            Catch::Approx(std::log(2.0)).margin(1e-12));
    REQUIRE(cross_entropy(Tensor::from({2}, {0.0, 0.0}), 1).item() ==
            Catch::Approx(std::log(2.0)).margin(1e-12));
    REQUIRE(cross_entropy(Tensor::from({2}, {20.0, -20.0}), 0).item() <= 1e-8);
    REQUIRE_THROWS_AS(cross_entropy(Tensor::from({2}, {0.0, 0.0}), 2), ContractError);
}

TEST_CASE("loss reduces to cross-entropy when the KL term is off") {
    ModelConfig cfg = tiny_model_config(9);
    Model m = Model::init(cfg, 1);
    Tensor logits = Tensor::from({2}, {0.4, -0.2});
    SECTION("beta zero") {
        REQUIRE(training_loss(logits, 0, m, {0.2, 0.0}).item() ==
                cross_entropy(logits, 0).item());
    }
    SECTION("mask ablated") {
        ModelConfig no_mask = cfg;
        no_mask.use_channel_band_mask = false;
        Model m2 = Model::init(no_mask, 1);
        REQUIRE(training_loss(logits, 1, m2, {0.2, 1e-3}).item() ==
                cross_entropy(logits, 1).item());
    }
    SECTION("beta positive adds a positive penalty") {
        // fresh mask sits at 0.25 everywhere, away from p0=0.2
        REQUIRE(training_loss(logits, 0, m, {0.2, 1e-3}).item() >
                cross_entropy(logits, 0).item());
    }
}

TEST_CASE("early stopper follows the patience traces") {
    SECTION("ten flat epochs after the best stop at epoch 12") {
        EarlyStopper stopper(10);
        REQUIRE_FALSE(stopper.observe(1.0));
        REQUIRE_FALSE(stopper.observe(0.9));
        for (int e = 3; e <= 11; ++e) REQUIRE_FALSE(stopper.observe(0.91));
        REQUIRE(stopper.observe(0.91));  // epoch 12
        REQUIRE(stopper.best_epoch() == 2);
    }
    SECTION("patience one with rising loss stops after epoch 2") {
        EarlyStopper stopper(1);
        REQUIRE_FALSE(stopper.observe(1.0));
        REQUIRE(stopper.observe(1.1));
        REQUIRE(stopper.best_epoch() == 1);
    }
}

TEST_CASE("fold plans partition subjects and stay stratified") {
    std::vector<SubjectLabel> subjects;
    for (int i = 0; i < 40; ++i) {
        subjects.push_back({"s" + std::to_string(i), i < 20 ? 0 : 1});
    }
    FoldPlan plan = make_fold_plan(subjects, 5, 123);
    REQUIRE(plan.folds.size() == 5);

    std::set<std::string> seen;
    for (const auto& fold : plan.folds) {
        for (const auto& id : fold.test_ids) {
            REQUIRE(seen.insert(id).second);  // exactly one test fold each
        }
        // pairwise disjoint train/val/test
        std::set<std::string> train(fold.train_ids.begin(), fold.train_ids.end());
        std::set<std::string> val(fold.val_ids.begin(), fold.val_ids.end());
        for (const auto& id : fold.test_ids) {
            REQUIRE_FALSE(train.count(id));
            REQUIRE_FALSE(val.count(id));
        }
        for (const auto& id : fold.val_ids) REQUIRE_FALSE(train.count(id));
        REQUIRE(fold.train_ids.size() + fold.val_ids.size() + fold.test_ids.size() == 40);
        REQUIRE(!fold.val_ids.empty());
    }
    REQUIRE(seen.size() == 40);

    SECTION("a class smaller than k fails stratification") {
        std::vector<SubjectLabel> skew;
        for (int i = 0; i < 20; ++i) skew.push_back({"a" + std::to_string(i), 0});
        skew.push_back({"b0", 1});
        skew.push_back({"b1", 1});
        REQUIRE_THROWS_MATCHES(make_fold_plan(skew, 5, 1), ConfigError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("one class")));
    }
    SECTION("fewer subjects than folds") {
        std::vector<SubjectLabel> few = {{"a", 0}, {"b", 1}, {"c", 0}};
        REQUIRE_THROWS_AS(make_fold_plan(few, 5, 1), ConfigError);
    }
    SECTION("single class") {
        std::vector<SubjectLabel> mono;
        for (int i = 0; i < 12; ++i) mono.push_back({"m" + std::to_string(i), 0});
        REQUIRE_THROWS_AS(make_fold_plan(mono, 3, 1), ConfigError);
    }
}

TEST_CASE("metric closed forms and conventions") {
    SECTION("perfect predictions") {
        MetricsEntry m = compute_metrics({1, 0, 1, 0}, {1, 0, 1, 0});
        REQUIRE(m.accuracy == 1.0);
        REQUIRE(m.precision == 1.0);
        REQUIRE(m.recall == 1.0);
        REQUIRE(m.f1 == 1.0);
    }
    SECTION("hand confusion matrix: TP=3 FP=1 FN=1 TN=5") {
        std::vector<int> labels = {1, 1, 1, 0, 1, 0, 0, 0, 0, 0};
        std::vector<int> preds = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
        MetricsEntry m = compute_metrics(preds, labels);
        REQUIRE(m.accuracy == Catch::Approx(0.8));
        REQUIRE(m.precision == Catch::Approx(0.75));
        REQUIRE(m.recall == Catch::Approx(0.75));
        REQUIRE(m.f1 == Catch::Approx(0.75));
    }
    SECTION("no positive predictions with positives present") {
        MetricsEntry m = compute_metrics({0, 0, 0, 0}, {1, 1, 0, 0});
        REQUIRE(m.precision == 0.0);
        REQUIRE(m.recall == 0.0);
        REQUIRE(m.f1 == 0.0);
        REQUIRE(m.accuracy == 0.5);
    }
    SECTION("length mismatch") {
        REQUIRE_THROWS_AS(compute_metrics({1}, {1, 0}), ContractError);
    }
    SECTION("f1 harmonic identity on random confusion matrices") {
        Rng rng(9);
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<int> preds, labels;
            const std::size_t n = 2 + rng.below(30);
            for (std::size_t i = 0; i < n; ++i) {
                preds.push_back(static_cast<int>(rng.below(2)));
                labels.push_back(static_cast<int>(rng.below(2)));
            }
            MetricsEntry m = compute_metrics(preds, labels);
            if (m.precision + m.recall > 0) {
                REQUIRE(m.f1 == Catch::Approx(2 * m.precision * m.recall /
                                              (m.precision + m.recall)).margin(1e-12));
            } else {
                REQUIRE(m.f1 == 0.0);
            }
            REQUIRE((m.accuracy >= 0 && m.accuracy <= 1));
        }
    }
    SECTION("reported mean is the arithmetic mean of folds") {
        Rng rng(10);
        std::vector<MetricsEntry> folds;
        double acc_sum = 0;
        for (int f = 0; f < 7; ++f) {
            MetricsEntry e{rng.uniform01(), rng.uniform01(), rng.uniform01(), rng.uniform01()};
            acc_sum += e.accuracy;
            folds.push_back(e);
        }
        REQUIRE(metrics_mean(folds).accuracy == Catch::Approx(acc_sum / 7.0).margin(1e-12));
    }
}

TEST_CASE("exact Wilcoxon signed-rank") {
    SECTION("all-zero differences degenerate") {
        std::vector<double> a = {1, 2, 3, 4, 5, 6};
        REQUIRE_THROWS_AS(wilcoxon_signed_rank(a, a), DomainError);
    }
    SECTION("ten positive differences give 2/1024") {
        std::vector<double> a, b;
        for (int i = 1; i <= 10; ++i) {
            a.push_back(static_cast<double>(i) + 0.5 + 0.01 * i);
            b.push_back(static_cast<double>(i) * 0.5);
        }
        REQUIRE(wilcoxon_signed_rank(a, b) == Catch::Approx(2.0 / 1024.0).margin(1e-12));
    }
    SECTION("antisymmetry") {
        Rng rng(11);
        std::vector<double> a(8), b(8);
        for (std::size_t i = 0; i < 8; ++i) {
            a[i] = rng.normal();
            b[i] = rng.normal();
        }
        REQUIRE(wilcoxon_signed_rank(a, b) == wilcoxon_signed_rank(b, a));
    }
    SECTION("p-values live in (0, 1]") {
        Rng rng(12);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> a(10), b(10);
            for (std::size_t i = 0; i < 10; ++i) {
                a[i] = rng.normal();
                b[i] = rng.normal();
            }
            const double p = wilcoxon_signed_rank(a, b);
            REQUIRE(p > 0.0);
            REQUIRE(p <= 1.0);
        }
    }
    SECTION("null calibration: rejection rate near alpha") {
        Rng rng(13);
        int rejections = 0;
        const int sims = 2000;
        for (int s = 0; s < sims; ++s) {
            std::vector<double> a(10), b(10);
            for (std::size_t i = 0; i < 10; ++i) {
                a[i] = rng.normal();
                b[i] = rng.normal();
            }
            if (wilcoxon_signed_rank(a, b) <= 0.05) ++rejections;
        }
        const double rate = static_cast<double>(rejections) / sims;
        REQUIRE(rate >= 0.03);
        REQUIRE(rate <= 0.07);
    }
    SECTION("too few nonzero differences") {
        std::vector<double> a = {1, 2, 3, 4}, b = {0, 0, 0, 0};
        REQUIRE_THROWS_AS(wilcoxon_signed_rank(a, b), DomainError);
    }
    SECTION("ties get midranks and still enumerate") {
        std::vector<double> a = {2, 2, 2, 3, 3, 1}, b = {1, 1, 1, 1, 1, 2};
        const double p = wilcoxon_signed_rank(a, b);
        REQUIRE(p > 0.0);
        REQUIRE(p <= 1.0);
    }
}

TEST_CASE("train_fold learns, is deterministic, and returns the best checkpoint") {
    ModelConfig mcfg = tiny_model_config(9);
    std::vector<SubjectData> subjects = toy_subjects(5, 9, 4, 3.0, 21, mcfg);

    FoldPlan::Fold fold;
    for (int i : {0, 1, 2, 6, 7, 8}) fold.train_ids.push_back(subjects[(std::size_t)i].id);
    fold.val_ids = {subjects[3].id, subjects[9].id};
    // evaluation subjects 4, 5 held out

    TrainConfig tcfg;
    tcfg.max_epochs = 12;
    tcfg.patience = 4;
    tcfg.batch_size = 8;
    tcfg.seed = 77;

    TrainedFold a = train_fold(subjects, fold, mcfg, tcfg);
    TrainedFold b = train_fold(subjects, fold, mcfg, tcfg);
    REQUIRE(a.history.val_loss == b.history.val_loss);
    REQUIRE(a.history.train_loss == b.history.train_loss);

    REQUIRE(a.history.epochs_run <= tcfg.max_epochs);
    REQUIRE(a.history.best_epoch >= 1);
    double best = 1e300;
    for (double v : a.history.val_loss) best = std::min(best, v);
    REQUIRE(a.history.val_loss[a.history.best_epoch - 1] == best);

    // the separable toy cohort trains to a lower loss than it started at
    REQUIRE(a.history.val_loss[a.history.best_epoch - 1] < a.history.val_loss.front());

    SECTION("empty splits are config errors") {
        FoldPlan::Fold empty;
        empty.val_ids = fold.val_ids;
        REQUIRE_THROWS_AS(train_fold(subjects, empty, mcfg, tcfg), ConfigError);
    }
}

TEST_CASE("cross-validation aggregates subject-level majority votes") {
    ModelConfig mcfg = tiny_model_config(9);
    std::vector<SubjectData> subjects = toy_subjects(8, 9, 10, 4.0, 31, mcfg);
    TrainConfig tcfg;
    tcfg.max_epochs = 30;
    tcfg.patience = 12;  // early epochs move slowly at this scale
    tcfg.batch_size = 16;
    tcfg.seed = 5;

    CrossValResult cv = cross_validate(subjects, mcfg, tcfg, 3);
    REQUIRE(cv.report.fold_subject.size() == 3);
    REQUIRE(cv.report.fold_window.size() == 3);
    REQUIRE(cv.histories.size() == 3);
    for (const auto& h : cv.histories) REQUIRE(!h.val_loss.empty());
    for (const auto& m : cv.report.fold_subject) {
        REQUIRE((m.accuracy >= 0.0 && m.accuracy <= 1.0));
        REQUIRE((m.f1 >= 0.0 && m.f1 <= 1.0));
    }
    // strong separation at toy scale should classify most held-out subjects
    REQUIRE(cv.report.mean.accuracy >= 0.75);

    SECTION("fold parallelism does not change the result") {
        CrossValResult cv2 = cross_validate(subjects, mcfg, tcfg, 3, 2);
        for (std::size_t f = 0; f < 3; ++f) {
            REQUIRE(cv2.report.fold_subject[f].accuracy ==
                    cv.report.fold_subject[f].accuracy);
            REQUIRE(cv2.histories[f].val_loss == cv.histories[f].val_loss);
        }
    }
}

TEST_CASE("ablation grid shares folds and seeds across variants") {
    ModelConfig mcfg = tiny_model_config(9);
    std::vector<SubjectData> subjects = toy_subjects(4, 9, 3, 4.0, 41, mcfg);
    TrainConfig tcfg;
    tcfg.max_epochs = 4;
    tcfg.patience = 2;
    tcfg.batch_size = 8;
    tcfg.seed = 9;

    auto specs = standard_ablations();
    REQUIRE(specs.size() == 5);
    REQUIRE(specs[0].name == "full");

    auto results = run_ablation(subjects, mcfg, tcfg, 2, specs, 1);
    REQUIRE(results.size() == 5);
    REQUIRE(results[0].variant == "full");
    for (const auto& r : results) {
        REQUIRE(r.report.fold_subject.size() == 2);
    }

    // the full row reproduces a plain cross_validate run on the same seeds
    CrossValResult cv = cross_validate(subjects, mcfg, tcfg, 2);
    REQUIRE(cv.report.mean.accuracy == results[0].report.mean.accuracy);

    std::ostringstream table, csv;
    write_results_table(table, results);
    write_results_csv(csv, results);
    REQUIRE(table.str().find("full") != std::string::npos);
    REQUIRE(table.str().find("no_attention_mi") != std::string::npos);
    REQUIRE(csv.str().find("variant,fold,acc") == 0);
    // 5 variants x (2 folds + mean + std) rows plus header
    std::size_t lines = 0;
    for (char c : csv.str()) lines += c == '\n';
    REQUIRE(lines == 1 + 5 * 4);
}

TEST_CASE("ablation wiring maps onto the config switches") {
    ModelConfig base = tiny_model_config(9);
    auto specs = standard_ablations();
    ModelConfig no_prior = specs[1].apply(base);
    REQUIRE_FALSE(no_prior.use_prior_gate);
    REQUIRE(no_prior.learnable_adjacency);
    ModelConfig no_adj = specs[2].apply(base);
    REQUIRE_FALSE(no_adj.learnable_adjacency);
    ModelConfig no_mi = specs[3].apply(base);
    REQUIRE_FALSE(no_mi.use_mi_features);
    REQUIRE(no_mi.use_channel_band_mask);
    ModelConfig no_attn = specs[4].apply(base);
    REQUIRE_FALSE(no_attn.use_mi_features);
    REQUIRE_FALSE(no_attn.use_channel_band_mask);
}
