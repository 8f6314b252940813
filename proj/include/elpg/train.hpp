#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "elpg/adam.hpp"
#include "elpg/attention.hpp"
#include "elpg/data.hpp"
#include "elpg/error.hpp"
#include "elpg/model.hpp"
#include "elpg/tensor.hpp"

namespace elpg {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::size_t batch_size = 32;
    std::size_t patience = 10;
    std::size_t max_epochs = 80;
    std::uint64_t seed = 0;
    double kl_beta = 1e-3;
    double kl_p0 = 0.2;
    // Windows per training example; each example is a contiguous chunk of a
    // subject's windows. 1 means one epoch-level prediction per window.
    std::size_t windows_per_example = 1;

    void validate() const {
        if (patience < 1) throw ConfigError("train: patience must be at least 1");
        if (batch_size < 1) throw ConfigError("train: batch size must be at least 1");
        if (max_epochs < 1) throw ConfigError("train: need at least one epoch");
        if (windows_per_example < 1) throw ConfigError("train: need at least one window per example");
    }

    AdamConfig adam() const { return {lr, 0.9, 0.999, 1e-8, weight_decay}; }
    SparsityPrior prior() const { return {kl_p0, kl_beta}; }
};

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t x = base ^ (0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Softmax cross-entropy against the true class; scalar tensor.
inline Tensor cross_entropy(const Tensor& logits, int label) {
    if (label != 0 && label != 1) {
        throw ContractError("cross_entropy: label " + std::to_string(label) + " outside {0,1}");
    }
    return neg(slice(log_softmax(logits, 0), 0, static_cast<std::size_t>(label), 1));
}

/// Full training objective: cross-entropy plus the mask's KL sparsity
/// penalty (weight decay lives inside the optimizer step).
inline Tensor training_loss(const Tensor& logits, int label, const Model& m,
                            const SparsityPrior& prior) {
    Tensor ce = cross_entropy(logits, label);
    if (m.cfg.use_channel_band_mask && prior.beta != 0.0) {
        return add(ce, kl_sparsity(m.mask, prior));
    }
    return ce;
}

// ---------------------------------------------------------------------------
// Subject-wise stratified folds
// ---------------------------------------------------------------------------

struct SubjectLabel {
    std::string id;
    int label = 0;
};

struct FoldPlan {
    struct Fold {
        std::vector<std::string> train_ids;
        std::vector<std::string> val_ids;
        std::vector<std::string> test_ids;
    };
    std::size_t k = 10;
    std::vector<Fold> folds;
};

/// Stratified subject-wise k-fold: class lists are shuffled and dealt
/// round-robin, so every subject lands in exactly one test fold and the
/// class mix is preserved. Validation subjects are carved out of each
/// training split the same way.
inline FoldPlan make_fold_plan(const std::vector<SubjectLabel>& subjects, std::size_t k,
                               std::uint64_t seed, double val_fraction = 0.1) {
    if (k < 2) throw ConfigError("folds: need k >= 2");
    if (subjects.size() < k) {
        throw ConfigError("folds: " + std::to_string(subjects.size()) + " subjects cannot fill " +
                          std::to_string(k) + " folds");
    }
    std::vector<std::string> by_class[2];
    for (const auto& s : subjects) {
        if (s.label != 0 && s.label != 1) {
            throw DataError("folds: subject " + s.id + " has label outside {0,1}");
        }
        by_class[s.label].push_back(s.id);
    }
    if (by_class[0].empty() || by_class[1].empty()) {
        throw ConfigError("folds: both classes must be present");
    }
    Rng rng(derive_seed(seed, 0xf01d));
    rng.shuffle(by_class[0]);
    rng.shuffle(by_class[1]);

    FoldPlan plan;
    plan.k = k;
    plan.folds.resize(k);
    for (int c = 0; c < 2; ++c) {
        for (std::size_t i = 0; i < by_class[c].size(); ++i) {
            plan.folds[i % k].test_ids.push_back(by_class[c][i]);
        }
    }
    for (std::size_t f = 0; f < k; ++f) {
        bool has[2] = {false, false};
        std::map<std::string, int> label_of;
        for (const auto& s : subjects) label_of[s.id] = s.label;
        for (const auto& id : plan.folds[f].test_ids) has[label_of[id]] = true;
        if (!has[0] || !has[1]) {
            throw ConfigError("folds: stratification failed, test fold " + std::to_string(f) +
                              " has only one class");
        }
        // training pool = everything outside this test fold, then carve val
        std::vector<std::string> pool[2];
        for (const auto& s : subjects) {
            const bool in_test = std::find(plan.folds[f].test_ids.begin(),
                                           plan.folds[f].test_ids.end(),
                                           s.id) != plan.folds[f].test_ids.end();
            if (!in_test) pool[s.label].push_back(s.id);
        }
        const std::size_t n_train_pool = pool[0].size() + pool[1].size();
        const auto n_val = std::max<std::size_t>(
            1, static_cast<std::size_t>(val_fraction * static_cast<double>(n_train_pool)));
        if (n_val >= n_train_pool) {
            throw ConfigError("folds: validation split would empty the training set");
        }
        Rng vrng(derive_seed(seed, 0xa1 + f));
        vrng.shuffle(pool[0]);
        vrng.shuffle(pool[1]);
        std::size_t taken = 0;
        for (std::size_t i = 0; taken < n_val; ++i) {
            for (int c = 0; c < 2 && taken < n_val; ++c) {
                if (i < pool[c].size()) {
                    plan.folds[f].val_ids.push_back(pool[c][i]);
                    ++taken;
                }
            }
        }
        for (int c = 0; c < 2; ++c) {
            for (const auto& id : pool[c]) {
                if (std::find(plan.folds[f].val_ids.begin(), plan.folds[f].val_ids.end(), id) ==
                    plan.folds[f].val_ids.end()) {
                    plan.folds[f].train_ids.push_back(id);
                }
            }
        }
        if (plan.folds[f].train_ids.empty()) {
            throw ConfigError("folds: empty training split in fold " + std::to_string(f));
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsEntry {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Confusion-matrix metrics with the positive class = 1. Zero-division
/// convention: precision/recall are 0 when undefined, F1 is 0 when P+R = 0.
inline MetricsEntry compute_metrics(const std::vector<int>& preds,
                                    const std::vector<int>& labels) {
    if (preds.size() != labels.size() || preds.empty()) {
        throw ContractError("compute_metrics: need equal nonempty prediction/label lists");
    }
    double tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == 1 && labels[i] == 1) ++tp;
        else if (preds[i] == 1 && labels[i] == 0) ++fp;
        else if (preds[i] == 0 && labels[i] == 1) ++fn;
        else ++tn;
    }
    MetricsEntry m;
    m.accuracy = (tp + tn) / static_cast<double>(preds.size());
    m.precision = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
    m.recall = (tp + fn) > 0 ? tp / (tp + fn) : 0.0;
    m.f1 = (m.precision + m.recall) > 0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

inline MetricsEntry metrics_mean(const std::vector<MetricsEntry>& entries) {
    MetricsEntry m;
    for (const auto& e : entries) {
        m.accuracy += e.accuracy;
        m.precision += e.precision;
        m.recall += e.recall;
        m.f1 += e.f1;
    }
    const double n = static_cast<double>(entries.size());
    m.accuracy /= n;
    m.precision /= n;
    m.recall /= n;
    m.f1 /= n;
    return m;
}

/// Sample standard deviation (n-1); zero for fewer than two folds.
inline MetricsEntry metrics_std(const std::vector<MetricsEntry>& entries) {
    MetricsEntry sd;
    if (entries.size() < 2) return sd;
    const MetricsEntry mu = metrics_mean(entries);
    for (const auto& e : entries) {
        sd.accuracy += (e.accuracy - mu.accuracy) * (e.accuracy - mu.accuracy);
        sd.precision += (e.precision - mu.precision) * (e.precision - mu.precision);
        sd.recall += (e.recall - mu.recall) * (e.recall - mu.recall);
        sd.f1 += (e.f1 - mu.f1) * (e.f1 - mu.f1);
    }
    const double n1 = static_cast<double>(entries.size() - 1);
    sd.accuracy = std::sqrt(sd.accuracy / n1);
    sd.precision = std::sqrt(sd.precision / n1);
    sd.recall = std::sqrt(sd.recall / n1);
    sd.f1 = std::sqrt(sd.f1 / n1);
    return sd;
}

struct MetricsReport {
    std::vector<MetricsEntry> fold_subject;  // subject-level, one per fold
    std::vector<MetricsEntry> fold_window;   // window-level, secondary
    MetricsEntry mean;                       // over fold_subject
    MetricsEntry stddev;

    void finalize() {
        mean = metrics_mean(fold_subject);
        stddev = metrics_std(fold_subject);
    }
};

// ---------------------------------------------------------------------------
// Exact Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

/// Two-sided exact p-value by full enumeration of sign assignments (via the
/// rank-sum distribution). Ties get midranks; zero differences are dropped.
/// No normal approximation: fold counts are far too small for it.
inline double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ContractError("wilcoxon: unequal lengths");
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d != 0.0) diffs.push_back(d);
    }
    if (diffs.empty()) throw DomainError("wilcoxon: all differences are zero (degenerate test)");
    const std::size_t n = diffs.size();
    if (n < 5) {
        throw DomainError("wilcoxon: need at least 5 nonzero differences, have " +
                          std::to_string(n));
    }
    if (n > 25) throw ContractError("wilcoxon: exact enumeration limited to n <= 25");

    // midranks of |d|, doubled so ties stay integral
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return std::abs(diffs[x]) < std::abs(diffs[y]);
    });
    std::vector<std::size_t> rank2(n, 0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]])) ++j;
        const std::size_t doubled_midrank = (i + 1) + (j + 1);  // 2 * average rank
        for (std::size_t t = i; t <= j; ++t) rank2[order[t]] = doubled_midrank;
        i = j + 1;
    }

    std::size_t w2_obs = 0, w2_total = 0;
    for (std::size_t t = 0; t < n; ++t) {
        w2_total += rank2[t];
        if (diffs[t] > 0) w2_obs += rank2[t];
    }

    // distribution of the doubled rank sum over all 2^n assignments
    std::vector<double> dist(w2_total + 1, 0.0);
    dist[0] = 1.0;
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t s = dist.size(); s-- > rank2[t];) {
            dist[s] += dist[s - rank2[t]];
        }
    }
    const double total = std::pow(2.0, static_cast<double>(n));
    double below = 0.0, above = 0.0;
    for (std::size_t s = 0; s <= w2_total; ++s) {
        if (s <= w2_obs) below += dist[s];
        if (s >= w2_obs) above += dist[s];
    }
    return std::min(1.0, 2.0 * std::min(below, above) / total);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One subject's prepared inputs: graph context plus feature tensors.
struct SubjectData {
    std::string id;
    int label = 0;
    SubjectContext ctx;
    DeTensor de;
    MiTensor mi;
};

/// Patience-based stopping on the validation loss. Improvement means below
/// the best seen so far by at least min_delta; without the dead band a loss
/// flat at 1e-6 that shrinks by 1e-8 per epoch would never stop.
class EarlyStopper {
  public:
    explicit EarlyStopper(std::size_t patience, double min_delta = 1e-4)
        : patience_(patience), min_delta_(min_delta) {}

    /// Call once per epoch; true means stop after this epoch. The returned
    /// checkpoint tracks exact improvements, so it is never worse than any
    /// earlier epoch's best; only the patience counter uses the dead band.
    bool observe(double val_loss) {
        ++epoch_;
        improved_ = val_loss < best_;
        if (improved_) {
            best_ = val_loss;
            best_epoch_ = epoch_;
        }
        if (val_loss < patience_ref_ - min_delta_) {
            patience_ref_ = val_loss;
            streak_ = 0;
        } else {
            ++streak_;
        }
        return streak_ >= patience_;
    }

    bool improved_last() const { return improved_; }
    std::size_t best_epoch() const { return best_epoch_; }
    double best_loss() const { return best_; }

  private:
    std::size_t patience_;
    double min_delta_;
    std::size_t epoch_ = 0;
    std::size_t best_epoch_ = 0;
    std::size_t streak_ = 0;
    double best_ = 1e300;
    double patience_ref_ = 1e300;
    bool improved_ = false;
};

struct ExampleRef {
    std::size_t subject = 0;  // index into the SubjectData vector
    std::size_t t0 = 0, t1 = 0;
};

inline std::vector<ExampleRef> make_examples(const std::vector<SubjectData>& subjects,
                                             const std::vector<std::size_t>& subject_indices,
                                             std::size_t windows_per_example) {
    std::vector<ExampleRef> out;
    for (std::size_t idx : subject_indices) {
        const std::size_t T = subjects[idx].de.n_windows;
        for (std::size_t t0 = 0; t0 < T; t0 += windows_per_example) {
            out.push_back({idx, t0, std::min(T, t0 + windows_per_example)});
        }
    }
    return out;
}

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};

struct TrainedFold {
    Model model;
    TrainHistory history;
};

namespace detail {

inline std::vector<std::size_t> ids_to_indices(const std::vector<SubjectData>& subjects,
                                               const std::vector<std::string>& ids) {
    std::vector<std::size_t> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        bool found = false;
        for (std::size_t i = 0; i < subjects.size(); ++i) {
            if (subjects[i].id == id) {
                out.push_back(i);
                found = true;
                break;
            }
        }
        if (!found) throw DataError("fold references unknown subject " + id);
    }
    return out;
}

inline double mean_loss(const Model& model, const std::vector<SubjectData>& subjects,
                        const std::vector<ExampleRef>& examples, const SparsityPrior& prior) {
    double total = 0.0;
    for (const auto& ex : examples) {
        const SubjectData& s = subjects[ex.subject];
        Tensor logits = forward_full(model, s.ctx, s.de, s.mi, ex.t0, ex.t1);
        total += training_loss(logits, s.label, model, prior).item();
    }
    return total / static_cast<double>(examples.size());
}

}  // namespace detail

/// Mini-batch Adam with early stopping; returns the best-validation-loss
/// checkpoint and the loss history.
inline TrainedFold train_fold(const std::vector<SubjectData>& subjects,
                              const FoldPlan::Fold& fold, const ModelConfig& mcfg,
                              const TrainConfig& tcfg) {
    tcfg.validate();
    if (fold.train_ids.empty()) throw ConfigError("train_fold: empty training split");
    if (fold.val_ids.empty()) throw ConfigError("train_fold: empty validation split");

    const auto train_idx = detail::ids_to_indices(subjects, fold.train_ids);
    const auto val_idx = detail::ids_to_indices(subjects, fold.val_ids);
    std::vector<ExampleRef> train_ex =
        make_examples(subjects, train_idx, tcfg.windows_per_example);
    const std::vector<ExampleRef> val_ex =
        make_examples(subjects, val_idx, tcfg.windows_per_example);
    if (train_ex.empty() || val_ex.empty()) {
        throw ConfigError("train_fold: a split produced no examples");
    }

    TrainedFold out;
    out.model = Model::init(mcfg, derive_seed(tcfg.seed, 0x0de1));
    const SparsityPrior prior = tcfg.prior();
    const AdamConfig adam = tcfg.adam();

    std::vector<NamedParam> params;
    for (const NamedParam& p : out.model.named_params()) {
        if (p.trainable) params.push_back(p);
    }
    std::vector<AdamState> states;
    states.reserve(params.size());
    std::vector<Tensor> leaves;
    for (const NamedParam& p : params) {
        states.push_back(AdamState::for_param(p.tensor));
        leaves.push_back(p.tensor);
    }

    Rng shuffle_rng(derive_seed(tcfg.seed, 0x5f0f));
    EarlyStopper stopper(tcfg.patience);
    std::vector<std::vector<double>> best_snapshot;

    for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
        shuffle_rng.shuffle(train_ex);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < train_ex.size(); start += tcfg.batch_size) {
            const std::size_t stop = std::min(train_ex.size(), start + tcfg.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(stop - start);
            for (std::size_t e = start; e < stop; ++e) {
                const SubjectData& s = subjects[train_ex[e].subject];
                Tensor logits =
                    forward_full(out.model, s.ctx, s.de, s.mi, train_ex[e].t0, train_ex[e].t1);
                Tensor loss = training_loss(logits, s.label, out.model, prior);
                epoch_loss += loss.item();
                backward(loss, leaves, inv_batch);
            }
            for (std::size_t p = 0; p < params.size(); ++p) {
                adam_step(params[p].tensor, states[p], adam, params[p].decay);
            }
        }
        out.history.train_loss.push_back(epoch_loss / static_cast<double>(train_ex.size()));
        const double val = detail::mean_loss(out.model, subjects, val_ex, prior);
        out.history.val_loss.push_back(val);
        out.history.epochs_run = epoch;
        const bool stop = stopper.observe(val);
        if (stopper.improved_last()) best_snapshot = snapshot_params(out.model);
        if (stop) break;
    }
    out.history.best_epoch = stopper.best_epoch();
    if (!best_snapshot.empty()) restore_params(out.model, best_snapshot);
    return out;
}

// ---------------------------------------------------------------------------
// Prediction and cross-validation
// ---------------------------------------------------------------------------

inline int argmax2(const Tensor& logits) { return logits.at(1) > logits.at(0) ? 1 : 0; }

struct SubjectPrediction {
    int predicted = 0;
    std::vector<int> window_preds;
};

/// Majority vote over the subject's chunk predictions; ties go to the
/// positive class.
inline SubjectPrediction predict_subject(const Model& model, const SubjectData& s,
                                         std::size_t windows_per_example) {
    SubjectPrediction out;
    const std::size_t T = s.de.n_windows;
    std::size_t votes1 = 0;
    for (std::size_t t0 = 0; t0 < T; t0 += windows_per_example) {
        const std::size_t t1 = std::min(T, t0 + windows_per_example);
        Tensor logits = forward_full(model, s.ctx, s.de, s.mi, t0, t1);
        const int pred = argmax2(logits);
        out.window_preds.push_back(pred);
        votes1 += static_cast<std::size_t>(pred);
    }
    out.predicted = 2 * votes1 >= out.window_preds.size() ? 1 : 0;
    return out;
}

struct CrossValResult {
    FoldPlan plan;
    MetricsReport report;
    std::vector<TrainHistory> histories;
    std::vector<Model> models;  // best checkpoint per fold
};

/// Trains and evaluates every fold of an existing plan. Folds run
/// concurrently when jobs > 1; results are identical either way because
/// each fold is seeded and self-contained.
inline CrossValResult cross_validate_plan(const std::vector<SubjectData>& subjects,
                                          const FoldPlan& plan, const ModelConfig& mcfg,
                                          const TrainConfig& tcfg, std::size_t jobs = 1) {
    CrossValResult result;
    result.plan = plan;
    result.histories.resize(plan.k);
    result.models.resize(plan.k);
    result.report.fold_subject.resize(plan.k);
    result.report.fold_window.resize(plan.k);

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex error_mu;
    auto worker = [&] {
        for (;;) {
            const std::size_t f = next.fetch_add(1);
            if (f >= plan.k || failed.load()) return;
            try {
                TrainConfig fold_cfg = tcfg;
                fold_cfg.seed = derive_seed(tcfg.seed, 0xf00d + f);
                TrainedFold trained = train_fold(subjects, plan.folds[f], mcfg, fold_cfg);
                result.histories[f] = trained.history;
                result.models[f] = trained.model;

                std::vector<int> subj_preds, subj_labels, win_preds, win_labels;
                for (std::size_t idx :
                     detail::ids_to_indices(subjects, plan.folds[f].test_ids)) {
                    SubjectPrediction p =
                        predict_subject(trained.model, subjects[idx], tcfg.windows_per_example);
                    subj_preds.push_back(p.predicted);
                    subj_labels.push_back(subjects[idx].label);
                    for (int wp : p.window_preds) {
                        win_preds.push_back(wp);
                        win_labels.push_back(subjects[idx].label);
                    }
                }
                result.report.fold_subject[f] = compute_metrics(subj_preds, subj_labels);
                result.report.fold_window[f] = compute_metrics(win_preds, win_labels);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!failed.exchange(true)) first_error = e.what();
            }
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < std::min(jobs, plan.k); ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failed.load()) throw Error("cross-validation failed: " + first_error);
    result.report.finalize();
    return result;
}

inline CrossValResult cross_validate(const std::vector<SubjectData>& subjects,
                                     const ModelConfig& mcfg, const TrainConfig& tcfg,
                                     std::size_t k, std::size_t jobs = 1) {
    std::vector<SubjectLabel> labels;
    labels.reserve(subjects.size());
    bool classes[2] = {false, false};
    for (const auto& s : subjects) {
        labels.push_back({s.id, s.label});
        classes[s.label] = true;
    }
    if (!classes[0] || !classes[1]) throw ConfigError("cross_validate: need both classes");
    return cross_validate_plan(subjects, make_fold_plan(labels, k, tcfg.seed), mcfg, tcfg, jobs);
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct AblationSpec {
    std::string name = "full";
    bool disable_prior_gate = false;
    bool freeze_edge_mask = false;
    bool drop_mi = false;
    bool drop_attention_and_mi = false;

    ModelConfig apply(ModelConfig cfg) const {
        if (disable_prior_gate) cfg.use_prior_gate = false;
        if (freeze_edge_mask) cfg.learnable_adjacency = false;
        if (drop_mi) cfg.use_mi_features = false;
        if (drop_attention_and_mi) {
            cfg.use_channel_band_mask = false;
            cfg.use_mi_features = false;
        }
        return cfg;
    }
};

/// Full model first, then the four single-switch variants.
inline std::vector<AblationSpec> standard_ablations() {
    std::vector<AblationSpec> specs(5);
    specs[0].name = "full";
    specs[1].name = "no_prior";
    specs[1].disable_prior_gate = true;
    specs[2].name = "no_learnable_adjacency";
    specs[2].freeze_edge_mask = true;
    specs[3].name = "no_mi";
    specs[3].drop_mi = true;
    specs[4].name = "no_attention_mi";
    specs[4].drop_attention_and_mi = true;
    return specs;
}

struct AblationResult {
    std::string variant;
    MetricsReport report;
};

/// Runs every variant over the same fold plan with the same seeds.
inline std::vector<AblationResult> run_ablation(const std::vector<SubjectData>& subjects,
                                                const ModelConfig& mcfg, const TrainConfig& tcfg,
                                                std::size_t k,
                                                const std::vector<AblationSpec>& specs,
                                                std::size_t jobs = 1) {
    std::vector<SubjectLabel> labels;
    for (const auto& s : subjects) labels.push_back({s.id, s.label});
    const FoldPlan plan = make_fold_plan(labels, k, tcfg.seed);
    std::vector<AblationResult> results;
    for (const AblationSpec& spec : specs) {
        CrossValResult cv = cross_validate_plan(subjects, plan, spec.apply(mcfg), tcfg, jobs);
        results.push_back({spec.name, std::move(cv.report)});
    }
    return results;
}

// ---------------------------------------------------------------------------
// Result tables
// ---------------------------------------------------------------------------

inline void write_results_csv(std::ostream& os, const std::vector<AblationResult>& results) {
    os << "variant,fold,acc,pre,rec,f1,acc_window,pre_window,rec_window,f1_window\n";
    os << std::setprecision(6) << std::fixed;
    for (const auto& r : results) {
        for (std::size_t f = 0; f < r.report.fold_subject.size(); ++f) {
            const auto& s = r.report.fold_subject[f];
            const auto& w = r.report.fold_window[f];
            os << r.variant << ',' << f << ',' << s.accuracy << ',' << s.precision << ','
               << s.recall << ',' << s.f1 << ',' << w.accuracy << ',' << w.precision << ','
               << w.recall << ',' << w.f1 << '\n';
        }
        const auto& mu = r.report.mean;
        const auto& sd = r.report.stddev;
        os << r.variant << ",mean," << mu.accuracy << ',' << mu.precision << ',' << mu.recall
           << ',' << mu.f1 << ",,,,\n";
        os << r.variant << ",std," << sd.accuracy << ',' << sd.precision << ',' << sd.recall
           << ',' << sd.f1 << ",,,,\n";
    }
}

inline void write_results_table(std::ostream& os, const std::vector<AblationResult>& results) {
    os << std::left << std::setw(26) << "variant" << std::right << std::setw(16) << "Acc"
       << std::setw(16) << "Pre" << std::setw(16) << "Rec" << std::setw(16) << "F1" << '\n';
    char buf[64];
    for (const auto& r : results) {
        os << std::left << std::setw(26) << r.variant << std::right;
        const auto& mu = r.report.mean;
        const auto& sd = r.report.stddev;
        const double mus[4] = {mu.accuracy, mu.precision, mu.recall, mu.f1};
        const double sds[4] = {sd.accuracy, sd.precision, sd.recall, sd.f1};
        for (int i = 0; i < 4; ++i) {
            std::snprintf(buf, sizeof(buf), "%.3f+/-%.3f", mus[i], sds[i]);
            os << std::setw(16) << buf;
        }
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Subject preparation pipeline
// ---------------------------------------------------------------------------

/// trim -> broadband FIR -> baseline + l2 normalization -> segmentation ->
/// band decomposition -> DE/MI extraction, with the feature cache keyed by
/// recording bytes and preprocessing parameters. The graph context always
/// derives from the preprocessed broadband recording.
inline SubjectData prepare_subject(const SubjectManifest& manifest,
                                   const SubjectManifest::Row& row,
                                   const ElectrodeLayout& layout, const Parcellation& parc,
                                   const PreprocessConfig& pp, const ModelConfig& mcfg,
                                   const std::string& cache_dir = "") {
    const std::string path = manifest.resolve(row);
    Recording raw = load_recording(path, layout);
    raw.subject_id = row.subject_id;
    raw.label = row.label;

    Recording trimmed = trim_edges(raw, pp.trim_head_sec, pp.trim_tail_sec);
    Recording filtered =
        fir_bandpass(trimmed, {"broadband", pp.broadband_lo, pp.broadband_hi}, pp.fir_taps);
    Recording clean = baseline_and_normalize(filtered, pp.window_sec);

    SubjectData data;
    data.id = row.subject_id;
    data.label = row.label;
    data.ctx = build_subject_context(clean, parc, mcfg);

    bool cached = false;
    std::string cache_path;
    if (!cache_dir.empty()) {
        cache_path = feature_cache_path(cache_dir, row.subject_id, feature_cache_hash(path, pp));
        if (auto hit = load_cached_features(cache_path)) {
            data.de = std::move(hit->first);
            data.mi = std::move(hit->second);
            cached = true;
        }
    }
    if (!cached) {
        WindowedRecording windows = segment_windows(clean, pp.window_sec, pp.overlap);
        BandDecomposition bands = band_decompose(windows, pp.bands, pp.fir_taps);
        auto [de, mi] = extract_features(bands);
        data.de = std::move(de);
        data.mi = std::move(mi);
        if (!cache_dir.empty()) {
            std::filesystem::create_directories(cache_dir);
            cache_features(cache_path, data.de, data.mi);
        }
    }
    return data;
}

}  // namespace elpg
