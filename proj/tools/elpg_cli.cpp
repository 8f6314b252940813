// Batch command-line front end: synthesize cohorts, extract features, run
// cross-validated training and ablations, report FLOP estimates.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "elpg/data.hpp"
#include "elpg/log.hpp"
#include "elpg/model.hpp"
#include "elpg/train.hpp"

namespace fs = std::filesystem;
using namespace elpg;

namespace {

struct CommonArgs {
    std::string manifest_path;
    std::string out_dir;
    std::string layout_path;
    std::string parcellation_path;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
};

struct TrainArgs {
    std::size_t folds = 10;
    std::size_t max_epochs = 80;
    std::size_t patience = 10;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double kl_beta = 1e-3;
    double kl_p0 = 0.2;
    std::size_t windows_per_example = 1;
    double trim_head = 10.0;
    double trim_tail = 10.0;
    bool no_prior = false;
    bool no_learnable_adjacency = false;
    bool no_mi = false;
    bool no_attention_mi = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_manifest) {
    if (needs_manifest) {
        cmd->add_option("--manifest", args.manifest_path, "Cohort manifest CSV")->required();
        cmd->add_option("--layout", args.layout_path,
                        "Electrode layout file (default: layout.txt beside the manifest)");
        cmd->add_option("--parcellation", args.parcellation_path,
                        "Parcellation file (default: parcellation.txt beside the manifest)");
    }
    cmd->add_option("--out", args.out_dir, "Output directory")->required();
    cmd->add_option("--seed", args.seed, "Random seed");
    cmd->add_option("--jobs", args.jobs, "Concurrent folds (default 1, fully deterministic)")
        ->check(CLI::PositiveNumber);
}

void add_train_options(CLI::App* cmd, TrainArgs& args) {
    cmd->add_option("--folds", args.folds, "Cross-validation folds")->check(CLI::PositiveNumber);
    cmd->add_option("--max-epochs", args.max_epochs, "Epoch cap")->check(CLI::PositiveNumber);
    cmd->add_option("--patience", args.patience, "Early-stopping patience")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--batch-size", args.batch_size, "Windows per mini-batch")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--lr", args.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--weight-decay", args.weight_decay, "Weight decay");
    cmd->add_option("--kl-beta", args.kl_beta, "Attention KL penalty weight");
    cmd->add_option("--kl-p0", args.kl_p0, "Attention prior keep-probability");
    cmd->add_option("--windows-per-example", args.windows_per_example,
                    "Consecutive windows per training example")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--trim-head", args.trim_head, "Seconds trimmed from the start");
    cmd->add_option("--trim-tail", args.trim_tail, "Seconds trimmed from the end");
    cmd->add_flag("--no-prior", args.no_prior, "Ablation: close and freeze the prior gates");
    cmd->add_flag("--no-learnable-adjacency", args.no_learnable_adjacency,
                  "Ablation: freeze the edge mask at 0.5");
    cmd->add_flag("--no-mi", args.no_mi, "Ablation: zero the MI features");
    cmd->add_flag("--no-attention-mi", args.no_attention_mi,
                  "Ablation: all-ones channel-band mask and zeroed MI");
}

TrainConfig to_train_config(const TrainArgs& a, std::uint64_t seed) {
    TrainConfig t;
    t.lr = a.lr;
    t.weight_decay = a.weight_decay;
    t.batch_size = a.batch_size;
    t.patience = a.patience;
    t.max_epochs = a.max_epochs;
    t.seed = seed;
    t.kl_beta = a.kl_beta;
    t.kl_p0 = a.kl_p0;
    t.windows_per_example = a.windows_per_example;
    t.validate();
    return t;
}

PreprocessConfig to_preprocess_config(const TrainArgs& a) {
    PreprocessConfig pp;
    pp.trim_head_sec = a.trim_head;
    pp.trim_tail_sec = a.trim_tail;
    return pp;
}

struct LoadedCohort {
    SubjectManifest manifest;
    ElectrodeLayout layout;
    Parcellation parcellation;
};

LoadedCohort load_cohort(const CommonArgs& args) {
    LoadedCohort c;
    c.manifest = load_manifest(args.manifest_path);
    const fs::path base = fs::path(args.manifest_path).parent_path();
    const std::string layout_path =
        args.layout_path.empty() ? (base / "layout.txt").string() : args.layout_path;
    const std::string parc_path = args.parcellation_path.empty()
                                      ? (base / "parcellation.txt").string()
                                      : args.parcellation_path;
    c.layout = load_layout(layout_path);
    c.parcellation = load_parcellation(parc_path);
    return c;
}

std::vector<SubjectData> prepare_all(const LoadedCohort& cohort, const PreprocessConfig& pp,
                                     const ModelConfig& mcfg, const std::string& cache_dir) {
    std::vector<SubjectData> subjects;
    for (const auto& row : cohort.manifest.rows) {
        SubjectData s = prepare_subject(cohort.manifest, row, cohort.layout, cohort.parcellation,
                                        pp, mcfg, cache_dir);
        log_info("subject " + row.subject_id + ": T=" + std::to_string(s.de.n_windows) +
                 " windows");
        subjects.push_back(std::move(s));
    }
    return subjects;
}

ModelConfig model_config_for(const LoadedCohort& cohort, const TrainArgs& args) {
    ModelConfig mcfg;
    mcfg.n_channels = cohort.layout.size();
    if (args.no_prior) mcfg.use_prior_gate = false;
    if (args.no_learnable_adjacency) mcfg.learnable_adjacency = false;
    if (args.no_mi) mcfg.use_mi_features = false;
    if (args.no_attention_mi) {
        mcfg.use_channel_band_mask = false;
        mcfg.use_mi_features = false;
    }
    mcfg.validate();
    return mcfg;
}

std::string variant_name(const TrainArgs& args) {
    if (args.no_attention_mi) return "no_attention_mi";
    if (args.no_mi) return "no_mi";
    if (args.no_learnable_adjacency) return "no_learnable_adjacency";
    if (args.no_prior) return "no_prior";
    return "full";
}

void write_result_files(const std::string& out_dir, const std::vector<AblationResult>& results) {
    fs::create_directories(out_dir);
    {
        std::ofstream txt(fs::path(out_dir) / "results.txt");
        write_results_table(txt, results);
    }
    {
        std::ofstream csv(fs::path(out_dir) / "results.csv");
        write_results_csv(csv, results);
    }
    write_results_table(std::cout, results);
    std::cout << "results: " << (fs::path(out_dir) / "results.txt").string() << '\n';
}

// --- subcommand bodies -----------------------------------------------------

int cmd_synth(const CommonArgs& common, const CohortConfig& cohort) {
    CohortConfig cfg = cohort;
    cfg.seed = common.seed;
    SubjectManifest manifest = generate_synthetic_cohort(cfg, common.out_dir);
    log_info("wrote " + std::to_string(manifest.rows.size()) + " subjects");
    std::cout << "manifest: " << (fs::path(common.out_dir) / "manifest.csv").string() << '\n';
    return 0;
}

int cmd_extract(const CommonArgs& common, const TrainArgs& targs) {
    LoadedCohort cohort = load_cohort(common);
    const PreprocessConfig pp = to_preprocess_config(targs);
    const std::string cache_dir = (fs::path(common.out_dir) / "cache").string();
    fs::create_directories(cache_dir);
    ModelConfig mcfg;
    mcfg.n_channels = cohort.layout.size();

    std::size_t failed = 0;
    for (const auto& row : cohort.manifest.rows) {
        try {
            SubjectData s = prepare_subject(cohort.manifest, row, cohort.layout,
                                            cohort.parcellation, pp, mcfg, cache_dir);
            log_info("subject " + row.subject_id + ": T=" + std::to_string(s.de.n_windows) +
                     " windows, " + std::to_string(s.de.n_bands) + " bands, " +
                     std::to_string(s.mi.n_pairs) + " band pairs");
        } catch (const std::exception& e) {
            ++failed;
            log_error("subject " + row.subject_id + " failed: " + e.what());
        }
    }
    std::cout << "extracted " << (cohort.manifest.rows.size() - failed) << "/"
              << cohort.manifest.rows.size() << " subjects into " << cache_dir << '\n';
    if (failed > 0) throw DataError(std::to_string(failed) + " subject(s) failed extraction");
    return 0;
}

int cmd_train(const CommonArgs& common, const TrainArgs& targs) {
    LoadedCohort cohort = load_cohort(common);
    const ModelConfig mcfg = model_config_for(cohort, targs);
    const TrainConfig tcfg = to_train_config(targs, common.seed);
    const std::string cache_dir = (fs::path(common.out_dir) / "cache").string();
    fs::create_directories(cache_dir);
    std::vector<SubjectData> subjects =
        prepare_all(cohort, to_preprocess_config(targs), mcfg, cache_dir);

    CrossValResult cv = cross_validate(subjects, mcfg, tcfg, targs.folds, common.jobs);

    const std::string ckpt_dir = (fs::path(common.out_dir) / "checkpoints").string();
    fs::create_directories(ckpt_dir);
    for (std::size_t f = 0; f < cv.models.size(); ++f) {
        save_checkpoint(cv.models[f], (fs::path(ckpt_dir) / ("fold" + std::to_string(f) + ".bin")).string(),
                        (fs::path(ckpt_dir) / ("fold" + std::to_string(f) + ".txt")).string());
    }
    write_result_files(common.out_dir, {{variant_name(targs), cv.report}});
    return 0;
}

int cmd_ablate(const CommonArgs& common, const TrainArgs& targs) {
    LoadedCohort cohort = load_cohort(common);
    const ModelConfig mcfg = model_config_for(cohort, targs);
    const TrainConfig tcfg = to_train_config(targs, common.seed);
    const std::string cache_dir = (fs::path(common.out_dir) / "cache").string();
    fs::create_directories(cache_dir);
    std::vector<SubjectData> subjects =
        prepare_all(cohort, to_preprocess_config(targs), mcfg, cache_dir);

    auto results =
        run_ablation(subjects, mcfg, tcfg, targs.folds, standard_ablations(), common.jobs);
    write_result_files(common.out_dir, results);
    return 0;
}

int cmd_flops(std::uint64_t n, std::uint64_t d, double keep_frac) {
    FlopsReport r = flops_report(n, d, keep_frac);
    std::cout << "attention_flops " << r.attention << '\n';
    std::cout << "gcn_flops " << r.gcn << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prior-guided adaptive time-frequency graph network for EEG classification"};
    app.require_subcommand(1);

    CommonArgs synth_common, extract_common, train_common, ablate_common;
    TrainArgs extract_args, train_args, ablate_args;
    CohortConfig cohort;

    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic EEG cohort");
    add_common(synth, synth_common, false);
    synth->add_option("--subjects-per-class", cohort.n_per_class, "Subjects per class");
    synth->add_option("--channels", cohort.n_channels, "Electrode count");
    synth->add_option("--fs", cohort.fs, "Sampling rate in Hz")->check(CLI::PositiveNumber);
    synth->add_option("--duration", cohort.duration_sec, "Recording length in seconds");
    synth->add_option("--alpha-power-ratio", cohort.alpha_power_ratio,
                      "Class-1 frontal alpha power multiplier");
    synth->add_option("--coupling-delta", cohort.coupling_delta,
                      "Class-1 inter-channel coupling increment");
    synth->add_option("--noise-std", cohort.noise_std, "Additive sensor noise");

    CLI::App* extract = app.add_subcommand("extract", "Preprocess and cache DE/MI features");
    add_common(extract, extract_common, true);
    add_train_options(extract, extract_args);

    CLI::App* train = app.add_subcommand("train", "Subject-wise cross-validated training");
    add_common(train, train_common, true);
    add_train_options(train, train_args);

    CLI::App* ablate = app.add_subcommand("ablate", "Train the full model and all ablations");
    add_common(ablate, ablate_common, true);
    add_train_options(ablate, ablate_args);

    std::uint64_t flops_n = 128, flops_d = 64;
    double flops_keep = 0.25;
    CLI::App* flops = app.add_subcommand("flops", "Print attention and GCN FLOP estimates");
    flops->add_option("--n", flops_n, "Node count")->check(CLI::PositiveNumber);
    flops->add_option("--d", flops_d, "Feature dimension")->check(CLI::PositiveNumber);
    flops->add_option("--keep", flops_keep, "Edge keep fraction")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_common, cohort);
        if (extract->parsed()) return cmd_extract(extract_common, extract_args);
        if (train->parsed()) return cmd_train(train_common, train_args);
        if (ablate->parsed()) return cmd_ablate(ablate_common, ablate_args);
        if (flops->parsed()) return cmd_flops(flops_n, flops_d, flops_keep);
    } catch (const ConfigError& e) {
        log_error(e.what());
        return 2;
    } catch (const DataError& e) {
        log_error(e.what());
        return 3;
    } catch (const std::exception& e) {
        log_error(e.what());
        return 4;
    }
    return 0;
}
