#pragma once

// Command layer behind the `reldistill` binary. Every command takes a plain
// options struct (JSON round-trippable, so a run manifest can replay it),
// writes its outputs atomically under `out`, and records a run manifest.

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rd::cli {

inline constexpr const char* kToolName = "reldistill";
inline constexpr const char* kCacheEnv = "MORPHDISTILL_CACHE";

std::string version();

struct SynthOptions {
    std::string kind;  // teachers | cohort | dataset
    std::string out;
    std::uint64_t seed = 0;
    // teachers / dataset
    int n = 200;
    std::vector<int> dims{8, 32};
    int latent_dim = 8;
    int classes = 3;
    double class_separation = 4.0;
    double within_sd = 1.0;
    double noise = 0.0;
    bool rotate = true;
    int input_dim = 32;
    double input_noise = 0.5;
    int groups = 0;
    // cohort
    int patients = 120;
    double signal_strength = 20.0;
    int patches = 32;
    double censoring = 0.2;
    double horizon = 60.0;
    int feature_dim = 64;
    double signal_fraction = 0.25;
};

struct DistillOptions {
    std::string dataset;   // directory with features.emb + labels.csv
    std::string images;    // class-per-directory image root
    std::string teachers;  // ensemble manifest.json (or its directory)
    std::string out;
    std::uint64_t seed = 0;
    std::string strategy = "supcon-distill";
    bool ablation_grid = false;
    double lambda = 0.75;
    double tau = 0.1;
    int epochs = 50;
    int batch_size = 256;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::string arch = "mlp";
    std::vector<int> hidden{256};
    int embed_dim = 768;
    int patch_size = 16;
    int depth = 12;
    int heads = 6;
    int width = 384;
    int image_size = 224;
    bool augment = true;
    double vector_noise = 0.1;
    double val_fraction = 0.15;
    std::vector<int> knn_k{1, 5, 10, 20};
};

struct EmbedOptions {
    std::string checkpoint;
    std::string dataset;  // flat mode
    std::string images;   // flat mode, image folder
    std::string cohort;   // bag mode
    std::string bags;     // bag mode; defaults to <cohort dir>/bags
    std::string out;
    std::string bench_csv;  // defaults to <out>/bench.csv
    int batch_size = 256;
    std::uint64_t seed = 0;
};

struct MilTrainOptions {
    std::string cohort;
    std::string bags;        // defaults to <cohort dir>/bags
    std::string folds_file;  // reuse an existing folds.json
    std::string out;
    int folds = 5;
    std::vector<std::string> covariates{"age", "bmi", "income"};
    double inner_val = 0.15;
    int hidden = 512;
    bool gated = true;
    double lr = 2e-4;
    int epochs = 100;
    int patience = 10;
    double l1 = 5e-4;
    bool l1_head = false;
    std::string auc_level = "patient";
    int threads = 1;
    std::uint64_t seed = 0;
};

struct EvaluateOptions {
    std::string predictions;  // predictions.csv or a patient_id,risk CSV
    std::string cohort;
    std::string out;
    std::string model_name = "model";
    std::vector<std::string> stratify_by;
    std::vector<std::string> covariates{"age", "bmi", "income"};
    double threshold = 0.5;
    std::string rule = "median";  // median | threshold
    double risk_threshold = 0.5;
    std::uint64_t seed = 0;
};

struct BenchOptions {
    std::vector<std::string> checkpoints;
    std::vector<std::string> names;
    std::string teachers;   // embedding-table providers
    std::string reference;  // row left out of the average
    std::string out;
    int n_patches = 1000;
    std::vector<int> batch_sizes{32};
    int repeats = 3;
    std::uint64_t seed = 0;
};

struct ProbeOptions {
    std::string checkpoint;
    std::string dataset;
    std::string train_emb, train_labels, val_emb, val_labels;
    std::string out;
    std::vector<int> k{1, 5, 10, 20};
    double val_fraction = 0.15;
    std::uint64_t seed = 0;
};

// Missing keys keep their defaults, so partial JSON configs are fine.
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthOptions, kind, out, seed, n, dims, latent_dim, classes,
                                                class_separation, within_sd, noise, rotate, input_dim, input_noise,
                                                groups, patients, signal_strength, patches, censoring, horizon,
                                                feature_dim, signal_fraction)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DistillOptions, dataset, images, teachers, out, seed, strategy,
                                                ablation_grid, lambda, tau, epochs, batch_size, lr, weight_decay, arch,
                                                hidden, embed_dim, patch_size, depth, heads, width, image_size, augment,
                                                vector_noise, val_fraction, knn_k)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EmbedOptions, checkpoint, dataset, images, cohort, bags, out,
                                                bench_csv, batch_size, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MilTrainOptions, cohort, bags, folds_file, out, folds, covariates,
                                                inner_val, hidden, gated, lr, epochs, patience, l1, l1_head, auc_level,
                                                threads, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvaluateOptions, predictions, cohort, out, model_name, stratify_by,
                                                covariates, threshold, rule, risk_threshold, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BenchOptions, checkpoints, names, teachers, reference, out, n_patches,
                                                batch_sizes, repeats, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProbeOptions, checkpoint, dataset, train_emb, train_labels, val_emb,
                                                val_labels, out, k, val_fraction, seed)

// ---- run manifest ------------------------------------------------------------

struct InputRecord {
    std::string path;
    std::string crc32;
    std::uintmax_t bytes = 0;
    int files = 1;  // > 1 for a directory digest
};

struct PhaseRecord {
    std::string name;
    double seconds = 0.0;
};

struct RunManifest {
    std::string tool = kToolName;
    std::string version;
    std::string command;
    nlohmann::json options;
    std::vector<InputRecord> inputs;
    std::vector<PhaseRecord> phases;

    void add_input(const std::filesystem::path& path);
    // CRC over the names and contents of the regular files in `dir`
    // (sorted, non-recursive) whose extension matches `ext` (any if empty).
    void add_input_dir(const std::filesystem::path& dir, const std::string& ext = {});
};

nlohmann::json to_json(const RunManifest& m);
RunManifest run_manifest_from_json(const nlohmann::json& j);
void write_manifest(const std::filesystem::path& out_dir, const RunManifest& m);

// Times a phase into a manifest.
class PhaseTimer {
public:
    PhaseTimer(RunManifest& manifest, std::string name);
    ~PhaseTimer();
    PhaseTimer(const PhaseTimer&) = delete;
    PhaseTimer& operator=(const PhaseTimer&) = delete;

private:
    RunManifest& manifest_;
    std::string name_;
    std::chrono::steady_clock::time_point start_;
};

// ---- commands ----------------------------------------------------------------
// Each returns a short JSON summary (also printed by the binary).

nlohmann::json cmd_synth(const SynthOptions& options);
nlohmann::json cmd_distill(const DistillOptions& options);
nlohmann::json cmd_embed(const EmbedOptions& options);
nlohmann::json cmd_mil_train(const MilTrainOptions& options);
nlohmann::json cmd_evaluate(const EvaluateOptions& options);
nlohmann::json cmd_bench(const BenchOptions& options);
nlohmann::json cmd_probe(const ProbeOptions& options);

// One row of the throughput table.
struct BenchRow {
    std::string model;
    std::string architecture;
    double params_millions = 0.0;
    int embed_dim = 0;
    std::string pretraining;
    std::string training_data;
    int batch_size = 0;
    double seconds_per_1k = 0.0;
    double speedup_vs_slowest = 1.0;
    double speedup_vs_avg = 1.0;
};

// Within each batch size: speedup_vs_slowest = slowest / own time and
// speedup_vs_avg = mean time (excluding `reference` when it is one of
// several rows) / own time.
void compute_speedups(std::vector<BenchRow>& rows, const std::string& reference);
std::string format_bench_table(const std::vector<BenchRow>& rows);

// Parses argv and dispatches; returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace rd::cli
