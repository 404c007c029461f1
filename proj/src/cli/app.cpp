#include "common.hpp"

#include "reldistill/log.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <optional>

namespace rd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kCommands[] = {"synth", "distill", "embed", "mil-train", "evaluate", "bench", "probe"};

bool is_manifest(const json& j) {
    return j.is_object() && j.contains("tool") && j.contains("command") && j.contains("options");
}

// Renames config keys that use the library's longer names.
json with_aliases(json section, std::initializer_list<std::pair<const char*, const char*>> aliases) {
    for (const auto& [from, to] : aliases)
        if (section.contains(from) && !section.contains(to)) section[to] = section[from];
    return section;
}

// Options for `command` from a RunConfig-style file: top-level seed,
// paths.{teachers, dataset, bags, cohort, output}, stage1/stage2 blocks and
// a block named after the command. Later sources win.
json config_for(const json& cfg, const std::string& command) {
    json merged = json::object();
    if (cfg.contains("seed")) merged["seed"] = cfg["seed"];
    if (cfg.contains("paths")) {
        const json& p = cfg["paths"];
        if (p.contains("output")) merged["out"] = p["output"];
        auto copy = [&](const char* from, const char* to) {
            if (p.contains(from)) merged[to] = p[from];
        };
        if (command == "distill") {
            copy("teachers", "teachers");
            copy("dataset", "dataset");
        } else if (command == "embed") {
            copy("dataset", "dataset");
            copy("cohort", "cohort");
            copy("bags", "bags");
        } else if (command == "mil-train") {
            copy("cohort", "cohort");
            copy("bags", "bags");
        } else if (command == "evaluate") {
            copy("cohort", "cohort");
        } else if (command == "bench") {
            copy("teachers", "teachers");
        } else if (command == "probe") {
            copy("dataset", "dataset");
        }
    }
    if (command == "distill" && cfg.contains("stage1"))
        merged.update(with_aliases(cfg["stage1"], {{"learning_rate", "lr"}}));
    if (command == "mil-train" && cfg.contains("stage2"))
        merged.update(with_aliases(cfg["stage2"], {{"learning_rate", "lr"}, {"l1_coeff", "l1"}}));
    if (cfg.contains(command)) merged.update(cfg[command]);
    return merged;
}

struct AllOptions {
    SynthOptions synth;
    DistillOptions distill;
    EmbedOptions embed;
    MilTrainOptions mil;
    EvaluateOptions evaluate;
    BenchOptions bench;
    ProbeOptions probe;
};

void load_options(AllOptions& all, const json& cfg, const std::string& only) {
    auto apply = [&](const std::string& command, auto& target) {
        if (!only.empty() && command != only) return;
        if (only.empty() || !is_manifest(cfg)) {
            config_for(cfg, command).get_to(target);
        } else {
            cfg.at("options").get_to(target);
        }
    };
    apply("synth", all.synth);
    apply("distill", all.distill);
    apply("embed", all.embed);
    apply("mil-train", all.mil);
    apply("evaluate", all.evaluate);
    apply("bench", all.bench);
    apply("probe", all.probe);
}

std::optional<std::string> find_config(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw ConfigError("--config needs a path");
            return args[i + 1];
        }
        if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
    }
    return std::nullopt;
}

void build_synth(CLI::App& app, SynthOptions& o) {
    auto* c = app.add_subcommand("synth", "Write synthetic teachers, a planted dataset or a cohort");
    c->add_option("kind", o.kind, "teachers | dataset | cohort");
    c->add_option("--n", o.n, "Samples (teachers, dataset)");
    c->add_option("--dims", o.dims, "Teacher widths, comma separated")->delimiter(',');
    c->add_option("--latent-dim", o.latent_dim);
    c->add_option("--classes", o.classes);
    c->add_option("--class-separation", o.class_separation);
    c->add_option("--within-sd", o.within_sd);
    c->add_option("--noise", o.noise, "Teacher noise scale");
    c->add_flag("--rotate,!--no-rotate", o.rotate, "Random orthonormal teacher maps");
    c->add_option("--input-dim", o.input_dim, "Student input width (dataset)");
    c->add_option("--input-noise", o.input_noise);
    c->add_option("--groups", o.groups, "Group column size (dataset); 0 = none");
    c->add_option("--patients", o.patients);
    c->add_option("--signal-strength", o.signal_strength);
    c->add_option("--patches", o.patches);
    c->add_option("--censoring", o.censoring);
    c->add_option("--horizon", o.horizon);
    c->add_option("--feature-dim", o.feature_dim);
    c->add_option("--signal-fraction", o.signal_fraction);
}

void build_distill(CLI::App& app, DistillOptions& o) {
    auto* c = app.add_subcommand("distill", "Train a student encoder");
    c->add_option("--dataset", o.dataset, "Directory with features.emb and labels.csv");
    c->add_option("--images", o.images, "Image folder, one directory per class");
    c->add_option("--teachers", o.teachers, "Teacher manifest.json or its directory");
    c->add_option("--strategy", o.strategy);
    c->add_flag("--ablation-grid", o.ablation_grid, "Train all six strategies");
    c->add_option("--lambda", o.lambda);
    c->add_option("--tau", o.tau);
    c->add_option("--epochs", o.epochs);
    c->add_option("--batch-size", o.batch_size);
    c->add_option("--lr", o.lr);
    c->add_option("--weight-decay", o.weight_decay);
    c->add_option("--arch", o.arch, "mlp | vit");
    c->add_option("--hidden", o.hidden, "MLP hidden sizes")->delimiter(',');
    c->add_option("--embed-dim", o.embed_dim);
    c->add_option("--patch-size", o.patch_size);
    c->add_option("--depth", o.depth);
    c->add_option("--heads", o.heads);
    c->add_option("--width", o.width);
    c->add_option("--image-size", o.image_size);
    c->add_flag("--augment,!--no-augment", o.augment);
    c->add_option("--vector-noise", o.vector_noise);
    c->add_option("--val-fraction", o.val_fraction);
    c->add_option("--knn-k", o.knn_k)->delimiter(',');
}

void build_embed(CLI::App& app, EmbedOptions& o) {
    auto* c = app.add_subcommand("embed", "Embed a dataset or cohort bags with a checkpoint");
    c->add_option("--checkpoint", o.checkpoint);
    c->add_option("--dataset", o.dataset);
    c->add_option("--images", o.images);
    c->add_option("--cohort", o.cohort, "cohort.csv (bag mode)");
    c->add_option("--bags", o.bags);
    c->add_option("--bench-csv", o.bench_csv);
    c->add_option("--batch-size", o.batch_size);
}

void build_mil(CLI::App& app, MilTrainOptions& o, bool& make_folds) {
    auto* c = app.add_subcommand("mil-train", "Cross-validated attention MIL training");
    c->add_option("--cohort", o.cohort);
    c->add_option("--bags", o.bags);
    c->add_option("--folds", o.folds, "Fold count");
    c->add_option("--folds-file", o.folds_file, "Reuse an existing folds.json");
    c->add_flag("--make-folds", make_folds, "Build folds even if a folds file is configured");
    c->add_option("--covariates", o.covariates)->delimiter(',');
    c->add_option("--inner-val", o.inner_val);
    c->add_option("--hidden", o.hidden);
    c->add_flag("--gated,!--no-gated", o.gated);
    c->add_option("--lr", o.lr);
    c->add_option("--epochs", o.epochs);
    c->add_option("--patience", o.patience);
    c->add_option("--l1", o.l1);
    c->add_flag("--l1-head", o.l1_head);
    c->add_option("--auc-level", o.auc_level, "patient | slide");
    c->add_option("--threads", o.threads, "Folds trained concurrently; 0 = all cores");
}

void build_evaluate(CLI::App& app, EvaluateOptions& o) {
    auto* c = app.add_subcommand("evaluate", "Classification and survival metrics");
    c->add_option("--predictions", o.predictions);
    c->add_option("--cohort", o.cohort);
    c->add_option("--model-name", o.model_name);
    c->add_option("--stratify-by", o.stratify_by)->delimiter(',');
    c->add_option("--covariates", o.covariates)->delimiter(',');
    c->add_option("--threshold", o.threshold);
    c->add_option("--rule", o.rule, "median | threshold");
    c->add_option("--risk-threshold", o.risk_threshold);
}

void build_bench(CLI::App& app, BenchOptions& o) {
    auto* c = app.add_subcommand("bench", "Feature extraction throughput table");
    c->add_option("--checkpoint", o.checkpoints)->delimiter(',');
    c->add_option("--names", o.names)->delimiter(',');
    c->add_option("--teachers", o.teachers);
    c->add_option("--reference", o.reference, "Model left out of the average");
    c->add_option("--n-patches", o.n_patches);
    c->add_option("--batch-size,--batch-sizes", o.batch_sizes)->delimiter(',');
    c->add_option("--repeats", o.repeats);
}

void build_probe(CLI::App& app, ProbeOptions& o) {
    auto* c = app.add_subcommand("probe", "Linear and KNN probes of frozen embeddings");
    c->add_option("--checkpoint", o.checkpoint);
    c->add_option("--dataset", o.dataset);
    c->add_option("--train-emb", o.train_emb);
    c->add_option("--train-labels", o.train_labels);
    c->add_option("--val-emb", o.val_emb);
    c->add_option("--val-labels", o.val_labels);
    c->add_option("--k", o.k)->delimiter(',');
    c->add_option("--val-fraction", o.val_fraction);
}

void print_result(const json& result) {
    json shown = result;
    if (shown.contains("table")) {
        std::cout << shown["table"].get<std::string>();
        shown.erase("table");
    }
    std::cout << shown.dump(2) << std::endl;
}

}  // namespace

int run(int argc, const char* const* argv) {
    std::vector<std::string> args(argv + (argc > 0 ? 1 : 0), argv + argc);
    AllOptions all;
    bool make_folds = false;
    try {
        const auto config_path = find_config(args);
        if (config_path) {
            json cfg;
            try {
                cfg = json::parse(io::read_file(*config_path));
            } catch (const json::parse_error& e) {
                throw FormatError("--config '" + *config_path + "': " + e.what());
            }
            if (!cfg.is_object()) throw ConfigError("--config must hold a JSON object");
            std::string only;
            if (is_manifest(cfg)) {
                only = cfg["command"].get<std::string>();
                if (std::find(std::begin(kCommands), std::end(kCommands), only) == std::end(kCommands))
                    throw ConfigError("manifest names unknown command '" + only + "'");
                const bool has_command = std::any_of(args.begin(), args.end(), [](const std::string& a) {
                    return std::find(std::begin(kCommands), std::end(kCommands), a) != std::end(kCommands);
                });
                if (!has_command) {
                    // up front, so command flags after it parse; global ones fall through
                    args.insert(args.begin(), only);
                } else if (std::find(args.begin(), args.end(), only) == args.end()) {
                    throw ConfigError("manifest is for '" + only + "', not the requested command");
                }
            }
            load_options(all, cfg, only);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "error: ConfigError: " << e.what() << '\n';
        return 2;
    }

    CLI::App app{"Multi-teacher relational distillation and attention MIL survival toolkit", kToolName};
    app.fallthrough();
    app.require_subcommand(1);
    app.set_version_flag("--version", version());
    std::string config_file;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool deterministic = false;
    bool quiet = false;
    bool verbose = false;
    app.add_option("--config", config_file, "JSON run config or a run_manifest.json to replay");
    app.add_option("--seed", seed, "Seed for every random stream");
    app.add_option("--out", out, "Output directory");
    app.add_flag("--deterministic", deterministic, "Single-threaded execution");
    app.add_flag("-q,--quiet", quiet, "Errors only");
    app.add_flag("-v,--verbose", verbose, "Progress messages");
    build_synth(app, all.synth);
    build_distill(app, all.distill);
    build_embed(app, all.embed);
    build_mil(app, all.mil, make_folds);
    build_evaluate(app, all.evaluate);
    build_bench(app, all.bench);
    build_probe(app, all.probe);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    log::level() = quiet ? log::Level::quiet : verbose ? log::Level::info : log::Level::warn;
    const std::string command = app.get_subcommands().front()->get_name();

    auto globals = [&](auto& o) {
        if (seed) o.seed = *seed;
        if (out) o.out = *out;
    };
    try {
        json result;
        if (command == "synth") {
            globals(all.synth);
            result = cmd_synth(all.synth);
        } else if (command == "distill") {
            globals(all.distill);
            result = cmd_distill(all.distill);
        } else if (command == "embed") {
            globals(all.embed);
            result = cmd_embed(all.embed);
        } else if (command == "mil-train") {
            globals(all.mil);
            if (deterministic) all.mil.threads = 1;
            if (make_folds) all.mil.folds_file.clear();
            result = cmd_mil_train(all.mil);
        } else if (command == "evaluate") {
            globals(all.evaluate);
            result = cmd_evaluate(all.evaluate);
        } else if (command == "bench") {
            globals(all.bench);
            result = cmd_bench(all.bench);
        } else {
            globals(all.probe);
            result = cmd_probe(all.probe);
        }
        if (log::level().load() != log::Level::quiet) print_result(result);
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "error: ConfigError: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace rd::cli
