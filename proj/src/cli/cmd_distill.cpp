#include "common.hpp"

#include "reldistill/log.hpp"
#include "reldistill/student.hpp"
#include "reldistill/teachers.hpp"

#include <algorithm>
#include <optional>

namespace rd::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using contrastive::Strategy;

namespace {

student::EncoderConfig encoder_config(const DistillOptions& o, const student::LabeledDataset& ds) {
    student::EncoderConfig ec;
    if (o.arch == "mlp") {
        ec.architecture = student::MlpArch{o.hidden};
    } else if (o.arch == "vit") {
        ec.architecture = student::VitArch{o.patch_size, o.depth, o.heads, o.width};
    } else {
        throw ConfigError("--arch must be mlp or vit, got '" + o.arch + "'");
    }
    ec.embed_dim = o.embed_dim;
    ec.input = ds.input;
    if (std::holds_alternative<student::VectorInput>(ec.input))
        ec.input = student::VectorInput{static_cast<int>(ds.inputs.cols())};
    student::validate(ec);
    return ec;
}

student::Stage1Config stage1_config(const DistillOptions& o, Strategy strategy) {
    student::Stage1Config c;
    c.strategy = strategy;
    c.lambda = o.lambda;
    c.tau = o.tau;
    c.epochs = o.epochs;
    c.batch_size = o.batch_size;
    c.learning_rate = o.lr;
    c.weight_decay = o.weight_decay;
    c.seed = o.seed;
    c.augmentation.enabled = o.augment;
    c.augmentation.vector_noise = o.vector_noise;
    c.val_fraction = o.val_fraction;
    student::validate(c);
    return c;
}

Matrix rows_of(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

std::vector<int> labels_of(std::span<const int> labels, std::span<const std::size_t> rows) {
    std::vector<int> out;
    for (std::size_t r : rows) out.push_back(labels[r]);
    return out;
}

struct StrategyRun {
    json summary;
    json probe;
};

StrategyRun run_strategy(const DistillOptions& o, Strategy strategy, const student::LabeledDataset& ds,
                         const teachers::TeacherEnsemble* ensemble, const student::EncoderConfig& ec,
                         const student::Split& split, const fs::path& out_dir, RunManifest& manifest) {
    const std::string name(contrastive::to_string(strategy));
    const student::Stage1Config cfg = stage1_config(o, strategy);
    student::TrainResult result;
    {
        PhaseTimer t(manifest, "train:" + name);
        result = student::train_stage1(ds, contrastive::uses_distillation(strategy) ? ensemble : nullptr, ec, cfg,
                                       split);
    }
    detail::ensure_dir(out_dir);
    student::save_checkpoint(out_dir, result.best);

    StrategyRun run;
    {
        PhaseTimer t(manifest, "probe:" + name);
        if (split.val.empty()) {
            run.probe = {{"error", "ConfigError"}, {"message", "no validation rows"}};
        } else {
            const EmbeddingMatrix emb = student::embed(result.best.encoder, ds.inputs, ds.ids);
            run.probe = detail::probe_report(rows_of(emb.values(), split.train), labels_of(ds.labels, split.train),
                                             rows_of(emb.values(), split.val), labels_of(ds.labels, split.val),
                                             o.knn_k);
        }
        run.probe["strategy"] = name;
        run.probe["seed"] = o.seed;
        detail::write_json(out_dir / "probe.json", run.probe);
    }

    const auto& best = result.best;
    std::optional<double> best_val;
    for (const auto& h : best.history)
        if (h.epoch == best.epoch) best_val = h.val_total;
    run.summary = {{"strategy", name},
                   {"checkpoint", out_dir.string()},
                   {"best_epoch", best.epoch},
                   {"epochs_run", result.last.epoch},
                   {"initial_train_loss", result.initial_train_loss},
                   {"final_train_loss", result.final_train_loss},
                   {"best_val_loss", best_val ? json(*best_val) : json(nullptr)}};
    return run;
}

std::string metric_cell(const json& block, const char* key) {
    if (!block.is_object() || !block.contains(key) || !block[key].is_number()) return "";
    return io::format_double(block[key].get<double>());
}

}  // namespace

json cmd_distill(const DistillOptions& o) {
    detail::require_out(o.out, "distill");
    RunManifest manifest;
    manifest.version = version();
    manifest.command = "distill";
    manifest.options = o;

    std::vector<Strategy> strategies;
    if (o.ablation_grid) {
        strategies.assign(contrastive::kAllStrategies.begin(), contrastive::kAllStrategies.end());
    } else {
        strategies.push_back(contrastive::parse_strategy(o.strategy));
    }
    bool need_teachers = false;
    for (Strategy s : strategies) need_teachers = need_teachers || contrastive::uses_distillation(s);

    student::LabeledDataset ds;
    std::optional<teachers::TeacherEnsemble> ensemble;
    {
        PhaseTimer t(manifest, "load");
        ds = detail::load_stage1_dataset(o.dataset, o.images, o.image_size);
        if (!o.dataset.empty()) manifest.add_input_dir(o.dataset);
        if (!o.images.empty()) {
            std::vector<fs::path> classes;
            for (const auto& entry : fs::directory_iterator(o.images))
                if (entry.is_directory()) classes.push_back(entry.path());
            std::sort(classes.begin(), classes.end());
            for (const auto& c : classes) manifest.add_input_dir(c);
        }
        if (need_teachers) {
            const fs::path tm = detail::resolve_teacher_manifest(o.teachers);
            ensemble = teachers::load_ensemble(tm);
            manifest.add_input_dir(tm.parent_path());
        }
    }
    const student::EncoderConfig ec = encoder_config(o, ds);
    // Every strategy of a grid sees the same split.
    const student::Split split = student::group_split(ds, o.val_fraction, o.seed);
    const teachers::TeacherEnsemble* ens = ensemble ? &*ensemble : nullptr;

    const fs::path out = o.out;
    json runs = json::array();
    if (!o.ablation_grid) {
        runs.push_back(run_strategy(o, strategies.front(), ds, ens, ec, split, out, manifest).summary);
    } else {
        io::CsvTable table;
        table.header = {"strategy", "best_epoch", "final_train_loss", "best_val_loss", "knn_best_k",
                        "knn_accuracy", "knn_macro_f1", "lp_accuracy", "lp_macro_f1"};
        for (Strategy s : strategies) {
            const std::string name(contrastive::to_string(s));
            log::info("distill: training " + name);
            const StrategyRun r = run_strategy(o, s, ds, ens, ec, split, out / name, manifest);
            const json& knn = r.probe.contains("knn") ? r.probe["knn"] : json();
            const json& lp = r.probe.contains("linear_probe") ? r.probe["linear_probe"] : json();
            const json& bv = r.summary["best_val_loss"];
            table.rows.push_back({name, std::to_string(r.summary["best_epoch"].get<int>()),
                                  io::format_double(r.summary["final_train_loss"].get<double>()),
                                  bv.is_number() ? io::format_double(bv.get<double>()) : "",
                                  knn.is_object() && knn.contains("best_k") ? std::to_string(knn["best_k"].get<int>()) : "",
                                  metric_cell(knn, "accuracy"), metric_cell(knn, "macro_f1"),
                                  metric_cell(lp, "accuracy"), metric_cell(lp, "macro_f1")});
            json summary = r.summary;
            summary["probe"] = r.probe;
            runs.push_back(summary);
        }
        detail::ensure_dir(out);
        io::write_file_atomic(out / "ablation.csv", io::format_csv(table));
    }
    write_manifest(out, manifest);
    return {{"command", "distill"}, {"out", out.string()}, {"runs", runs}};
}

}  // namespace rd::cli
