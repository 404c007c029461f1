#include "common.hpp"

#include "reldistill/probe.hpp"
#include "reldistill/student.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace rd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json metrics_json(const probe::ClassificationMetrics& m) {
    return {{"accuracy", m.accuracy}, {"macro_f1", m.macro_f1}, {"weighted_f1", m.weighted_f1}};
}

Matrix gather(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

std::vector<int> gather(std::span<const int> v, std::span<const std::size_t> rows) {
    std::vector<int> out;
    out.reserve(rows.size());
    for (std::size_t r : rows) out.push_back(v[r]);
    return out;
}

std::map<std::string, std::string> read_label_map(const fs::path& path) {
    const io::CsvTable t = io::read_csv(path);
    const std::string origin = path.string();
    const std::size_t ic = t.require_column("sample_id", origin);
    const std::size_t lc = t.require_column("label", origin);
    std::map<std::string, std::string> out;
    for (const auto& row : t.rows) out[row[ic]] = row[lc];
    return out;
}

std::vector<std::string> labels_for(const EmbeddingMatrix& emb, const std::map<std::string, std::string>& labels,
                                    const std::string& origin) {
    std::vector<std::string> out;
    std::vector<std::string> missing;
    for (const auto& id : emb.ids()) {
        const auto it = labels.find(id);
        if (it == labels.end()) {
            missing.push_back(id);
        } else {
            out.push_back(it->second);
        }
    }
    if (!missing.empty()) {
        std::string msg = origin + ": no label for " + std::to_string(missing.size()) + " sample(s):";
        for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 10); ++i) msg += " " + missing[i];
        throw MissingSampleError(msg);
    }
    return out;
}

}  // namespace

namespace detail {

student::LabeledDataset load_stage1_dataset(const std::string& dataset_dir, const std::string& images, int image_size) {
    if (!dataset_dir.empty() && !images.empty()) throw ConfigError("pass either --dataset or --images, not both");
    if (!images.empty()) {
        require_exists(images, "--images");
        return student::load_image_folder(images, student::ImageInput{image_size, image_size, 3});
    }
    require_exists(dataset_dir, "--dataset");
    const fs::path dir = dataset_dir;
    return student::load_vector_dataset(dir / "features.emb", dir / "labels.csv");
}

json probe_report(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& val_emb,
                  std::span<const int> val_labels, std::span<const int> ks) {
    json report = {{"n_train", train_emb.rows()}, {"n_val", val_emb.rows()}};
    std::vector<int> usable;
    for (int k : ks)
        if (k >= 1 && k <= train_emb.rows()) usable.push_back(k);
    if (usable.empty()) {
        report["knn"] = {{"error", "ConfigError"}, {"message", "no k value fits the training set"}};
    } else {
        const probe::KnnSweep sweep = probe::eval_knn_sweep(train_emb, train_labels, val_emb, val_labels, usable);
        json all = json::array();
        for (const auto& [k, m] : sweep.all) {
            json row = metrics_json(m);
            row["k"] = k;
            all.push_back(row);
        }
        json knn = metrics_json(sweep.best);
        knn["best_k"] = sweep.best_k;
        knn["sweep"] = all;
        report["knn"] = knn;
    }
    try {
        report["linear_probe"] = metrics_json(probe::eval_linear_probe(train_emb, train_labels, val_emb, val_labels));
    } catch (const Error& e) {
        report["linear_probe"] = {{"error", e.kind()}, {"message", e.what()}};
    }
    return report;
}

}  // namespace detail

json cmd_probe(const ProbeOptions& o) {
    detail::require_out(o.out, "probe");
    RunManifest manifest;
    manifest.version = version();
    manifest.command = "probe";
    manifest.options = o;

    Matrix train_emb, val_emb;
    std::vector<int> train_labels, val_labels;
    std::vector<std::string> class_names;

    if (!o.checkpoint.empty()) {
        detail::require_exists(o.checkpoint, "--checkpoint");
        student::Checkpoint cp;
        student::LabeledDataset ds;
        {
            PhaseTimer t(manifest, "load");
            cp = student::load_checkpoint(o.checkpoint);
            manifest.add_input_dir(o.checkpoint);
            int image_size = 224;
            if (const auto* img = std::get_if<student::ImageInput>(&cp.encoder.config().input)) image_size = img->height;
            ds = detail::load_stage1_dataset(o.dataset, {}, image_size);
            manifest.add_input_dir(o.dataset);
        }
        PhaseTimer t(manifest, "embed");
        const EmbeddingMatrix emb = student::embed(cp.encoder, ds.inputs, ds.ids);
        const student::Split split = student::group_split(ds, o.val_fraction, o.seed);
        if (split.val.empty()) throw ConfigError("probe: the validation split is empty; raise --val-fraction");
        train_emb = gather(emb.values(), split.train);
        val_emb = gather(emb.values(), split.val);
        train_labels = gather(ds.labels, split.train);
        val_labels = gather(ds.labels, split.val);
        class_names = ds.class_names;
    } else {
        detail::require_exists(o.train_emb, "--train-emb");
        detail::require_exists(o.train_labels, "--train-labels");
        detail::require_exists(o.val_emb, "--val-emb");
        detail::require_exists(o.val_labels, "--val-labels");
        PhaseTimer t(manifest, "load");
        const EmbeddingMatrix tr = io::read_embeddings(o.train_emb);
        const EmbeddingMatrix va = io::read_embeddings(o.val_emb);
        if (tr.dim() != va.dim())
            throw ShapeMismatchError("probe: train embeddings are " + std::to_string(tr.dim()) +
                                     "-wide, validation " + std::to_string(va.dim()) + "-wide");
        const auto tr_names = labels_for(tr, read_label_map(o.train_labels), o.train_labels);
        const auto va_names = labels_for(va, read_label_map(o.val_labels), o.val_labels);
        std::set<std::string> names(tr_names.begin(), tr_names.end());
        names.insert(va_names.begin(), va_names.end());
        class_names.assign(names.begin(), names.end());
        auto index = [&](const std::string& n) {
            return static_cast<int>(std::lower_bound(class_names.begin(), class_names.end(), n) - class_names.begin());
        };
        for (const auto& n : tr_names) train_labels.push_back(index(n));
        for (const auto& n : va_names) val_labels.push_back(index(n));
        train_emb = tr.values();
        val_emb = va.values();
        for (const auto* p : {&o.train_emb, &o.train_labels, &o.val_emb, &o.val_labels}) manifest.add_input(*p);
    }

    json report;
    {
        PhaseTimer t(manifest, "probe");
        report = detail::probe_report(train_emb, train_labels, val_emb, val_labels, o.k);
    }
    report["classes"] = class_names;
    report["seed"] = o.seed;
    detail::ensure_dir(o.out);
    detail::write_json(fs::path(o.out) / "probe.json", report);
    write_manifest(o.out, manifest);
    report["command"] = "probe";
    report["out"] = o.out;
    return report;
}

}  // namespace rd::cli
