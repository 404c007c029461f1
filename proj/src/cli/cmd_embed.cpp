#include "common.hpp"

#include "reldistill/mil.hpp"
#include "reldistill/student.hpp"

#include <chrono>

namespace rd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Appends one timing row, creating the file with a header when needed.
void append_bench_row(const fs::path& path, const std::vector<std::string>& row) {
    io::CsvTable table;
    if (fs::exists(path)) {
        table = io::read_csv(path);
    } else {
        table.header = {"model", "mode", "n_samples", "batch_size", "seconds", "seconds_per_1k"};
    }
    table.rows.push_back(row);
    io::write_file_atomic(path, io::format_csv(table));
}

std::vector<std::string> index_ids(Eigen::Index n) {
    std::vector<std::string> ids;
    for (Eigen::Index i = 0; i < n; ++i) ids.push_back(std::to_string(i));
    return ids;
}

std::string model_name(const fs::path& checkpoint) {
    fs::path p = checkpoint;
    if (p.filename().empty()) p = p.parent_path();
    return p.filename().string();
}

}  // namespace

json cmd_embed(const EmbedOptions& o) {
    detail::require_out(o.out, "embed");
    detail::require_exists(o.checkpoint, "--checkpoint");
    if (o.batch_size < 1) throw ConfigError("--batch-size must be positive");
    const bool bag_mode = !o.cohort.empty();
    if (bag_mode && (!o.dataset.empty() || !o.images.empty()))
        throw ConfigError("embed: --cohort (bag mode) excludes --dataset and --images");
    if (!bag_mode && o.dataset.empty() && o.images.empty())
        throw ConfigError("embed: pass --dataset, --images or --cohort");

    RunManifest manifest;
    manifest.version = version();
    manifest.command = "embed";
    manifest.options = o;

    student::Checkpoint cp;
    {
        PhaseTimer t(manifest, "load-checkpoint");
        cp = student::load_checkpoint(o.checkpoint);
        manifest.add_input_dir(o.checkpoint);
    }
    const student::Encoder& encoder = cp.encoder;
    const fs::path out = o.out;
    detail::ensure_dir(out);
    json summary = {{"command", "embed"}, {"out", out.string()}};

    long long n_samples = 0;
    double seconds = 0.0;
    if (bag_mode) {
        detail::require_exists(o.cohort, "--cohort");
        const fs::path bag_dir = o.bags.empty() ? fs::path(o.cohort).parent_path() / "bags" : fs::path(o.bags);
        detail::require_exists(bag_dir, "--bags");
        manifest.add_input(o.cohort);
        manifest.add_input_dir(bag_dir, ".emb");
        const io::CsvTable table = io::read_csv(o.cohort);
        const std::size_t sc = table.require_column("slide_id", o.cohort);
        const std::size_t pc = table.require_column("patient_id", o.cohort);
        PhaseTimer t(manifest, "embed");
        for (const auto& row : table.rows) {
            mil::Bag bag;
            bag.slide_id = row[sc];
            bag.patient_id = row[pc];
            const Matrix patches = mil::read_bag_features(bag_dir, bag.slide_id);
            const auto start = std::chrono::steady_clock::now();
            bag.features = student::embed(encoder, patches, index_ids(patches.rows()), o.batch_size).values();
            seconds += detail::seconds_since(start);
            n_samples += patches.rows();
            mil::write_bag_features(out / "bags", bag);
        }
        // The cohort table travels with the embedded bags.
        io::write_file_atomic(out / "cohort.csv", io::read_file(o.cohort));
        summary["slides"] = table.rows.size();
        summary["bags"] = (out / "bags").string();
    } else {
        Matrix inputs;
        std::vector<std::string> ids;
        {
            PhaseTimer t(manifest, "load-inputs");
            if (!o.images.empty()) {
                const auto* img = std::get_if<student::ImageInput>(&encoder.config().input);
                if (!img) throw ShapeError("embed: the checkpoint takes vector inputs, not images");
                const student::LabeledDataset ds = detail::load_stage1_dataset({}, o.images, img->height);
                inputs = ds.inputs;
                ids = ds.ids;
            } else {
                detail::require_exists(o.dataset, "--dataset");
                fs::path features = o.dataset;
                if (fs::is_directory(features)) features /= "features.emb";
                manifest.add_input(features);
                EmbeddingMatrix m = io::read_embeddings(features, false);
                inputs = m.values();
                ids = m.ids();
            }
        }
        PhaseTimer t(manifest, "embed");
        const auto start = std::chrono::steady_clock::now();
        const EmbeddingMatrix emb = student::embed(encoder, inputs, ids, o.batch_size);
        seconds = detail::seconds_since(start);
        n_samples = emb.rows();
        io::write_embeddings(out / "embeddings.emb", emb);
        summary["embeddings"] = (out / "embeddings.emb").string();
        summary["n"] = n_samples;
    }

    const double per_1k = n_samples > 0 ? seconds * 1000.0 / static_cast<double>(n_samples) : 0.0;
    const fs::path bench = o.bench_csv.empty() ? out / "bench.csv" : fs::path(o.bench_csv);
    append_bench_row(bench, {model_name(o.checkpoint), bag_mode ? "bags" : "flat", std::to_string(n_samples),
                             std::to_string(o.batch_size), io::format_double(seconds), io::format_double(per_1k)});
    write_manifest(out, manifest);
    summary["seconds_per_1k"] = per_1k;
    summary["bench_csv"] = bench.string();
    return summary;
}

}  // namespace rd::cli
