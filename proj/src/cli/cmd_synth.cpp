#include "common.hpp"

#include "reldistill/cohort.hpp"
#include "reldistill/dataset.hpp"
#include "reldistill/rng.hpp"
#include "reldistill/teachers.hpp"

#include <cmath>
#include <cstdio>

namespace rd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string padded(const char* prefix, int i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%0*d", prefix, width, i);
    return buf;
}

struct PlantedLatents {
    EmbeddingMatrix latents;
    std::vector<int> labels;
};

// Class-mixture latents: class means drawn at scale class_separation,
// samples scattered around them with within_sd.
PlantedLatents planted_latents(const SynthOptions& o, Rng& rng) {
    if (o.n < 2) throw ConfigError("--n must be at least 2");
    if (o.latent_dim < 1) throw ConfigError("--latent-dim must be positive");
    if (o.classes < 1) throw ConfigError("--classes must be positive");
    if (!(o.within_sd >= 0.0) || !(o.class_separation >= 0.0))
        throw ConfigError("--within-sd and --class-separation must be non-negative");
    const Matrix means = rng.normal_matrix(o.classes, o.latent_dim, o.class_separation);
    Matrix z(o.n, o.latent_dim);
    std::vector<int> labels(static_cast<std::size_t>(o.n));
    std::vector<std::string> ids;
    for (int i = 0; i < o.n; ++i) {
        const int c = i % o.classes;
        labels[static_cast<std::size_t>(i)] = c;
        z.row(i) = means.row(c) + rng.normal_matrix(1, o.latent_dim, o.within_sd);
        ids.push_back(padded("x", i + 1, 5));
    }
    return {EmbeddingMatrix(std::move(z), std::move(ids)), std::move(labels)};
}

void check_dims(const std::vector<int>& dims) {
    if (dims.empty()) throw ConfigError("--dims: at least one teacher dimension is required");
    for (int d : dims)
        if (d < 1) throw ConfigError("--dims: teacher dimensions must be positive, got " + std::to_string(d));
}

teachers::TeacherEnsemble make_teachers(const SynthOptions& o, const EmbeddingMatrix& latents) {
    teachers::SynthTeacherOptions to;
    to.noise_scale = o.noise;
    to.seed = o.seed;
    to.random_rotation = o.rotate;
    try {
        return teachers::synth_teacher_ensemble(latents, o.dims, to);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("--dims: ") + e.what());
    }
}

}  // namespace

json cmd_synth(const SynthOptions& o) {
    RunManifest manifest;
    manifest.version = version();
    manifest.command = "synth";
    manifest.options = o;

    json summary = {{"command", "synth"}, {"kind", o.kind}};
    fs::path out = o.out;

    if (o.kind == "teachers") {
        check_dims(o.dims);
        if (out.empty()) out = detail::cache_dir();
        if (out.empty()) throw ConfigError(std::string("synth teachers: pass --out or set ") + kCacheEnv);
        Rng rng(o.seed);
        teachers::TeacherEnsemble ensemble;
        {
            PhaseTimer t(manifest, "generate");
            const PlantedLatents planted = planted_latents(o, rng);
            ensemble = make_teachers(o, planted.latents);
        }
        {
            PhaseTimer t(manifest, "write");
            detail::ensure_dir(out);
            teachers::write_ensemble(out, ensemble);
        }
        json files = json::array();
        for (std::size_t k = 0; k < ensemble.size(); ++k) files.push_back(ensemble.spec(k).teacher_id + ".emb");
        summary["teachers"] = files;
        summary["manifest"] = (out / "manifest.json").string();
    } else if (o.kind == "dataset") {
        check_dims(o.dims);
        detail::require_out(o.out, "synth dataset");
        if (o.input_dim < 1) throw ConfigError("--input-dim must be positive");
        if (o.groups < 0) throw ConfigError("--groups must be non-negative");
        Rng rng(o.seed);
        student::LabeledDataset ds;
        teachers::TeacherEnsemble ensemble;
        {
            PhaseTimer t(manifest, "generate");
            Rng latent_rng = rng.split(1);
            const PlantedLatents planted = planted_latents(o, latent_rng);
            ensemble = make_teachers(o, planted.latents);
            // Students see a noisy random linear view of the latent.
            Rng view_rng = rng.split(2);
            const Matrix A = view_rng.normal_matrix(o.latent_dim, o.input_dim, 1.0 / std::sqrt(o.latent_dim));
            ds.inputs = planted.latents.values() * A +
                        view_rng.normal_matrix(o.n, o.input_dim, o.input_noise);
            ds.ids = planted.latents.ids();
            ds.labels = planted.labels;
            for (int c = 0; c < o.classes; ++c) ds.class_names.push_back(padded("c", c, 2));
            if (o.groups > 0)
                for (int i = 0; i < o.n; ++i) ds.groups.push_back(padded("g", i % o.groups, 3));
            ds.input = student::VectorInput{o.input_dim};
        }
        {
            PhaseTimer t(manifest, "write");
            detail::ensure_dir(out / "dataset");
            student::write_vector_dataset(out / "dataset", ds);
            detail::ensure_dir(out / "teachers");
            teachers::write_ensemble(out / "teachers", ensemble);
        }
        summary["dataset"] = (out / "dataset").string();
        summary["teachers"] = (out / "teachers" / "manifest.json").string();
        summary["n"] = o.n;
    } else if (o.kind == "cohort") {
        detail::require_out(o.out, "synth cohort");
        cohort::SynthCohortConfig cfg;
        cfg.signal_strength = o.signal_strength;
        cfg.patches_per_bag = o.patches;
        cfg.censoring_rate = o.censoring;
        cfg.horizon_months = o.horizon;
        cfg.feature_dim = o.feature_dim;
        cfg.signal_fraction = o.signal_fraction;
        cohort::SynthCohort c;
        {
            PhaseTimer t(manifest, "generate");
            c = cohort::synth_cohort(o.patients, cfg, o.seed);
        }
        {
            PhaseTimer t(manifest, "write");
            cohort::write_cohort(out, c);
        }
        int positives = 0;
        for (const auto& p : c.patients) positives += p.outcome.label;
        summary["patients"] = c.patients.size();
        summary["slides"] = c.bags.size();
        summary["positives"] = positives;
        summary["cohort"] = (out / "cohort.csv").string();
    } else {
        throw ConfigError("synth: kind must be teachers, cohort or dataset, got '" + o.kind + "'");
    }

    write_manifest(out, manifest);
    summary["out"] = out.string();
    return summary;
}

}  // namespace rd::cli
