#pragma once

// Frozen teacher embedding sources. Teachers are consumed as precomputed
// embedding tables keyed by sample id; their widths may all differ.

#include "reldistill/embedding.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

namespace rd::teachers {

struct PrecomputedSource {
    std::filesystem::path path;
};

struct SyntheticSource {
    std::uint64_t seed = 0;
    double noise_scale = 0.0;
};

struct TeacherSpec {
    std::string teacher_id;
    int dim = 0;
    std::variant<PrecomputedSource, SyntheticSource> source;
};

struct LoadedTeacher {
    TeacherSpec spec;
    EmbeddingMatrix embeddings;
};

// Reads an MDEMB1 file plus its .ids sidecar. The teacher id defaults to the
// file stem.
LoadedTeacher load_teacher_embeddings(const std::filesystem::path& path, std::string teacher_id = {});

class TeacherEnsemble {
public:
    TeacherEnsemble() = default;
    // Throws ConfigError on duplicate ids / empty list and MissingSampleError
    // when the teachers do not cover the identical sample-id set.
    explicit TeacherEnsemble(std::vector<LoadedTeacher> teachers);

    std::size_t size() const noexcept { return teachers_.size(); }
    bool empty() const noexcept { return teachers_.empty(); }
    const TeacherSpec& spec(std::size_t k) const { return teachers_.at(k).spec; }
    const EmbeddingMatrix& embeddings(std::size_t k) const { return teachers_.at(k).embeddings; }
    bool contains(const std::string& sample_id) const;

    // Rows for `sample_ids` in exactly that order from every teacher;
    // repeated ids duplicate rows.
    std::vector<Matrix> batch_views(std::span<const std::string> sample_ids) const;

private:
    std::vector<LoadedTeacher> teachers_;
    std::vector<std::unordered_map<std::string, Eigen::Index>> index_;
};

// EmbeddingMatrix-returning form. Duplicate ids in the request are legal;
// the returned matrices then carry "<id>#<n>" suffixes for repeats.
std::vector<EmbeddingMatrix> batch_teacher_views(const TeacherEnsemble& ensemble,
                                                 std::span<const std::string> sample_ids);

struct SynthTeacherOptions {
    double noise_scale = 0.0;
    std::uint64_t seed = 0;
    // When false the map is the canonical embedding [I; 0] instead of a
    // random orthonormal-column matrix.
    bool random_rotation = true;
    std::string id_prefix = "teacher";
};

// Teacher k row i = Q_k latent_i + noise, Q_k (d_k x m) with orthonormal
// columns. ConfigError if d_k < m with zero noise.
TeacherEnsemble synth_teacher_ensemble(const EmbeddingMatrix& latents, std::span<const int> dims,
                                       const SynthTeacherOptions& options);

// manifest.json: [{teacher_id, dim, file, ids_file}, ...], file paths
// relative to the manifest's directory.
void write_ensemble(const std::filesystem::path& dir, const TeacherEnsemble& ensemble);
TeacherEnsemble load_ensemble(const std::filesystem::path& manifest_path);

}  // namespace rd::teachers
