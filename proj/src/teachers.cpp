#include "reldistill/teachers.hpp"

#include "reldistill/errors.hpp"
#include "reldistill/io.hpp"
#include "reldistill/rng.hpp"

#include <json.hpp>

#include <unordered_set>

namespace rd::teachers {

namespace fs = std::filesystem;
using json = nlohmann::json;

LoadedTeacher load_teacher_embeddings(const fs::path& path, std::string teacher_id) {
    LoadedTeacher t{TeacherSpec{}, io::read_embeddings(path, true)};
    t.spec.teacher_id = teacher_id.empty() ? path.stem().string() : std::move(teacher_id);
    t.spec.dim = static_cast<int>(t.embeddings.dim());
    t.spec.source = PrecomputedSource{path};
    return t;
}

TeacherEnsemble::TeacherEnsemble(std::vector<LoadedTeacher> teachers) : teachers_(std::move(teachers)) {
    if (teachers_.empty()) throw ConfigError("teacher ensemble is empty");
    std::unordered_set<std::string> names;
    for (const auto& t : teachers_) {
        if (!names.insert(t.spec.teacher_id).second) {
            throw ConfigError("duplicate teacher id '" + t.spec.teacher_id + "'");
        }
        if (t.spec.dim != t.embeddings.dim()) {
            throw ConfigError("teacher '" + t.spec.teacher_id + "' declares dim " + std::to_string(t.spec.dim) +
                              " but stores " + std::to_string(t.embeddings.dim()));
        }
    }
    index_.resize(teachers_.size());
    for (std::size_t k = 0; k < teachers_.size(); ++k) {
        const auto& ids = teachers_[k].embeddings.ids();
        for (std::size_t r = 0; r < ids.size(); ++r) index_[k].emplace(ids[r], static_cast<Eigen::Index>(r));
    }
    const auto& reference = teachers_.front();
    for (std::size_t k = 1; k < teachers_.size(); ++k) {
        if (index_[k].size() != index_[0].size()) {
            throw MissingSampleError("teacher '" + teachers_[k].spec.teacher_id + "' covers " +
                                     std::to_string(index_[k].size()) + " samples, '" + reference.spec.teacher_id +
                                     "' covers " + std::to_string(index_[0].size()));
        }
        for (const auto& id : reference.embeddings.ids()) {
            if (!index_[k].contains(id)) {
                throw MissingSampleError("sample '" + id + "' missing from teacher '" +
                                         teachers_[k].spec.teacher_id + "'");
            }
        }
    }
}

bool TeacherEnsemble::contains(const std::string& sample_id) const {
    return !index_.empty() && index_.front().contains(sample_id);
}

std::vector<Matrix> TeacherEnsemble::batch_views(std::span<const std::string> sample_ids) const {
    std::vector<Matrix> views;
    views.reserve(teachers_.size());
    for (std::size_t k = 0; k < teachers_.size(); ++k) {
        const Matrix& source = teachers_[k].embeddings.values();
        Matrix view(static_cast<Eigen::Index>(sample_ids.size()), source.cols());
        for (std::size_t i = 0; i < sample_ids.size(); ++i) {
            const auto it = index_[k].find(sample_ids[i]);
            if (it == index_[k].end()) {
                throw MissingSampleError("sample '" + sample_ids[i] + "' missing from teacher '" +
                                         teachers_[k].spec.teacher_id + "'");
            }
            view.row(static_cast<Eigen::Index>(i)) = source.row(it->second);
        }
        views.push_back(std::move(view));
    }
    return views;
}

std::vector<EmbeddingMatrix> batch_teacher_views(const TeacherEnsemble& ensemble,
                                                 std::span<const std::string> sample_ids) {
    std::vector<Matrix> views = ensemble.batch_views(sample_ids);
    std::vector<std::string> ids;
    std::unordered_map<std::string, int> repeats;
    for (const auto& id : sample_ids) {
        const int n = repeats[id]++;
        ids.push_back(n == 0 ? id : id + "#" + std::to_string(n));
    }
    std::vector<EmbeddingMatrix> out;
    for (auto& v : views) out.emplace_back(std::move(v), ids);
    return out;
}

namespace {

// d x m matrix with orthonormal columns (or orthonormal rows when d < m).
Matrix random_orthonormal(Eigen::Index d, Eigen::Index m, Rng& rng) {
    if (d >= m) {
        const Matrix g = rng.normal_matrix(d, m);
        Eigen::HouseholderQR<Matrix> qr(g);
        return qr.householderQ() * Matrix::Identity(d, m);
    }
    const Matrix g = rng.normal_matrix(m, d);
    Eigen::HouseholderQR<Matrix> qr(g);
    return (qr.householderQ() * Matrix::Identity(m, d)).transpose();
}

}  // namespace

TeacherEnsemble synth_teacher_ensemble(const EmbeddingMatrix& latents, std::span<const int> dims,
                                       const SynthTeacherOptions& options) {
    if (dims.empty()) throw ConfigError("synthetic ensemble needs at least one teacher dimension");
    if (options.noise_scale < 0.0) throw ConfigError("noise_scale must be nonnegative");
    const Eigen::Index m = latents.dim();
    Rng rng(options.seed);
    std::vector<LoadedTeacher> teachers;
    for (std::size_t k = 0; k < dims.size(); ++k) {
        const int d = dims[k];
        if (d <= 0) throw ConfigError("teacher dimension must be positive, got " + std::to_string(d));
        if (d < m && options.noise_scale == 0.0) {
            throw ConfigError("teacher dimension " + std::to_string(d) + " is below the latent dimension " +
                              std::to_string(m) + "; no cosine-preserving map exists without noise");
        }
        Rng teacher_rng = rng.split(k);
        Matrix q = options.random_rotation ? random_orthonormal(d, m, teacher_rng) : Matrix::Identity(d, m);
        Matrix values = latents.values() * q.transpose();
        if (options.noise_scale > 0.0) {
            values += teacher_rng.normal_matrix(values.rows(), values.cols(), options.noise_scale);
        }
        TeacherSpec spec;
        spec.teacher_id = options.id_prefix + std::to_string(k);
        spec.dim = d;
        spec.source = SyntheticSource{options.seed, options.noise_scale};
        teachers.push_back(LoadedTeacher{spec, EmbeddingMatrix(std::move(values), latents.ids())});
    }
    return TeacherEnsemble(std::move(teachers));
}

void write_ensemble(const fs::path& dir, const TeacherEnsemble& ensemble) {
    fs::create_directories(dir);
    json manifest = json::array();
    for (std::size_t k = 0; k < ensemble.size(); ++k) {
        const auto& spec = ensemble.spec(k);
        const std::string file = spec.teacher_id + ".emb";
        io::write_embeddings(dir / file, ensemble.embeddings(k), io::DType::fp32);
        manifest.push_back({{"teacher_id", spec.teacher_id},
                            {"dim", spec.dim},
                            {"file", file},
                            {"ids_file", spec.teacher_id + ".ids"}});
    }
    io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

TeacherEnsemble load_ensemble(const fs::path& manifest_path) {
    json manifest;
    try {
        manifest = json::parse(io::read_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    if (!manifest.is_array()) throw FormatError(manifest_path.string() + ": manifest must be a JSON array");
    const fs::path base = manifest_path.parent_path();
    std::vector<LoadedTeacher> teachers;
    for (const auto& entry : manifest) {
        const std::string id = entry.at("teacher_id").get<std::string>();
        const fs::path file = base / entry.at("file").get<std::string>();
        const fs::path ids_file =
            entry.contains("ids_file") ? base / entry.at("ids_file").get<std::string>() : io::ids_path_for(file);
        Matrix values = io::read_mdemb(file);
        std::vector<std::string> ids = io::split(io::read_file(ids_file), '\n');
        if (!ids.empty() && ids.back().empty()) ids.pop_back();
        if (static_cast<Eigen::Index>(ids.size()) != values.rows()) {
            throw IntegrityError(ids_file.string() + ": " + std::to_string(ids.size()) + " ids for " +
                                 std::to_string(values.rows()) + " rows in " + file.string());
        }
        LoadedTeacher t{TeacherSpec{id, static_cast<int>(values.cols()), PrecomputedSource{file}},
                        EmbeddingMatrix(std::move(values), std::move(ids))};
        const int declared = entry.at("dim").get<int>();
        if (declared != t.spec.dim) {
            throw IntegrityError(file.string() + ": manifest declares dim " + std::to_string(declared) +
                                 ", file has " + std::to_string(t.spec.dim));
        }
        teachers.push_back(std::move(t));
    }
    return TeacherEnsemble(std::move(teachers));
}

}  // namespace rd::teachers
