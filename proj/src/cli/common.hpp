#pragma once

// Helpers shared by the command implementations.

#include "reldistill/cli.hpp"
#include "reldistill/dataset.hpp"
#include "reldistill/errors.hpp"
#include "reldistill/io.hpp"

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rd::cli::detail {

namespace fs = std::filesystem;

inline void require_out(const std::string& out, const char* command) {
    if (out.empty()) throw ConfigError(std::string(command) + ": --out is required");
}

inline void require_exists(const fs::path& path, const char* flag) {
    if (path.empty()) throw ConfigError(std::string(flag) + " is required");
    if (!fs::exists(path)) throw IOError(std::string(flag) + ": '" + path.string() + "' does not exist");
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IOError("cannot create '" + dir.string() + "': " + ec.message());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    io::write_file_atomic(path, j.dump(2) + "\n");
}

// $MORPHDISTILL_CACHE or empty.
std::string cache_dir();

// A teacher ensemble manifest path from a file, a directory, or the cache.
fs::path resolve_teacher_manifest(const std::string& given);

// <dir>/features.emb + labels.csv, or an image folder.
student::LabeledDataset load_stage1_dataset(const std::string& dataset_dir, const std::string& images,
                                            int image_size);

// KNN sweep and linear probe of frozen embeddings on a train/val split.
nlohmann::json probe_report(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& val_emb,
                            std::span<const int> val_labels, std::span<const int> ks);

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace rd::cli::detail
