#include "common.hpp"

#include <algorithm>
#include <cstdlib>

#ifndef RELDISTILL_VERSION
#define RELDISTILL_VERSION "0.0.0"
#endif

namespace rd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string version() { return RELDISTILL_VERSION; }

void RunManifest::add_input(const fs::path& path) {
    if (!fs::is_regular_file(path)) throw IOError("input '" + path.string() + "' is not a file");
    inputs.push_back({path.string(), io::hex32(io::crc32_file(path)), fs::file_size(path), 1});
}

void RunManifest::add_input_dir(const fs::path& dir, const std::string& ext) {
    if (!fs::is_directory(dir)) throw IOError("input '" + dir.string() + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        if (!ext.empty() && entry.path().extension() != ext) continue;
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    // Digest of "name:crc" lines so renames change it too.
    std::string digest;
    std::uintmax_t bytes = 0;
    for (const auto& f : files) {
        digest += f.filename().string() + ":" + io::hex32(io::crc32_file(f)) + "\n";
        bytes += fs::file_size(f);
    }
    inputs.push_back({dir.string(), io::hex32(io::crc32(digest)), bytes, static_cast<int>(files.size())});
}

json to_json(const RunManifest& m) {
    json inputs = json::array();
    for (const auto& in : m.inputs)
        inputs.push_back({{"path", in.path}, {"crc32", in.crc32}, {"bytes", in.bytes}, {"files", in.files}});
    json phases = json::array();
    for (const auto& p : m.phases) phases.push_back({{"name", p.name}, {"seconds", p.seconds}});
    return {{"tool", m.tool}, {"version", m.version}, {"command", m.command},
            {"options", m.options}, {"inputs", inputs}, {"phases", phases}};
}

RunManifest run_manifest_from_json(const json& j) {
    if (!j.is_object() || !j.contains("command") || !j.contains("options"))
        throw FormatError("run manifest needs 'command' and 'options'");
    RunManifest m;
    m.tool = j.value("tool", std::string(kToolName));
    m.version = j.value("version", std::string());
    m.command = j.at("command").get<std::string>();
    m.options = j.at("options");
    for (const auto& in : j.value("inputs", json::array()))
        m.inputs.push_back({in.at("path").get<std::string>(), in.at("crc32").get<std::string>(),
                            in.value("bytes", std::uintmax_t{0}), in.value("files", 1)});
    for (const auto& p : j.value("phases", json::array()))
        m.phases.push_back({p.at("name").get<std::string>(), p.value("seconds", 0.0)});
    return m;
}

void write_manifest(const fs::path& out_dir, const RunManifest& m) {
    detail::ensure_dir(out_dir);
    detail::write_json(out_dir / "run_manifest.json", to_json(m));
}

PhaseTimer::PhaseTimer(RunManifest& manifest, std::string name)
    : manifest_(manifest), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}

PhaseTimer::~PhaseTimer() { manifest_.phases.push_back({name_, detail::seconds_since(start_)}); }

namespace detail {

std::string cache_dir() {
    const char* v = std::getenv(kCacheEnv);
    return v ? std::string(v) : std::string();
}

fs::path resolve_teacher_manifest(const std::string& given) {
    fs::path p = given;
    if (p.empty()) {
        const std::string cache = cache_dir();
        if (cache.empty())
            throw ConfigError(std::string("no teachers given: pass --teachers or set ") + kCacheEnv);
        p = cache;
    }
    if (fs::is_directory(p)) p /= "manifest.json";
    if (!fs::exists(p)) throw IOError("teacher manifest '" + p.string() + "' does not exist");
    return p;
}

}  // namespace detail

}  // namespace rd::cli
