#pragma once

#include "reldistill/embedding.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace rd::io {

namespace fs = std::filesystem;

// ---- MDEMB1 ---------------------------------------------------------------
//
// Little-endian layout:
//   magic "MDEMB1\0\0" (8) | version u32 = 1 | N u32 | d u32 | dtype u8
//   (0 = fp32, 1 = fp64) | reserved 3 bytes | N*d values, row-major |
//   CRC32 of the payload bytes (u32)
// Sample ids live in a sidecar "<stem>.ids", one per line, exactly N lines.

enum class DType : std::uint8_t { fp32 = 0, fp64 = 1 };

inline constexpr std::size_t kMdembHeaderSize = 24;

std::string encode_mdemb(const Matrix& values, DType dtype);
// FormatError on bad magic/version/dtype, IntegrityError on truncation or
// checksum mismatch, NonFiniteError on NaN/inf payload values.
Matrix decode_mdemb(std::string_view bytes, const std::string& origin = "<memory>");

void write_mdemb(const fs::path& path, const Matrix& values, DType dtype = DType::fp32);
Matrix read_mdemb(const fs::path& path);

fs::path ids_path_for(const fs::path& emb_path);

// Writes <path> and its .ids sidecar.
void write_embeddings(const fs::path& path, const EmbeddingMatrix& embeddings, DType dtype = DType::fp32);
// Reads <path> and its sidecar. When the sidecar is missing and
// require_ids is false, ids are "0".."N-1".
EmbeddingMatrix read_embeddings(const fs::path& path, bool require_ids = true);

// ---- files -----------------------------------------------------------------

std::string read_file(const fs::path& path);
// Writes to a sibling temporary and renames over the target.
void write_file_atomic(const fs::path& path, std::string_view contents);
std::uint32_t crc32(std::string_view bytes);
std::uint32_t crc32_file(const fs::path& path);
std::string hex32(std::uint32_t value);

// ---- CSV -------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Column index by name, or -1.
    int column(std::string_view name) const;
    // Column index by name; ConfigError naming `origin` if missing.
    std::size_t require_column(std::string_view name, const std::string& origin) const;
};

// RFC 4180-style: quoted fields may contain commas, quotes ("") and newlines.
CsvTable parse_csv(std::string_view text, const std::string& origin = "<csv>");
CsvTable read_csv(const fs::path& path);
std::string format_csv(const CsvTable& table);
std::string csv_escape(std::string_view field);

// Shortest round-trip representation ("%.17g").
std::string format_double(double value);
double parse_double(std::string_view text, const std::string& what);
long long parse_int(std::string_view text, const std::string& what);

std::vector<std::string> split(std::string_view text, char sep);

}  // namespace rd::io
