#include "reldistill/io.hpp"

#include "reldistill/errors.hpp"

#include <zlib.h>

#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rd::io {

namespace {

constexpr std::array<char, 8> kMagic = {'M', 'D', 'E', 'M', 'B', '1', '\0', '\0'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    }
    return v;
}

std::uint64_t get_u64(std::string_view bytes, std::size_t offset) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    }
    return v;
}

}  // namespace

std::uint32_t crc32(std::string_view bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks for very large payloads
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
        crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + offset), static_cast<uInt>(chunk));
        offset += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::string encode_mdemb(const Matrix& values, DType dtype) {
    require_finite(values, "MDEMB1 payload");
    const std::size_t n = static_cast<std::size_t>(values.rows());
    const std::size_t d = static_cast<std::size_t>(values.cols());
    const std::size_t width = dtype == DType::fp32 ? 4 : 8;

    std::string out;
    out.reserve(kMdembHeaderSize + n * d * width + 4);
    out.append(kMagic.data(), kMagic.size());
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(n));
    put_u32(out, static_cast<std::uint32_t>(d));
    out.push_back(static_cast<char>(dtype));
    out.append(3, '\0');

    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            const double v = values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
            if (dtype == DType::fp32) {
                const float f = static_cast<float>(v);
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                put_u32(out, bits);
            } else {
                std::uint64_t bits;
                std::memcpy(&bits, &v, 8);
                put_u64(out, bits);
            }
        }
    }
    put_u32(out, crc32(std::string_view(out).substr(kMdembHeaderSize)));
    return out;
}

Matrix decode_mdemb(std::string_view bytes, const std::string& origin) {
    if (bytes.size() < kMdembHeaderSize) {
        throw FormatError(origin + ": too short for an MDEMB1 header");
    }
    if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
        throw FormatError(origin + ": bad magic (not an MDEMB1 file)");
    }
    const std::uint32_t version = get_u32(bytes, 8);
    if (version != kVersion) {
        throw FormatError(origin + ": unsupported MDEMB1 version " + std::to_string(version));
    }
    const std::uint64_t n = get_u32(bytes, 12);
    const std::uint64_t d = get_u32(bytes, 16);
    const auto dtype_byte = static_cast<std::uint8_t>(bytes[20]);
    if (dtype_byte > 1) {
        throw FormatError(origin + ": unknown dtype code " + std::to_string(dtype_byte));
    }
    const DType dtype = static_cast<DType>(dtype_byte);
    const std::uint64_t width = dtype == DType::fp32 ? 4 : 8;
    const std::uint64_t payload = n * d * width;
    if (bytes.size() != kMdembHeaderSize + payload + 4) {
        throw IntegrityError(origin + ": expected " + std::to_string(kMdembHeaderSize + payload + 4) +
                             " bytes for " + std::to_string(n) + "x" + std::to_string(d) + ", found " +
                             std::to_string(bytes.size()));
    }
    const std::string_view body = bytes.substr(kMdembHeaderSize, payload);
    const std::uint32_t stored = get_u32(bytes, kMdembHeaderSize + payload);
    if (crc32(body) != stored) {
        throw IntegrityError(origin + ": payload checksum mismatch");
    }

    Matrix values(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    std::size_t offset = kMdembHeaderSize;
    for (std::uint64_t r = 0; r < n; ++r) {
        for (std::uint64_t c = 0; c < d; ++c) {
            double v;
            if (dtype == DType::fp32) {
                const std::uint32_t bits = get_u32(bytes, offset);
                float f;
                std::memcpy(&f, &bits, 4);
                v = f;
            } else {
                const std::uint64_t bits = get_u64(bytes, offset);
                std::memcpy(&v, &bits, 8);
            }
            offset += width;
            if (!std::isfinite(v)) {
                throw NonFiniteError(origin + ": non-finite value at row " + std::to_string(r) + ", column " +
                                     std::to_string(c));
            }
            values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
        }
    }
    return values;
}

void write_mdemb(const fs::path& path, const Matrix& values, DType dtype) {
    write_file_atomic(path, encode_mdemb(values, dtype));
}

Matrix read_mdemb(const fs::path& path) { return decode_mdemb(read_file(path), path.string()); }

fs::path ids_path_for(const fs::path& emb_path) {
    fs::path p = emb_path;
    p.replace_extension(".ids");
    return p;
}

void write_embeddings(const fs::path& path, const EmbeddingMatrix& embeddings, DType dtype) {
    write_mdemb(path, embeddings.values(), dtype);
    std::string ids;
    for (const auto& id : embeddings.ids()) {
        if (id.find('\n') != std::string::npos) {
            throw FormatError("sample id contains a newline: " + id);
        }
        ids += id;
        ids += '\n';
    }
    write_file_atomic(ids_path_for(path), ids);
}

EmbeddingMatrix read_embeddings(const fs::path& path, bool require_ids) {
    Matrix values = read_mdemb(path);
    const fs::path ids_path = ids_path_for(path);
    if (!fs::exists(ids_path)) {
        if (require_ids) throw IOError(ids_path.string() + ": missing sample-id sidecar");
        return EmbeddingMatrix::with_index_ids(std::move(values));
    }
    const std::string text = read_file(ids_path);
    std::vector<std::string> ids;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        ids.push_back(std::move(line));
        start = end + 1;
    }
    if (static_cast<Eigen::Index>(ids.size()) != values.rows()) {
        throw IntegrityError(ids_path.string() + ": " + std::to_string(ids.size()) + " ids for " +
                             std::to_string(values.rows()) + " rows");
    }
    return EmbeddingMatrix(std::move(values), std::move(ids));
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IOError("cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw IOError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw IOError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

std::uint32_t crc32_file(const fs::path& path) { return crc32(read_file(path)); }

std::string hex32(std::uint32_t value) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", value);
    return buf;
}

int CsvTable::column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    return -1;
}

std::size_t CsvTable::require_column(std::string_view name, const std::string& origin) const {
    const int idx = column(name);
    if (idx < 0) throw ConfigError(origin + ": missing column '" + std::string(name) + "'");
    return static_cast<std::size_t>(idx);
}

CsvTable parse_csv(std::string_view text, const std::string& origin) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> record;
    std::string field;
    bool quoted = false;
    bool field_started = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(ch);
            }
            continue;
        }
        switch (ch) {
            case '"':
                quoted = true;
                field_started = true;
                break;
            case ',':
                record.push_back(std::move(field));
                field.clear();
                field_started = true;
                break;
            case '\r':
                break;
            case '\n':
                if (field_started || !field.empty() || !record.empty()) {
                    record.push_back(std::move(field));
                    records.push_back(std::move(record));
                }
                record.clear();
                field.clear();
                field_started = false;
                break;
            default:
                field.push_back(ch);
                field_started = true;
        }
    }
    if (quoted) throw FormatError(origin + ": unterminated quoted field");
    if (field_started || !field.empty() || !record.empty()) {
        record.push_back(std::move(field));
        records.push_back(std::move(record));
    }
    CsvTable table;
    if (records.empty()) return table;
    table.header = std::move(records.front());
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != table.header.size()) {
            throw FormatError(origin + ": row " + std::to_string(r) + " has " + std::to_string(records[r].size()) +
                              " fields, header has " + std::to_string(table.header.size()));
        }
        table.rows.push_back(std::move(records[r]));
    }
    return table;
}

CsvTable read_csv(const fs::path& path) { return parse_csv(read_file(path), path.string()); }

std::string csv_escape(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char ch : field) {
        if (ch == '"') out += "\"\"";
        else out.push_back(ch);
    }
    out.push_back('"');
    return out;
}

std::string format_csv(const CsvTable& table) {
    std::string out;
    auto emit = [&out](const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out.push_back(',');
            out += csv_escape(fields[i]);
        }
        out.push_back('\n');
    };
    emit(table.header);
    for (const auto& row : table.rows) emit(row);
    return out;
}

std::string format_double(double value) {
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value);
    return std::string(buf.data(), res.ptr);
}

double parse_double(std::string_view text, const std::string& what) {
    while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
    while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
    double v = 0.0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        throw FormatError(what + ": '" + std::string(text) + "' is not a number");
    }
    return v;
}

long long parse_int(std::string_view text, const std::string& what) {
    while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
    while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
    long long v = 0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        throw FormatError(what + ": '" + std::string(text) + "' is not an integer");
    }
    return v;
}

std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = text.find(sep, start);
        parts.emplace_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return parts;
}

}  // namespace rd::io
