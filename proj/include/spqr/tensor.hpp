#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spqr/common.hpp"

namespace spqr {

// .dtns container: "DTNS" | version u16 | rows u32 | cols u32 | dtype u8,
// followed by rows*cols little-endian binary32 values in row-major order.
inline constexpr char kTensorMagic[4] = {'D', 'T', 'N', 'S'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

struct TensorHeader {
    std::uint16_t version = kTensorVersion;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::uint8_t dtype = kDtypeF32;
};

class DenseTensor {
public:
    DenseTensor() = default;

    DenseTensor(std::uint32_t rows, std::uint32_t cols)
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, 0.0f) {
        if (rows == 0 || cols == 0) fail(Errc::shape_mismatch, "tensor dimensions must be >= 1");
    }

    DenseTensor(std::uint32_t rows, std::uint32_t cols, std::vector<float> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (rows == 0 || cols == 0) fail(Errc::shape_mismatch, "tensor dimensions must be >= 1");
        if (data_.size() != static_cast<std::size_t>(rows) * cols)
            fail(Errc::shape_mismatch, "payload size does not match dimensions");
    }

    std::uint32_t rows() const { return rows_; }
    std::uint32_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float operator()(std::uint32_t r, std::uint32_t c) const {
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }
    float& operator()(std::uint32_t r, std::uint32_t c) {
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }

    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

    bool operator==(const DenseTensor& o) const = default;

private:
    std::uint32_t rows_ = 0;
    std::uint32_t cols_ = 0;
    std::vector<float> data_;
};

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u16(std::ostream& os, std::uint16_t v) {
    const std::uint8_t b[2] = {std::uint8_t(v & 0xff), std::uint8_t(v >> 8)};
    write_bytes(os, b, 2);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    const std::uint8_t b[4] = {std::uint8_t(v & 0xff), std::uint8_t((v >> 8) & 0xff),
                               std::uint8_t((v >> 16) & 0xff), std::uint8_t(v >> 24)};
    write_bytes(os, b, 4);
}

inline bool read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(is.gcount()) == n;
}

inline bool read_u16(std::istream& is, std::uint16_t& v) {
    std::uint8_t b[2];
    if (!read_bytes(is, b, 2)) return false;
    v = std::uint16_t(b[0] | (std::uint16_t(b[1]) << 8));
    return true;
}

inline bool read_u32(std::istream& is, std::uint32_t& v) {
    std::uint8_t b[4];
    if (!read_bytes(is, b, 4)) return false;
    v = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
        (std::uint32_t(b[3]) << 24);
    return true;
}

}  // namespace detail

// Reads only the fixed 15-byte header; used for cheap manifest validation.
inline TensorHeader load_tensor_header(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(Errc::missing_file, "cannot open " + path.string());
    char magic[4];
    if (!detail::read_bytes(is, magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0)
        fail(Errc::malformed_header, "bad magic in " + path.string());
    TensorHeader h;
    if (!detail::read_u16(is, h.version)) fail(Errc::malformed_header, "truncated header");
    if (h.version != kTensorVersion)
        fail(Errc::malformed_header, "unsupported version " + std::to_string(h.version));
    if (!detail::read_u32(is, h.rows) || !detail::read_u32(is, h.cols))
        fail(Errc::malformed_header, "truncated header");
    if (!detail::read_bytes(is, &h.dtype, 1)) fail(Errc::malformed_header, "truncated header");
    if (h.dtype != kDtypeF32) fail(Errc::malformed_header, "unsupported dtype");
    if (h.rows == 0 || h.cols == 0) fail(Errc::malformed_header, "zero dimension");
    return h;
}

inline DenseTensor load_tensor(const std::filesystem::path& path) {
    const TensorHeader h = load_tensor_header(path);
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(Errc::missing_file, "cannot open " + path.string());
    is.seekg(15);

    const std::size_t count = static_cast<std::size_t>(h.rows) * h.cols;
    std::vector<float> values(count);
    std::vector<std::uint8_t> raw(count * 4);
    if (!detail::read_bytes(is, raw.data(), raw.size()))
        fail(Errc::shape_mismatch, "payload shorter than header-implied length in " + path.string());
    // Reject trailing bytes: loading must never silently truncate or pad.
    char extra;
    if (is.read(&extra, 1); is.gcount() != 0)
        fail(Errc::shape_mismatch, "payload longer than header-implied length in " + path.string());

    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t u = std::uint32_t(raw[4 * i]) | (std::uint32_t(raw[4 * i + 1]) << 8) |
                          (std::uint32_t(raw[4 * i + 2]) << 16) | (std::uint32_t(raw[4 * i + 3]) << 24);
        float f;
        std::memcpy(&f, &u, 4);
        if (!std::isfinite(f))
            fail(Errc::non_finite_value, "non-finite value at index " + std::to_string(i));
        values[i] = f;
    }
    return DenseTensor(h.rows, h.cols, std::move(values));
}

inline void save_tensor(const DenseTensor& t, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(Errc::io_failure, "cannot open " + path.string() + " for writing");
    detail::write_bytes(os, kTensorMagic, 4);
    detail::write_u16(os, kTensorVersion);
    detail::write_u32(os, t.rows());
    detail::write_u32(os, t.cols());
    detail::write_bytes(os, &kDtypeF32, 1);
    for (float f : t.data()) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        detail::write_u32(os, u);
    }
    if (!os) fail(Errc::io_failure, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Manifest: one entry per line, `name<TAB>weight_path<TAB>calib[,calib...]`.
// `#` starts a comment line. Paths are resolved relative to the manifest.
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string name;
    std::filesystem::path weight_path;
    std::vector<std::filesystem::path> calib_paths;
};

struct ModelManifest {
    std::vector<ManifestEntry> entries;
};

inline ModelManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail(Errc::missing_file, "cannot open manifest " + path.string());
    const std::filesystem::path base = path.has_parent_path() ? path.parent_path() : ".";

    ModelManifest manifest;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;

        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty())
            fail(Errc::parse_error,
                 "manifest line " + std::to_string(lineno) + ": expected name<TAB>weight<TAB>calibs");

        ManifestEntry e;
        e.name = fields[0];
        e.weight_path = base / fields[1];
        std::stringstream cs(fields[2]);
        std::string c;
        while (std::getline(cs, c, ',')) {
            if (c.empty()) fail(Errc::parse_error, "manifest line " + std::to_string(lineno) + ": empty calib path");
            e.calib_paths.push_back(base / c);
        }

        if (!std::filesystem::exists(e.weight_path))
            fail(Errc::missing_file, "entry '" + e.name + "': missing " + e.weight_path.string());
        for (const auto& p : e.calib_paths)
            if (!std::filesystem::exists(p))
                fail(Errc::missing_file, "entry '" + e.name + "': missing " + p.string());
        manifest.entries.push_back(std::move(e));
    }
    return manifest;
}

// Header-only consistency pass: every calibration slab must have n rows,
// where the entry's weight matrix is m x n.
inline void validate_manifest(const ModelManifest& manifest) {
    for (const auto& e : manifest.entries) {
        const TensorHeader w = load_tensor_header(e.weight_path);
        for (const auto& c : e.calib_paths) {
            const TensorHeader x = load_tensor_header(c);
            if (x.rows != w.cols)
                fail(Errc::shape_mismatch, "entry '" + e.name + "': calib " + c.string() + " has " +
                                               std::to_string(x.rows) + " rows, expected " +
                                               std::to_string(w.cols));
        }
    }
}

}  // namespace spqr
