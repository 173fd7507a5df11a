#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "spqr/common.hpp"
#include "spqr/layout.hpp"
#include "spqr/solver.hpp"

namespace spqr {

inline constexpr char kSpqrMagic[4] = {'S', 'P', 'Q', 'R'};
inline constexpr std::uint16_t kSpqrVersion = 1;

namespace fformat {
inline constexpr std::uint16_t kFlagPermutation = 1u << 0;
inline constexpr std::uint16_t kFlagActOrder = 1u << 1;
inline constexpr std::uint16_t kFlagIntegerZero = 1u << 2;
inline constexpr std::uint16_t kFlagFullRangeSign = 1u << 3;
inline constexpr std::uint16_t kFlagOutliersEnabled = 1u << 4;
}  // namespace fformat

// The compressed artifact: packed group records, quantized first-level
// statistics, 16-bit second-level statistics, CSR outliers, optional
// permutation. Codes and statistics live in solve (permuted) column order.
struct SpqrTensor {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    int weight_bits = 0;
    int scale_bits = 0;
    int zero_bits = 0;
    std::uint32_t beta1 = 0;
    std::uint32_t beta2 = 0;
    bool act_order = false;
    bool integer_zero = false;
    bool full_range_sign = true;
    bool outliers_enabled = true;
    float tau = 0.0f;
    float lambda_rel = 0.0f;

    Permutation permutation;  // identity when no reordering was applied
    CodeMatrix codes;
    BilevelStats stats;
    OutlierSet outliers;

    bool has_permutation() const { return !permutation.is_identity(); }

    LayoutSpec layout() const {
        LayoutSpec ls;
        ls.rows = rows;
        ls.cols = cols;
        ls.weight_bits = weight_bits;
        ls.scale_bits = scale_bits;
        ls.zero_bits = zero_bits;
        ls.beta1 = beta1;
        ls.beta2 = beta2;
        ls.outlier_count = static_cast<std::uint32_t>(outliers.items.size());
        ls.has_permutation = has_permutation();
        return ls;
    }
};

inline SpqrTensor make_spqr_tensor(const SpqrResult& result, const SolverConfig& cfg) {
    SpqrTensor t;
    t.rows = result.codes.rows;
    t.cols = result.codes.cols;
    t.weight_bits = cfg.weight_bits;
    t.scale_bits = cfg.scale_bits;
    t.zero_bits = cfg.zero_bits;
    t.beta1 = cfg.beta1;
    t.beta2 = cfg.beta2;
    t.act_order = cfg.order == ColumnOrder::act_order;
    t.integer_zero = cfg.integer_zero;
    t.full_range_sign = cfg.full_range_sign;
    t.outliers_enabled = cfg.outliers_enabled;
    t.tau = static_cast<float>(result.report.tau);
    t.lambda_rel = static_cast<float>(cfg.lambda_rel);
    t.permutation = result.permutation;
    t.codes = result.codes;
    t.stats = result.stats;
    t.outliers = result.outliers;
    return t;
}

// ---------------------------------------------------------------------------
// LSB-first bit packing within little-endian bytes; each packed field is
// padded to a byte boundary.
// ---------------------------------------------------------------------------

namespace detail {

class BitWriter {
public:
    explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}

    void put(std::uint32_t value, int bits) {
        acc_ |= static_cast<std::uint64_t>(value) << nbits_;
        nbits_ += bits;
        while (nbits_ >= 8) {
            out_.push_back(static_cast<std::uint8_t>(acc_));
            acc_ >>= 8;
            nbits_ -= 8;
        }
    }

    void pad_to_byte() {
        if (nbits_ > 0) {
            out_.push_back(static_cast<std::uint8_t>(acc_));
            acc_ = 0;
            nbits_ = 0;
        }
    }

private:
    std::vector<std::uint8_t>& out_;
    std::uint64_t acc_ = 0;
    int nbits_ = 0;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    std::size_t remaining() const { return size_ - pos_; }
    std::size_t position() const { return pos_; }

    void require(std::size_t n) const {
        if (remaining() < n) fail(Errc::malformed_stream, "stream truncated");
    }

    std::uint8_t u8() {
        require(1);
        return data_[pos_++];
    }
    std::uint16_t u16() {
        require(2);
        const std::uint16_t v =
            static_cast<std::uint16_t>(data_[pos_] | (std::uint16_t(data_[pos_ + 1]) << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        require(4);
        const std::uint32_t v = std::uint32_t(data_[pos_]) | (std::uint32_t(data_[pos_ + 1]) << 8) |
                                (std::uint32_t(data_[pos_ + 2]) << 16) |
                                (std::uint32_t(data_[pos_ + 3]) << 24);
        pos_ += 4;
        return v;
    }
    float f32() {
        const std::uint32_t u = u32();
        float f;
        std::memcpy(&f, &u, 4);
        return f;
    }
    void bytes(void* dst, std::size_t n) {
        require(n);
        std::memcpy(dst, data_ + pos_, n);
        pos_ += n;
    }

    // Reads `count` packed values of `bits` each and skips the byte padding.
    void packed(std::uint8_t* dst, std::size_t count, int bits) {
        const std::size_t nbytes = packed_field_bytes(count, bits);
        require(nbytes);
        std::uint64_t acc = 0;
        int have = 0;
        std::size_t bytepos = pos_;
        const std::uint32_t mask = (bits == 32) ? ~0u : ((1u << bits) - 1u);
        for (std::size_t i = 0; i < count; ++i) {
            while (have < bits) {
                acc |= static_cast<std::uint64_t>(data_[bytepos++]) << have;
                have += 8;
            }
            dst[i] = static_cast<std::uint8_t>(acc & mask);
            acc >>= bits;
            have -= bits;
        }
        pos_ += nbytes;
    }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(out, u);
}

inline void put_packed(std::vector<std::uint8_t>& out, const std::uint8_t* src, std::size_t count,
                       int bits) {
    BitWriter bw(out);
    for (std::size_t i = 0; i < count; ++i) bw.put(src[i], bits);
    bw.pad_to_byte();
}

inline void validate_tensor_for_encode(const SpqrTensor& t) {
    if (t.rows == 0 || t.cols == 0) fail(Errc::shape_mismatch, "empty tensor");
    if (t.weight_bits < 1 || t.weight_bits > 8) fail(Errc::shape_mismatch, "bad weight bits");
    const auto stat_bits_ok = [](int b) { return (b >= 1 && b <= 8) || b == kRawStatsBits; };
    if (!stat_bits_ok(t.scale_bits) || !stat_bits_ok(t.zero_bits))
        fail(Errc::shape_mismatch, "bad statistic bits");
    if (t.beta1 < 1 || t.beta2 < 1) fail(Errc::shape_mismatch, "bad group sizes");
    if (t.codes.rows != t.rows || t.codes.cols != t.cols || t.codes.bits != t.weight_bits)
        fail(Errc::shape_mismatch, "code matrix does not match header");
    if (t.codes.codes.size() != static_cast<std::size_t>(t.rows) * t.cols)
        fail(Errc::shape_mismatch, "code payload size mismatch");
    const std::uint32_t maxq = max_code(t.weight_bits);
    for (std::uint8_t c : t.codes.codes)
        if (c > maxq) fail(Errc::shape_mismatch, "weight code out of range");

    if (t.stats.rows != t.rows || t.stats.cols != t.cols || t.stats.beta1 != t.beta1 ||
        t.stats.beta2 != t.beta2 || t.stats.scale_bits != t.scale_bits ||
        t.stats.zero_bits != t.zero_bits)
        fail(Errc::shape_mismatch, "statistics do not match header");
    const std::uint32_t n_blocks = (t.cols + t.beta1 - 1) / t.beta1;
    const std::uint32_t n_groups = (t.rows + t.beta2 - 1) / t.beta2;
    if (t.stats.blocks.size() != n_blocks) fail(Errc::shape_mismatch, "block count mismatch");
    const bool any_codes = t.scale_bits != kRawStatsBits || t.zero_bits != kRawStatsBits;
    for (const BlockStats& b : t.stats.blocks) {
        if (t.scale_bits == kRawStatsBits) {
            if (b.raw_scales.size() != t.rows) fail(Errc::shape_mismatch, "raw scale size");
        } else if (b.scale_codes.size() != t.rows) {
            fail(Errc::shape_mismatch, "scale code size");
        }
        if (t.zero_bits == kRawStatsBits) {
            if (b.raw_zeros.size() != t.rows) fail(Errc::shape_mismatch, "raw zero size");
        } else if (b.zero_codes.size() != t.rows) {
            fail(Errc::shape_mismatch, "zero code size");
        }
        if (any_codes && b.groups.size() != n_groups)
            fail(Errc::shape_mismatch, "stat group count mismatch");
    }

    if (t.outliers.rows != t.rows || t.outliers.cols != t.cols)
        fail(Errc::shape_mismatch, "outlier set does not match header");
    t.outliers.validate();
    if (!t.outliers.items.empty() && t.cols > 0xffffu)
        fail(Errc::column_index_overflow, "outliers need column indices < 65536");

    if (t.has_permutation() && t.permutation.size() != t.cols)
        fail(Errc::shape_mismatch, "permutation size mismatch");
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const SpqrTensor& t) {
    detail::validate_tensor_for_encode(t);
    std::vector<std::uint8_t> out;
    out.reserve(kSpqrHeaderBytes + stream_payload_bytes(t.layout()));

    std::uint16_t flags = 0;
    if (t.has_permutation()) flags |= fformat::kFlagPermutation;
    if (t.act_order) flags |= fformat::kFlagActOrder;
    if (t.integer_zero) flags |= fformat::kFlagIntegerZero;
    if (t.full_range_sign) flags |= fformat::kFlagFullRangeSign;
    if (t.outliers_enabled) flags |= fformat::kFlagOutliersEnabled;

    out.insert(out.end(), kSpqrMagic, kSpqrMagic + 4);
    detail::put_u16(out, kSpqrVersion);
    detail::put_u16(out, flags);
    detail::put_u32(out, t.rows);
    detail::put_u32(out, t.cols);
    out.push_back(static_cast<std::uint8_t>(t.weight_bits));
    out.push_back(static_cast<std::uint8_t>(t.scale_bits));
    out.push_back(static_cast<std::uint8_t>(t.zero_bits));
    out.push_back(0);
    detail::put_u32(out, t.beta1);
    detail::put_u32(out, t.beta2);
    detail::put_u32(out, static_cast<std::uint32_t>(t.outliers.items.size()));
    detail::put_f32(out, t.tau);
    detail::put_f32(out, t.lambda_rel);
    for (int i = 0; i < 8; ++i) out.push_back(0);

    if (t.has_permutation())
        for (std::uint32_t k = 0; k < t.cols; ++k) detail::put_u32(out, t.permutation.order[k]);

    const std::uint32_t n_blocks = (t.cols + t.beta1 - 1) / t.beta1;
    const std::uint32_t n_groups = (t.rows + t.beta2 - 1) / t.beta2;
    std::vector<std::uint8_t> wbuf;
    for (std::uint32_t k = 0; k < n_blocks; ++k) {
        const std::uint32_t c0 = k * t.beta1;
        const std::uint32_t bw = std::min(t.beta1, t.cols - c0);
        const BlockStats& bs = t.stats.blocks[k];
        for (std::uint32_t g = 0; g < n_groups; ++g) {
            const std::uint32_t r0 = g * t.beta2;
            const std::uint32_t gr = std::min(t.beta2, t.rows - r0);
            if (t.scale_bits != kRawStatsBits) {
                detail::put_u16(out, bs.groups[g].scale_s);
                detail::put_u16(out, bs.groups[g].scale_z);
            }
            if (t.zero_bits != kRawStatsBits) {
                detail::put_u16(out, bs.groups[g].zero_s);
                detail::put_u16(out, bs.groups[g].zero_z);
            }
            if (t.scale_bits != kRawStatsBits)
                detail::put_packed(out, bs.scale_codes.data() + r0, gr, t.scale_bits);
            else
                for (std::uint32_t r = r0; r < r0 + gr; ++r) detail::put_f32(out, bs.raw_scales[r]);
            if (t.zero_bits != kRawStatsBits)
                detail::put_packed(out, bs.zero_codes.data() + r0, gr, t.zero_bits);
            else
                for (std::uint32_t r = r0; r < r0 + gr; ++r) detail::put_f32(out, bs.raw_zeros[r]);

            wbuf.resize(static_cast<std::size_t>(gr) * bw);
            for (std::uint32_t r = 0; r < gr; ++r)
                for (std::uint32_t c = 0; c < bw; ++c)
                    wbuf[static_cast<std::size_t>(r) * bw + c] = t.codes(r0 + r, c0 + c);
            detail::put_packed(out, wbuf.data(), wbuf.size(), t.weight_bits);
        }
    }

    // CSR outlier section: cumulative row counts, then (column, value) pairs
    // sorted by row first and column second.
    std::uint32_t cursor = 0;
    detail::put_u32(out, 0);
    std::size_t item = 0;
    for (std::uint32_t r = 0; r < t.rows; ++r) {
        while (item < t.outliers.items.size() && t.outliers.items[item].row == r) {
            ++item;
            ++cursor;
        }
        detail::put_u32(out, cursor);
    }
    for (const Outlier& o : t.outliers.items) {
        detail::put_u16(out, static_cast<std::uint16_t>(o.col));
        detail::put_u16(out, o.value16);
    }
    return out;
}

inline SpqrTensor decode(std::span<const std::uint8_t> bytes) {
    detail::ByteReader rd(bytes.data(), bytes.size());
    rd.require(kSpqrHeaderBytes);

    char magic[4];
    rd.bytes(magic, 4);
    if (std::memcmp(magic, kSpqrMagic, 4) != 0) fail(Errc::malformed_stream, "bad magic");
    const std::uint16_t version = rd.u16();
    if (version != kSpqrVersion)
        fail(Errc::version_unsupported, "version " + std::to_string(version));
    const std::uint16_t flags = rd.u16();

    SpqrTensor t;
    t.rows = rd.u32();
    t.cols = rd.u32();
    t.weight_bits = rd.u8();
    t.scale_bits = rd.u8();
    t.zero_bits = rd.u8();
    (void)rd.u8();
    t.beta1 = rd.u32();
    t.beta2 = rd.u32();
    const std::uint32_t outlier_count = rd.u32();
    t.tau = rd.f32();
    t.lambda_rel = rd.f32();
    std::uint8_t reserved[8];
    rd.bytes(reserved, 8);

    if (t.rows == 0 || t.cols == 0) fail(Errc::malformed_stream, "zero dimension");
    if (t.weight_bits < 1 || t.weight_bits > 8) fail(Errc::malformed_stream, "bad weight bits");
    const auto stat_bits_ok = [](int b) { return (b >= 1 && b <= 8) || b == kRawStatsBits; };
    if (!stat_bits_ok(t.scale_bits) || !stat_bits_ok(t.zero_bits))
        fail(Errc::malformed_stream, "bad statistic bits");
    if (t.beta1 < 1 || t.beta2 < 1) fail(Errc::malformed_stream, "bad group sizes");
    if (outlier_count > 0 && t.cols > 0xffffu)
        fail(Errc::malformed_stream, "outliers present but columns exceed u16 range");
    t.act_order = flags & fformat::kFlagActOrder;
    t.integer_zero = flags & fformat::kFlagIntegerZero;
    t.full_range_sign = flags & fformat::kFlagFullRangeSign;
    t.outliers_enabled = flags & fformat::kFlagOutliersEnabled;

    LayoutSpec ls = t.layout();
    ls.outlier_count = outlier_count;
    ls.has_permutation = flags & fformat::kFlagPermutation;
    if (bytes.size() != kSpqrHeaderBytes + stream_payload_bytes(ls))
        fail(Errc::malformed_stream, "stream length does not match header");

    if (flags & fformat::kFlagPermutation) {
        std::vector<std::uint32_t> order(t.cols);
        for (std::uint32_t k = 0; k < t.cols; ++k) order[k] = rd.u32();
        try {
            t.permutation = Permutation::from_order(std::move(order));
        } catch (const Error&) {
            fail(Errc::malformed_stream, "permutation is not a bijection");
        }
    } else {
        t.permutation = Permutation::identity(t.cols);
    }

    t.codes.rows = t.rows;
    t.codes.cols = t.cols;
    t.codes.bits = t.weight_bits;
    t.codes.codes.assign(static_cast<std::size_t>(t.rows) * t.cols, 0);
    t.stats.rows = t.rows;
    t.stats.cols = t.cols;
    t.stats.beta1 = t.beta1;
    t.stats.beta2 = t.beta2;
    t.stats.scale_bits = t.scale_bits;
    t.stats.zero_bits = t.zero_bits;

    const std::uint32_t n_blocks = (t.cols + t.beta1 - 1) / t.beta1;
    const std::uint32_t n_groups = (t.rows + t.beta2 - 1) / t.beta2;
    const bool any_codes = t.scale_bits != kRawStatsBits || t.zero_bits != kRawStatsBits;
    t.stats.blocks.resize(n_blocks);
    std::vector<std::uint8_t> wbuf;
    for (std::uint32_t k = 0; k < n_blocks; ++k) {
        const std::uint32_t c0 = k * t.beta1;
        const std::uint32_t bw = std::min(t.beta1, t.cols - c0);
        BlockStats& bs = t.stats.blocks[k];
        if (any_codes) bs.groups.resize(n_groups);
        if (t.scale_bits != kRawStatsBits)
            bs.scale_codes.resize(t.rows);
        else
            bs.raw_scales.resize(t.rows);
        if (t.zero_bits != kRawStatsBits)
            bs.zero_codes.resize(t.rows);
        else
            bs.raw_zeros.resize(t.rows);

        for (std::uint32_t g = 0; g < n_groups; ++g) {
            const std::uint32_t r0 = g * t.beta2;
            const std::uint32_t gr = std::min(t.beta2, t.rows - r0);
            if (t.scale_bits != kRawStatsBits) {
                bs.groups[g].scale_s = rd.u16();
                bs.groups[g].scale_z = rd.u16();
                if (fp16_to_float(bs.groups[g].scale_s) < 0.0f)
                    fail(Errc::malformed_stream, "negative second-level scale");
            }
            if (t.zero_bits != kRawStatsBits) {
                bs.groups[g].zero_s = rd.u16();
                bs.groups[g].zero_z = rd.u16();
            }
            if (t.scale_bits != kRawStatsBits)
                rd.packed(bs.scale_codes.data() + r0, gr, t.scale_bits);
            else
                for (std::uint32_t r = r0; r < r0 + gr; ++r) bs.raw_scales[r] = rd.f32();
            if (t.zero_bits != kRawStatsBits)
                rd.packed(bs.zero_codes.data() + r0, gr, t.zero_bits);
            else
                for (std::uint32_t r = r0; r < r0 + gr; ++r) bs.raw_zeros[r] = rd.f32();

            wbuf.resize(static_cast<std::size_t>(gr) * bw);
            rd.packed(wbuf.data(), wbuf.size(), t.weight_bits);
            for (std::uint32_t r = 0; r < gr; ++r)
                for (std::uint32_t c = 0; c < bw; ++c)
                    t.codes.codes[static_cast<std::size_t>(r0 + r) * t.cols + c0 + c] =
                        wbuf[static_cast<std::size_t>(r) * bw + c];
        }
    }

    t.outliers.rows = t.rows;
    t.outliers.cols = t.cols;
    std::vector<std::uint32_t> row_starts(t.rows + 1);
    for (std::uint32_t r = 0; r <= t.rows; ++r) row_starts[r] = rd.u32();
    if (row_starts[0] != 0) fail(Errc::corrupt_csr, "row starts must begin at 0");
    for (std::uint32_t r = 0; r < t.rows; ++r)
        if (row_starts[r + 1] < row_starts[r]) fail(Errc::corrupt_csr, "row starts decrease");
    if (row_starts[t.rows] != outlier_count)
        fail(Errc::corrupt_csr, "row starts do not sum to outlier count");

    t.outliers.items.resize(outlier_count);
    {
        std::uint32_t r = 0;
        for (std::uint32_t i = 0; i < outlier_count; ++i) {
            while (r < t.rows && row_starts[r + 1] <= i) ++r;
            Outlier& o = t.outliers.items[i];
            o.row = r;
            o.col = rd.u16();
            o.value16 = rd.u16();
            if (o.col >= t.cols) fail(Errc::corrupt_csr, "outlier column out of range");
            if (i > 0 && t.outliers.items[i - 1].row == r &&
                t.outliers.items[i - 1].col >= o.col)
                fail(Errc::corrupt_csr, "outlier columns must increase within a row");
        }
    }
    if (rd.remaining() != 0) fail(Errc::malformed_stream, "trailing bytes");
    return t;
}

inline void save_spqr(const SpqrTensor& t, const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = encode(t);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(Errc::io_failure, "cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) fail(Errc::io_failure, "write failed for " + path.string());
}

inline SpqrTensor load_spqr(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(Errc::missing_file, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    return decode(bytes);
}

// ---------------------------------------------------------------------------
// Average-bits model: b_w + (b_s + b_z)/beta1 + 64/(beta1*beta2) + 32*r_o.
// ---------------------------------------------------------------------------

struct BitsEstimate {
    double avg_bits = 0.0;
    double base = 0.0;
    double first_level = 0.0;
    double second_level = 0.0;
    double outliers = 0.0;
};

inline BitsEstimate estimate_avg_bits(int b_w, int b_s, int b_z, std::uint32_t beta1,
                                      std::uint32_t beta2, double r_o) {
    if (b_w < 1 || b_s < 1 || b_z < 1 || beta1 < 1 || beta2 < 1 || r_o < 0.0)
        fail(Errc::config_invalid, "estimate parameters must be positive");
    BitsEstimate e;
    e.base = static_cast<double>(b_w);
    e.first_level = static_cast<double>(b_s + b_z) / beta1;
    e.second_level = 64.0 / (static_cast<double>(beta1) * beta2);
    e.outliers = 32.0 * r_o;
    e.avg_bits = e.base + e.first_level + e.second_level + e.outliers;
    return e;
}

struct MeasuredBits {
    double bits_per_param = 0.0;   // stream bits excluding the fixed header, per weight
    double per_outlier_bits = 0.0; // payload plus amortized row counters
    std::size_t payload_bytes = 0;
};

inline MeasuredBits measure_actual_bits(const SpqrTensor& t) {
    const LayoutSpec ls = t.layout();
    MeasuredBits mb;
    mb.payload_bytes = stream_payload_bytes(ls);
    mb.bits_per_param = measured_bits_per_param(ls);
    mb.per_outlier_bits = per_outlier_bits(ls);
    return mb;
}

}  // namespace spqr
