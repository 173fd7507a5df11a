#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "spqr/common.hpp"
#include "spqr/tensor.hpp"

namespace spqr {

struct QuantFlags {
    // When set (the default), min/max of a group are used as-is instead of
    // being forced to straddle zero.
    bool full_range_sign = true;
    // When set, zero points are rounded to integers in [0, 2^b - 1].
    bool integer_zero = false;
};

// Per-group affine parameters: v ~ s * (code - z).
struct AffineParams {
    std::vector<float> scales;
    std::vector<float> zeros;
    int bits = 0;
    std::uint32_t group_size = 0;
    std::size_t value_count = 0;

    std::size_t groups() const { return scales.size(); }
    std::size_t group_of(std::size_t index) const { return index / group_size; }
};

struct CodeMatrix {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    int bits = 0;
    std::vector<std::uint8_t> codes;  // row-major, one code per weight

    std::uint8_t operator()(std::uint32_t r, std::uint32_t c) const {
        return codes[static_cast<std::size_t>(r) * cols + c];
    }
};

inline constexpr int kRawStatsBits = 16;  // sentinel: statistics kept raw, no second level

inline std::uint32_t max_code(int bits) { return (1u << bits) - 1u; }

// code = clamp(floor(v/s + z + 0.5), 0, maxq); round-half-up as written.
inline std::uint32_t quant_code(double v, double s, double z, std::uint32_t maxq) {
    if (!(s > 0.0)) return 0;
    const double t = std::floor(v / s + z + 0.5);
    if (!(t > 0.0)) return 0;  // also absorbs NaN
    if (t >= static_cast<double>(maxq)) return maxq;
    return static_cast<std::uint32_t>(t);
}

// Reconstruction is defined in binary32: this exact arithmetic is shared by
// the solver, the kernel and the decoder so pipelines agree bit-for-bit.
inline float dequant_value(float s, float z, std::uint32_t code) {
    return s * (static_cast<float>(code) - z);
}

// Dequantize one first-level statistic from its group's binary16 scalars.
inline float stat_dequant(std::uint16_t s16, std::uint16_t z16, std::uint32_t code) {
    return dequant_value(fp16_to_float(s16), fp16_to_float(z16), code);
}

namespace detail {

inline void check_bits(int bits) {
    if (bits < 1 || bits > 8) fail(Errc::config_invalid, "bits must be in [1, 8]");
}

// Min-max fit of a single group. Degenerate groups (max == min) get s = 1,
// z = -min so all codes are 0 and dequantize returns min exactly.
inline void fit_group_minmax(const double* v, std::size_t len, int bits, QuantFlags flags,
                             double& s, double& z) {
    double mn = v[0], mx = v[0];
    for (std::size_t i = 1; i < len; ++i) {
        mn = std::min(mn, v[i]);
        mx = std::max(mx, v[i]);
    }
    if (!flags.full_range_sign) {
        mn = std::min(mn, 0.0);
        mx = std::max(mx, 0.0);
    }
    const double maxq = static_cast<double>(max_code(bits));
    if (mx == mn) {
        s = 1.0;
        z = -mn;
    } else {
        s = (mx - mn) / maxq;
        z = -mn / s;
    }
    if (flags.integer_zero) z = std::clamp(std::floor(z + 0.5), 0.0, maxq);
}

}  // namespace detail

// Fits one (s, z) pair per consecutive group of `beta` values; a trailing
// ragged group is allowed.
inline AffineParams fit_quantizer(std::span<const float> values, std::uint32_t beta, int bits,
                                  QuantFlags flags = {}) {
    if (values.empty()) fail(Errc::empty_input, "fit_quantizer on empty input");
    if (beta == 0) fail(Errc::config_invalid, "group size must be >= 1");
    detail::check_bits(bits);

    AffineParams p;
    p.bits = bits;
    p.group_size = beta;
    p.value_count = values.size();
    for (std::size_t start = 0; start < values.size(); start += beta) {
        const std::size_t len = std::min<std::size_t>(beta, values.size() - start);
        std::vector<double> buf(len);
        for (std::size_t i = 0; i < len; ++i) buf[i] = values[start + i];
        double s, z;
        detail::fit_group_minmax(buf.data(), len, bits, flags, s, z);
        p.scales.push_back(static_cast<float>(s));
        p.zeros.push_back(static_cast<float>(z));
    }
    return p;
}

inline std::vector<std::uint8_t> quantize(std::span<const float> values, const AffineParams& p) {
    if (values.size() != p.value_count) fail(Errc::shape_mismatch, "quantize: value count mismatch");
    const std::uint32_t maxq = max_code(p.bits);
    std::vector<std::uint8_t> codes(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::size_t g = p.group_of(i);
        codes[i] = static_cast<std::uint8_t>(quant_code(values[i], p.scales[g], p.zeros[g], maxq));
    }
    return codes;
}

inline std::vector<float> dequantize(std::span<const std::uint8_t> codes, const AffineParams& p) {
    if (codes.size() != p.value_count) fail(Errc::shape_mismatch, "dequantize: code count mismatch");
    const std::uint32_t maxq = max_code(p.bits);
    std::vector<float> out(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > maxq) fail(Errc::shape_mismatch, "code out of range");
        const std::size_t g = p.group_of(i);
        out[i] = dequant_value(p.scales[g], p.zeros[g], codes[i]);
    }
    return out;
}

// Round-to-nearest baseline: per-row groups of `beta` columns, fit and
// quantize with no error compensation. Group (r, g) maps to parameter index
// r * groups_per_row + g.
inline std::pair<CodeMatrix, AffineParams> rtn_quantize_matrix(const DenseTensor& W,
                                                               std::uint32_t beta, int bits,
                                                               QuantFlags flags = {}) {
    if (beta == 0) fail(Errc::config_invalid, "group size must be >= 1");
    detail::check_bits(bits);
    const std::uint32_t m = W.rows(), n = W.cols();
    const std::uint32_t groups_per_row = (n + beta - 1) / beta;
    const std::uint32_t maxq = max_code(bits);

    CodeMatrix cm;
    cm.rows = m;
    cm.cols = n;
    cm.bits = bits;
    cm.codes.resize(static_cast<std::size_t>(m) * n);

    AffineParams p;
    p.bits = bits;
    p.group_size = beta;
    p.value_count = static_cast<std::size_t>(m) * n;
    p.scales.reserve(static_cast<std::size_t>(m) * groups_per_row);
    p.zeros.reserve(static_cast<std::size_t>(m) * groups_per_row);

    std::vector<double> buf(beta);
    for (std::uint32_t r = 0; r < m; ++r) {
        for (std::uint32_t g = 0; g < groups_per_row; ++g) {
            const std::uint32_t c0 = g * beta;
            const std::uint32_t len = std::min(beta, n - c0);
            for (std::uint32_t i = 0; i < len; ++i) buf[i] = W(r, c0 + i);
            double s, z;
            detail::fit_group_minmax(buf.data(), len, bits, flags, s, z);
            const float sf = static_cast<float>(s), zf = static_cast<float>(z);
            p.scales.push_back(sf);
            p.zeros.push_back(zf);
            for (std::uint32_t i = 0; i < len; ++i)
                cm.codes[static_cast<std::size_t>(r) * n + c0 + i] = static_cast<std::uint8_t>(
                    quant_code(W(r, c0 + i), static_cast<double>(sf), static_cast<double>(zf), maxq));
        }
    }
    return {std::move(cm), std::move(p)};
}

// Reconstruction of an RTN result, mirroring rtn_quantize_matrix's layout.
inline DenseTensor rtn_dequantize_matrix(const CodeMatrix& cm, const AffineParams& p) {
    const std::uint32_t m = cm.rows, n = cm.cols;
    const std::uint32_t groups_per_row = (n + p.group_size - 1) / p.group_size;
    DenseTensor out(m, n);
    for (std::uint32_t r = 0; r < m; ++r)
        for (std::uint32_t c = 0; c < n; ++c) {
            const std::size_t g = static_cast<std::size_t>(r) * groups_per_row + c / p.group_size;
            out(r, c) = dequant_value(p.scales[g], p.zeros[g], cm(r, c));
        }
    return out;
}

}  // namespace spqr
