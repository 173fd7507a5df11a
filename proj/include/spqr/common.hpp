#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace spqr {

enum class Errc {
    malformed_header,
    shape_mismatch,
    non_finite_value,
    io_failure,
    parse_error,
    missing_file,
    empty_input,
    not_positive_definite,
    dimension_mismatch,
    config_invalid,
    column_index_overflow,
    malformed_stream,
    version_unsupported,
    corrupt_csr,
    ill_conditioned,
    outlier_budget_exceeded,
};

inline const char* errc_name(Errc c) {
    switch (c) {
        case Errc::malformed_header: return "MalformedHeader";
        case Errc::shape_mismatch: return "ShapeMismatch";
        case Errc::non_finite_value: return "NonFiniteValue";
        case Errc::io_failure: return "IoFailure";
        case Errc::parse_error: return "ParseError";
        case Errc::missing_file: return "MissingFile";
        case Errc::empty_input: return "EmptyInput";
        case Errc::not_positive_definite: return "NotPositiveDefinite";
        case Errc::dimension_mismatch: return "DimensionMismatch";
        case Errc::config_invalid: return "ConfigInvalid";
        case Errc::column_index_overflow: return "ColumnIndexOverflow";
        case Errc::malformed_stream: return "MalformedStream";
        case Errc::version_unsupported: return "VersionUnsupported";
        case Errc::corrupt_csr: return "CorruptCsr";
        case Errc::ill_conditioned: return "IllConditioned";
        case Errc::outlier_budget_exceeded: return "OutlierBudgetExceeded";
    }
    return "UnknownError";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

// ---------------------------------------------------------------------------
// IEEE 754 binary16 conversion. Round-to-nearest-even on narrowing; values
// beyond the representable range saturate to +-65504 so dequantized tensors
// stay finite.
// ---------------------------------------------------------------------------

inline std::uint16_t fp16_from_float(float f) {
    std::uint32_t x;
    std::memcpy(&x, &f, sizeof(x));
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t exp8 = (x >> 23) & 0xffu;
    std::uint32_t mant = x & 0x7fffffu;

    if (exp8 == 0xffu) {  // inf or nan
        return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
    }
    const int exp = static_cast<int>(exp8) - 127 + 15;
    if (exp >= 31) {  // overflow: saturate to max finite
        return static_cast<std::uint16_t>(sign | 0x7bffu);
    }
    if (exp <= 0) {  // subnormal half (or zero)
        if (exp < -10) return sign;
        mant |= 0x800000u;
        const std::uint32_t shift = static_cast<std::uint32_t>(14 - exp);
        std::uint32_t half = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1u);
        if (rem > halfway || (rem == halfway && (half & 1u))) half++;
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) half++;
    if (half >= 0x7c00u) half = 0x7bffu;  // rounding carried past max finite
    return static_cast<std::uint16_t>(sign | half);
}

inline float fp16_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t x;
    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {  // subnormal: renormalize
            int e = 0;
            while (!(mant & 0x400u)) {
                mant <<= 1;
                e++;
            }
            mant &= 0x3ffu;
            x = sign | (static_cast<std::uint32_t>(127 - 15 + 1 - e) << 23) | (mant << 13);
        }
    } else if (exp == 31) {
        x = sign | 0x7f800000u | (mant << 13);
    } else {
        x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &x, sizeof(f));
    return f;
}

inline std::uint16_t fp16_round(float f) { return fp16_from_float(f); }

}  // namespace spqr
