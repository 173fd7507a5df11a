#pragma once

#include <cstdint>

#include "spqr/common.hpp"

namespace spqr {

// Byte-level size model of the .spqr stream. Every packed field is padded to
// a byte boundary; statistics kept raw (bits == 16) are stored as binary32.

inline constexpr std::size_t kSpqrHeaderBytes = 48;

inline std::size_t packed_field_bytes(std::size_t count, int bits) {
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

struct LayoutSpec {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    int weight_bits = 0;
    int scale_bits = 0;  // 16 = raw binary32 statistics
    int zero_bits = 0;
    std::uint32_t beta1 = 0;
    std::uint32_t beta2 = 0;
    std::uint32_t outlier_count = 0;
    bool has_permutation = false;
};

inline std::size_t group_record_bytes(const LayoutSpec& ls, std::uint32_t rows_in_group,
                                      std::uint32_t cols_in_block) {
    std::size_t bytes = 0;
    if (ls.scale_bits <= 8)
        bytes += 4 + packed_field_bytes(rows_in_group, ls.scale_bits);
    else
        bytes += 4 * static_cast<std::size_t>(rows_in_group);
    if (ls.zero_bits <= 8)
        bytes += 4 + packed_field_bytes(rows_in_group, ls.zero_bits);
    else
        bytes += 4 * static_cast<std::size_t>(rows_in_group);
    bytes += packed_field_bytes(static_cast<std::size_t>(rows_in_group) * cols_in_block,
                                ls.weight_bits);
    return bytes;
}

// Stream size excluding the fixed header.
inline std::size_t stream_payload_bytes(const LayoutSpec& ls) {
    std::size_t bytes = 0;
    if (ls.has_permutation) bytes += 4 * static_cast<std::size_t>(ls.cols);

    const std::uint32_t n_blocks = (ls.cols + ls.beta1 - 1) / ls.beta1;
    const std::uint32_t n_groups = (ls.rows + ls.beta2 - 1) / ls.beta2;
    for (std::uint32_t k = 0; k < n_blocks; ++k) {
        const std::uint32_t bw = std::min(ls.beta1, ls.cols - k * ls.beta1);
        for (std::uint32_t g = 0; g < n_groups; ++g) {
            const std::uint32_t gr = std::min(ls.beta2, ls.rows - g * ls.beta2);
            bytes += group_record_bytes(ls, gr, bw);
        }
    }

    bytes += 4 * (static_cast<std::size_t>(ls.rows) + 1);  // CSR row starts
    bytes += 4 * static_cast<std::size_t>(ls.outlier_count);  // u16 col + u16 value
    return bytes;
}

inline double measured_bits_per_param(const LayoutSpec& ls) {
    return 8.0 * static_cast<double>(stream_payload_bytes(ls)) /
           (static_cast<double>(ls.rows) * static_cast<double>(ls.cols));
}

// Per-outlier storage cost: the 16+16 bit payload plus the CSR row counters
// amortized over the outlier count.
inline double per_outlier_bits(const LayoutSpec& ls) {
    if (ls.outlier_count == 0) return 0.0;
    return 32.0 + 32.0 * (static_cast<double>(ls.rows) + 1.0) /
                      static_cast<double>(ls.outlier_count);
}

}  // namespace spqr
