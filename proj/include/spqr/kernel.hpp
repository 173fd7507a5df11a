#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "spqr/common.hpp"
#include "spqr/format.hpp"
#include "spqr/solver.hpp"

namespace spqr {

// Full reconstruction in the original column order.
inline DenseTensor dequantize_full(const SpqrTensor& t) {
    DenseTensor solve = reconstruct_solve_order(t.codes, t.stats, t.outliers);
    if (!t.has_permutation()) return solve;
    DenseTensor out(t.rows, t.cols);
    for (std::uint32_t r = 0; r < t.rows; ++r)
        for (std::uint32_t k = 0; k < t.cols; ++k)
            out(r, t.permutation.order[k]) = solve(r, k);
    return out;
}

// Work units for the mixed dense+sparse product: one beta1-column block wide,
// a bounded number of rows tall. Each tile knows the CSR subranges of its
// outliers so the sparse pass never scans.
struct TilePlan {
    struct Tile {
        std::uint32_t r0, r1;      // row band [r0, r1)
        std::uint32_t c0, c1;      // solve-order column range [c0, c1)
        std::uint32_t block;       // statistics block index
        std::size_t slice_offset;  // first entry in `slices` for row r0
    };

    std::uint32_t tile_rows = 64;
    std::vector<Tile> tiles;
    // Per tile, per row in the tile: [begin, end) into the outlier item array.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> slices;

    std::size_t tile_outlier_count(std::size_t tile_index) const {
        const Tile& t = tiles[tile_index];
        std::size_t count = 0;
        for (std::uint32_t r = t.r0; r < t.r1; ++r) {
            const auto& s = slices[t.slice_offset + (r - t.r0)];
            count += s.second - s.first;
        }
        return count;
    }
};

inline TilePlan build_tile_plan(const SpqrTensor& t, std::uint32_t tile_rows = 64) {
    if (tile_rows == 0) fail(Errc::config_invalid, "tile rows must be >= 1");
    TilePlan plan;
    plan.tile_rows = tile_rows;

    // CSR row starts from the sorted outlier list.
    std::vector<std::uint32_t> row_starts(t.rows + 1, 0);
    for (const Outlier& o : t.outliers.items) row_starts[o.row + 1]++;
    for (std::uint32_t r = 0; r < t.rows; ++r) row_starts[r + 1] += row_starts[r];

    const std::uint32_t n_blocks = (t.cols + t.beta1 - 1) / t.beta1;
    for (std::uint32_t r0 = 0; r0 < t.rows; r0 += tile_rows) {
        const std::uint32_t r1 = std::min(t.rows, r0 + tile_rows);
        for (std::uint32_t k = 0; k < n_blocks; ++k) {
            const std::uint32_t c0 = k * t.beta1;
            const std::uint32_t c1 = std::min(t.cols, c0 + t.beta1);
            TilePlan::Tile tile{r0, r1, c0, c1, k, plan.slices.size()};
            for (std::uint32_t r = r0; r < r1; ++r) {
                // Columns are sorted within a row; narrow to [c0, c1).
                std::uint32_t lo = row_starts[r], hi = row_starts[r + 1];
                std::uint32_t beg = lo, end = hi;
                while (beg < end && t.outliers.items[beg].col < c0) ++beg;
                std::uint32_t e = beg;
                while (e < end && t.outliers.items[e].col < c1) ++e;
                plan.slices.emplace_back(beg, e);
            }
            plan.tiles.push_back(tile);
        }
    }
    return plan;
}

// Tiled mixed dense+sparse matvec. Statistics are unpacked once per tile row;
// outlier corrections come from the precomputed CSR slices. Accumulation is
// binary64 so tiling never changes the result beyond rounding noise.
inline std::vector<float> matvec(const SpqrTensor& t, std::span<const float> x,
                                 const TilePlan& plan) {
    if (x.size() != t.cols) fail(Errc::shape_mismatch, "vector length must equal columns");

    std::vector<float> xp(t.cols);
    if (t.has_permutation()) {
        for (std::uint32_t k = 0; k < t.cols; ++k) xp[k] = x[t.permutation.order[k]];
    } else {
        std::copy(x.begin(), x.end(), xp.begin());
    }

    std::vector<double> y(t.rows, 0.0);
    for (const TilePlan::Tile& tile : plan.tiles) {
        for (std::uint32_t r = tile.r0; r < tile.r1; ++r) {
            const float s = t.stats.scale_at(tile.block, r);
            const float z = t.stats.zero_at(tile.block, r);
            double acc = 0.0;
            const std::uint8_t* codes =
                t.codes.codes.data() + static_cast<std::size_t>(r) * t.cols;
            for (std::uint32_t c = tile.c0; c < tile.c1; ++c)
                acc += static_cast<double>(dequant_value(s, z, codes[c])) *
                       static_cast<double>(xp[c]);
            const auto& slice = plan.slices[tile.slice_offset + (r - tile.r0)];
            for (std::uint32_t i = slice.first; i < slice.second; ++i) {
                const Outlier& o = t.outliers.items[i];
                acc += static_cast<double>(fp16_to_float(o.value16)) *
                       static_cast<double>(xp[o.col]);
            }
            y[r] += acc;
        }
    }

    std::vector<float> out(t.rows);
    for (std::uint32_t r = 0; r < t.rows; ++r) out[r] = static_cast<float>(y[r]);
    return out;
}

inline std::vector<float> matvec(const SpqrTensor& t, std::span<const float> x) {
    return matvec(t, x, build_tile_plan(t));
}

// Reference path: full dequantization followed by a dense product.
inline std::vector<float> matvec_naive(const SpqrTensor& t, std::span<const float> x) {
    if (x.size() != t.cols) fail(Errc::shape_mismatch, "vector length must equal columns");
    const DenseTensor w = dequantize_full(t);
    std::vector<float> out(t.rows);
    for (std::uint32_t r = 0; r < t.rows; ++r) {
        double acc = 0.0;
        for (std::uint32_t c = 0; c < t.cols; ++c)
            acc += static_cast<double>(w(r, c)) * static_cast<double>(x[c]);
        out[r] = static_cast<float>(acc);
    }
    return out;
}

struct BenchResult {
    double tiled_ns_per_op = 0.0;
    double naive_ns_per_op = 0.0;
    double dense_ns_per_op = 0.0;
    int repeats = 0;
    bool low_confidence = false;  // single sample
};

namespace detail {

inline double relative_l2(std::span<const float> a, std::span<const float> b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        num += d * d;
        den += static_cast<double>(b[i]) * b[i];
    }
    if (den == 0.0) return std::sqrt(num);
    return std::sqrt(num / den);
}

template <typename F>
inline double median_ns(F&& body, int repeats) {
    std::vector<double> samples(static_cast<std::size_t>(repeats));
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        body();
        const auto t1 = std::chrono::steady_clock::now();
        samples[static_cast<std::size_t>(i)] =
            std::chrono::duration<double, std::nano>(t1 - t0).count();
    }
    std::sort(samples.begin(), samples.end());
    const std::size_t mid = samples.size() / 2;
    if (samples.size() % 2 == 1) return samples[mid];
    return 0.5 * (samples[mid - 1] + samples[mid]);
}

}  // namespace detail

// Timing is informational; only correctness is asserted (tiled vs naive must
// agree before any number is reported).
inline BenchResult bench_matvec(const SpqrTensor& t, std::span<const float> x, int repeats) {
    if (repeats < 1) fail(Errc::config_invalid, "repeats must be >= 1");
    const TilePlan plan = build_tile_plan(t);

    const std::vector<float> y_tiled = matvec(t, x, plan);
    const std::vector<float> y_naive = matvec_naive(t, x);
    if (detail::relative_l2(y_tiled, y_naive) > 1e-6)
        fail(Errc::shape_mismatch, "tiled and naive matvec disagree; refusing to time");

    const DenseTensor w = dequantize_full(t);
    volatile float sink = 0.0f;

    BenchResult res;
    res.repeats = repeats;
    res.low_confidence = repeats == 1;
    res.tiled_ns_per_op = detail::median_ns(
        [&] {
            auto y = matvec(t, x, plan);
            sink += y[0];
        },
        repeats);
    res.naive_ns_per_op = detail::median_ns(
        [&] {
            auto y = matvec_naive(t, x);
            sink += y[0];
        },
        repeats);
    res.dense_ns_per_op = detail::median_ns(
        [&] {
            double acc0 = 0.0;
            for (std::uint32_t r = 0; r < w.rows(); ++r) {
                double acc = 0.0;
                for (std::uint32_t c = 0; c < w.cols(); ++c)
                    acc += static_cast<double>(w(r, c)) * static_cast<double>(x[c]);
                if (r == 0) acc0 = acc;
            }
            sink += static_cast<float>(acc0);
        },
        repeats);
    (void)sink;
    return res;
}

}  // namespace spqr
