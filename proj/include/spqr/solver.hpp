#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "spqr/common.hpp"
#include "spqr/hessian.hpp"
#include "spqr/layout.hpp"
#include "spqr/quantizer.hpp"
#include "spqr/tensor.hpp"

namespace spqr {

enum class ColumnOrder { natural, act_order, shuffled };
enum class ActOrderKey { hessian_diag, inverse_diag };

inline constexpr double kOutlierRateCap = 0.05;

struct SolverConfig {
    int weight_bits = 3;       // b_w
    int scale_bits = 3;        // b_s; 16 keeps first-level scales raw
    int zero_bits = 3;         // b_z; 16 keeps first-level zeros raw
    std::uint32_t beta1 = 16;  // weight group size (columns per block)
    std::uint32_t beta2 = 16;  // statistics group size (rows per group)
    double tau = 0.1;          // outlier threshold; +inf disables selection
    double lambda_rel = 0.01;
    bool outliers_enabled = true;
    bool integer_zero = false;     // "round zero": integer zero points
    bool full_range_sign = true;   // min/max not forced to straddle zero
    ColumnOrder order = ColumnOrder::natural;
    ActOrderKey act_order_key = ActOrderKey::hessian_diag;
    std::uint64_t seed = 0;  // used by shuffled order only
    std::optional<double> target_outlier_rate;

    QuantFlags quant_flags() const { return QuantFlags{full_range_sign, integer_zero}; }

    void validate() const {
        if (weight_bits < 1 || weight_bits > 8)
            fail(Errc::config_invalid, "weight bits must be in [1, 8]");
        if ((scale_bits < 1 || scale_bits > 8) && scale_bits != kRawStatsBits)
            fail(Errc::config_invalid, "scale bits must be in [1, 8] or 16");
        if ((zero_bits < 1 || zero_bits > 8) && zero_bits != kRawStatsBits)
            fail(Errc::config_invalid, "zero bits must be in [1, 8] or 16");
        if (beta1 < 1 || beta2 < 1) fail(Errc::config_invalid, "group sizes must be >= 1");
        if (std::isnan(tau) || tau < 0.0) fail(Errc::config_invalid, "tau must be >= 0");
        if (lambda_rel < 0.0) fail(Errc::config_invalid, "lambda_rel must be >= 0");
        if (integer_zero && zero_bits != kRawStatsBits && zero_bits < weight_bits)
            fail(Errc::config_invalid, "integer zero points need zero bits >= weight bits");
        if (target_outlier_rate) {
            if (!outliers_enabled)
                fail(Errc::config_invalid, "target outlier rate requires outliers enabled");
            if (*target_outlier_rate <= 0.0 || *target_outlier_rate > kOutlierRateCap)
                fail(Errc::config_invalid, "target outlier rate must be in (0, 0.05]");
        }
    }
};

struct Outlier {
    std::uint32_t row = 0;
    std::uint32_t col = 0;        // solve-order column
    std::uint16_t value16 = 0;    // binary16 correction added on top of the in-place code

    friend bool operator<(const Outlier& a, const Outlier& b) {
        return a.row != b.row ? a.row < b.row : a.col < b.col;
    }
};

struct OutlierSet {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<Outlier> items;  // sorted by row, then column

    double rate() const {
        if (rows == 0 || cols == 0) return 0.0;
        return static_cast<double>(items.size()) /
               (static_cast<double>(rows) * static_cast<double>(cols));
    }

    void validate() const {
        for (std::size_t i = 0; i + 1 < items.size(); ++i) {
            if (!(items[i] < items[i + 1]))
                fail(Errc::corrupt_csr, "outliers must be strictly sorted by (row, col)");
        }
        for (const auto& o : items)
            if (o.row >= rows || o.col >= cols) fail(Errc::corrupt_csr, "outlier out of bounds");
        if (rate() > kOutlierRateCap)
            fail(Errc::outlier_budget_exceeded,
                 "outlier rate " + std::to_string(rate()) + " exceeds sanity cap");
    }
};

// Second-level statistics: binary16 scalars per group of beta2 first-level
// statistics. Halves left unused by a raw (16-bit) side carry the identity.
struct StatGroupScalars {
    std::uint16_t scale_s = 0x3c00;  // 1.0
    std::uint16_t scale_z = 0x0000;  // 0.0
    std::uint16_t zero_s = 0x3c00;
    std::uint16_t zero_z = 0x0000;
};

struct BlockStats {
    std::vector<std::uint8_t> scale_codes;  // m entries when scale_bits <= 8
    std::vector<std::uint8_t> zero_codes;   // m entries when zero_bits <= 8
    std::vector<StatGroupScalars> groups;   // ceil(m / beta2), present when any side quantized
    std::vector<float> raw_scales;          // m entries when scale_bits == 16
    std::vector<float> raw_zeros;           // m entries when zero_bits == 16
};

struct BilevelStats {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::uint32_t beta1 = 0;
    std::uint32_t beta2 = 0;
    int scale_bits = 0;
    int zero_bits = 0;
    std::vector<BlockStats> blocks;  // ceil(cols / beta1)

    std::uint32_t block_count() const { return (cols + beta1 - 1) / beta1; }
    std::uint32_t group_count() const { return (rows + beta2 - 1) / beta2; }

    float scale_at(std::uint32_t block, std::uint32_t row) const {
        const BlockStats& b = blocks[block];
        if (scale_bits == kRawStatsBits) return b.raw_scales[row];
        const StatGroupScalars& g = b.groups[row / beta2];
        return stat_dequant(g.scale_s, g.scale_z, b.scale_codes[row]);
    }

    float zero_at(std::uint32_t block, std::uint32_t row) const {
        const BlockStats& b = blocks[block];
        if (zero_bits == kRawStatsBits) return b.raw_zeros[row];
        const StatGroupScalars& g = b.groups[row / beta2];
        return stat_dequant(g.zero_s, g.zero_z, b.zero_codes[row]);
    }
};

struct QuantizationReport {
    double relative_error = 0.0;  // ||W X - What X||^2 / ||W X||^2
    double outlier_rate = 0.0;
    double bits_per_param = 0.0;  // measured from the serialized layout
    double tau = 0.0;
    bool tau_target_reached = true;
    double wall_seconds = 0.0;
};

struct SpqrResult {
    CodeMatrix codes;        // solve-order columns
    BilevelStats stats;      // solve-order columns
    OutlierSet outliers;     // solve-order columns
    Permutation permutation; // maps solve position -> original column
    QuantizationReport report;
    std::vector<float> loss_map;  // m*n, original column order

    DenseTensor reconstruct() const;
    DenseTensor reconstruct_solve_order() const;
};

// ---------------------------------------------------------------------------
// fit_statistics: first-level (s, z) per row of the block with outliers
// zero-masked, then each statistics vector quantized over groups of beta2
// consecutive rows. Returns dequantized statistics so the downstream
// quantization already sees the second-level error.
// ---------------------------------------------------------------------------

struct BlockFit {
    std::vector<float> scale;  // m dequantized first-level scales
    std::vector<float> zero;   // m dequantized first-level zeros
    BlockStats stats;
};

namespace detail {

inline BlockFit fit_statistics_impl(const Eigen::MatrixXd& block,
                                    const std::vector<std::uint8_t>& outlier_mask,
                                    const SolverConfig& cfg) {
    const std::uint32_t m = static_cast<std::uint32_t>(block.rows());
    const std::uint32_t bw = static_cast<std::uint32_t>(block.cols());
    const QuantFlags flags = cfg.quant_flags();

    std::vector<double> s_first(m), z_first(m);
    std::vector<double> rowbuf(bw);
    for (std::uint32_t r = 0; r < m; ++r) {
        for (std::uint32_t c = 0; c < bw; ++c)
            rowbuf[c] = outlier_mask[static_cast<std::size_t>(r) * bw + c] ? 0.0 : block(r, c);
        fit_group_minmax(rowbuf.data(), bw, cfg.weight_bits, flags, s_first[r], z_first[r]);
    }

    BlockFit fit;
    fit.scale.resize(m);
    fit.zero.resize(m);
    const std::uint32_t n_groups = (m + cfg.beta2 - 1) / cfg.beta2;
    const bool any_codes = cfg.scale_bits != kRawStatsBits || cfg.zero_bits != kRawStatsBits;
    if (any_codes) fit.stats.groups.resize(n_groups);

    // Scales.
    if (cfg.scale_bits == kRawStatsBits) {
        fit.stats.raw_scales.resize(m);
        for (std::uint32_t r = 0; r < m; ++r) {
            fit.stats.raw_scales[r] = static_cast<float>(s_first[r]);
            fit.scale[r] = fit.stats.raw_scales[r];
        }
    } else {
        fit.stats.scale_codes.resize(m);
        const std::uint32_t maxq = max_code(cfg.scale_bits);
        for (std::uint32_t g = 0; g < n_groups; ++g) {
            const std::uint32_t r0 = g * cfg.beta2;
            const std::uint32_t len = std::min(cfg.beta2, m - r0);
            double ss, zs;
            fit_group_minmax(s_first.data() + r0, len, cfg.scale_bits, QuantFlags{true, false}, ss, zs);
            const std::uint16_t ss16 = fp16_round(static_cast<float>(ss));
            const std::uint16_t zs16 = fp16_round(static_cast<float>(zs));
            fit.stats.groups[g].scale_s = ss16;
            fit.stats.groups[g].scale_z = zs16;
            const double sd = fp16_to_float(ss16), zd = fp16_to_float(zs16);
            for (std::uint32_t r = r0; r < r0 + len; ++r) {
                const std::uint32_t code = quant_code(s_first[r], sd, zd, maxq);
                fit.stats.scale_codes[r] = static_cast<std::uint8_t>(code);
                fit.scale[r] = stat_dequant(ss16, zs16, code);
            }
        }
    }

    // Zero points.
    if (cfg.zero_bits == kRawStatsBits) {
        fit.stats.raw_zeros.resize(m);
        for (std::uint32_t r = 0; r < m; ++r) {
            fit.stats.raw_zeros[r] = static_cast<float>(z_first[r]);
            fit.zero[r] = fit.stats.raw_zeros[r];
        }
    } else if (cfg.integer_zero) {
        // First-level zeros are already integers in [0, 2^b_w - 1]; store them
        // directly under identity second-level scalars.
        fit.stats.zero_codes.resize(m);
        for (std::uint32_t r = 0; r < m; ++r) {
            fit.stats.zero_codes[r] = static_cast<std::uint8_t>(z_first[r]);
            fit.zero[r] = static_cast<float>(fit.stats.zero_codes[r]);
        }
    } else {
        fit.stats.zero_codes.resize(m);
        const std::uint32_t maxq = max_code(cfg.zero_bits);
        for (std::uint32_t g = 0; g < n_groups; ++g) {
            const std::uint32_t r0 = g * cfg.beta2;
            const std::uint32_t len = std::min(cfg.beta2, m - r0);
            double sz, zz;
            fit_group_minmax(z_first.data() + r0, len, cfg.zero_bits, QuantFlags{true, false}, sz, zz);
            const std::uint16_t sz16 = fp16_round(static_cast<float>(sz));
            const std::uint16_t zz16 = fp16_round(static_cast<float>(zz));
            fit.stats.groups[g].zero_s = sz16;
            fit.stats.groups[g].zero_z = zz16;
            const double sd = fp16_to_float(sz16), zd = fp16_to_float(zz16);
            for (std::uint32_t r = r0; r < r0 + len; ++r) {
                const std::uint32_t code = quant_code(z_first[r], sd, zd, maxq);
                fit.stats.zero_codes[r] = static_cast<std::uint8_t>(code);
                fit.zero[r] = stat_dequant(sz16, zz16, code);
            }
        }
    }
    return fit;
}

// Leave-one-out outlier screen over one block. For each weight, flag it when
// keeping it in 16-bit reduces the row's in-block error sum by more than tau.
inline std::vector<std::uint8_t> detect_outliers_impl(const Eigen::MatrixXd& block,
                                                      const double* c_diag,
                                                      const SolverConfig& cfg) {
    const std::uint32_t m = static_cast<std::uint32_t>(block.rows());
    const std::uint32_t bw = static_cast<std::uint32_t>(block.cols());
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(m) * bw, 0);
    if (!cfg.outliers_enabled || std::isinf(cfg.tau)) return mask;

    const QuantFlags flags = cfg.quant_flags();
    const std::uint32_t maxq = max_code(cfg.weight_bits);
    std::vector<double> row(bw), loo(bw > 1 ? bw - 1 : 1), inv_d2(bw);

    for (std::uint32_t r = 0; r < m; ++r) {
        for (std::uint32_t c = 0; c < bw; ++c) {
            row[c] = block(r, c);
            inv_d2[c] = 1.0 / (c_diag[c] * c_diag[c]);
        }

        double s, z;
        fit_group_minmax(row.data(), bw, cfg.weight_bits, flags, s, z);
        double e_base = 0.0;
        for (std::uint32_t c = 0; c < bw; ++c) {
            const double dq = s * (static_cast<double>(quant_code(row[c], s, z, maxq)) - z);
            const double d = row[c] - dq;
            e_base += d * d * inv_d2[c];
        }

        for (std::uint32_t c = 0; c < bw; ++c) {
            double e_loo = 0.0;
            if (bw > 1) {
                std::uint32_t k = 0;
                for (std::uint32_t j = 0; j < bw; ++j)
                    if (j != c) loo[k++] = row[j];
                double s2, z2;
                fit_group_minmax(loo.data(), bw - 1, cfg.weight_bits, flags, s2, z2);
                k = 0;
                for (std::uint32_t j = 0; j < bw; ++j) {
                    if (j == c) continue;
                    const double v = loo[k++];
                    const double dq = s2 * (static_cast<double>(quant_code(v, s2, z2, maxq)) - z2);
                    const double d = v - dq;
                    e_loo += d * d * inv_d2[j];
                }
            }
            if (e_base - e_loo > cfg.tau) mask[static_cast<std::size_t>(r) * bw + c] = 1;
        }
    }
    return mask;
}

}  // namespace detail

inline BlockFit fit_statistics(const DenseTensor& block, const std::vector<std::uint8_t>& outlier_mask,
                               const SolverConfig& cfg) {
    if (outlier_mask.size() != block.size())
        fail(Errc::shape_mismatch, "outlier mask size must match block");
    Eigen::MatrixXd b(block.rows(), block.cols());
    for (std::uint32_t r = 0; r < block.rows(); ++r)
        for (std::uint32_t c = 0; c < block.cols(); ++c) b(r, c) = block(r, c);
    return detail::fit_statistics_impl(b, outlier_mask, cfg);
}

inline std::vector<std::uint8_t> detect_outliers(const DenseTensor& block,
                                                 const std::vector<double>& cholesky_diag,
                                                 const SolverConfig& cfg) {
    if (cholesky_diag.size() != block.cols())
        fail(Errc::shape_mismatch, "need one Cholesky diagonal entry per block column");
    Eigen::MatrixXd b(block.rows(), block.cols());
    for (std::uint32_t r = 0; r < block.rows(); ++r)
        for (std::uint32_t c = 0; c < block.cols(); ++c) b(r, c) = block(r, c);
    return detail::detect_outliers_impl(b, cholesky_diag.data(), cfg);
}

// Shared reconstruction path (also used by the decode-side kernel): base
// weights from bilevel statistics, outlier corrections added on top.
inline DenseTensor reconstruct_solve_order(const CodeMatrix& codes, const BilevelStats& stats,
                                           const OutlierSet& outliers) {
    const std::uint32_t m = codes.rows, n = codes.cols;
    DenseTensor out(m, n);
    const std::uint32_t n_blocks = stats.block_count();
    for (std::uint32_t k = 0; k < n_blocks; ++k) {
        const std::uint32_t c0 = k * stats.beta1;
        const std::uint32_t bw = std::min(stats.beta1, n - c0);
        for (std::uint32_t r = 0; r < m; ++r) {
            const float s = stats.scale_at(k, r);
            const float z = stats.zero_at(k, r);
            for (std::uint32_t c = c0; c < c0 + bw; ++c)
                out(r, c) = dequant_value(s, z, codes(r, c));
        }
    }
    for (const Outlier& o : outliers.items) out(o.row, o.col) += fp16_to_float(o.value16);
    return out;
}

inline DenseTensor SpqrResult::reconstruct_solve_order() const {
    return spqr::reconstruct_solve_order(codes, stats, outliers);
}

inline DenseTensor SpqrResult::reconstruct() const {
    DenseTensor solve = reconstruct_solve_order();
    if (permutation.is_identity()) return solve;
    DenseTensor out(solve.rows(), solve.cols());
    for (std::uint32_t r = 0; r < solve.rows(); ++r)
        for (std::uint32_t k = 0; k < solve.cols(); ++k)
            out(r, permutation.order[k]) = solve(r, k);
    return out;
}

namespace detail {

inline Permutation make_permutation(const InverseCholesky& icho, const SolverConfig& cfg) {
    const std::uint32_t n = icho.n;
    switch (cfg.order) {
        case ColumnOrder::natural:
            return Permutation::identity(n);
        case ColumnOrder::act_order: {
            if (cfg.act_order_key == ActOrderKey::inverse_diag)
                return act_order_by_inverse_diag(icho);
            const auto d = icho.H.diagonal();
            std::vector<std::uint32_t> order(n);
            std::iota(order.begin(), order.end(), 0u);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::uint32_t a, std::uint32_t b) { return d(a) > d(b); });
            return Permutation::from_order(std::move(order));
        }
        case ColumnOrder::shuffled: {
            std::vector<std::uint32_t> order(n);
            std::iota(order.begin(), order.end(), 0u);
            std::mt19937_64 rng(cfg.seed);
            std::shuffle(order.begin(), order.end(), rng);
            return Permutation::from_order(std::move(order));
        }
    }
    fail(Errc::config_invalid, "unknown column order");
}

inline double relative_layer_error(const Eigen::MatrixXd& delta, const Eigen::MatrixXd& w0,
                                   const Eigen::MatrixXd& H) {
    // ||A X||_F^2 = tr(A (H/2) A^T) for H = 2 X X^T; the 1/2 cancels in the ratio.
    const double num = (delta * H).cwiseProduct(delta).sum();
    const double den = (w0 * H).cwiseProduct(w0).sum();
    if (den <= 0.0) return 0.0;
    return num / den;
}

}  // namespace detail

inline SpqrResult spqr_quantize(const DenseTensor& W, const InverseCholesky& icho,
                                const SolverConfig& cfg) {
    cfg.validate();
    if (W.cols() != icho.n)
        fail(Errc::dimension_mismatch, "weight has " + std::to_string(W.cols()) +
                                           " columns, Hessian factor is " + std::to_string(icho.n));
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint32_t m = W.rows(), n = W.cols();
    const std::uint32_t maxq = max_code(cfg.weight_bits);

    SpqrResult res;
    res.permutation = detail::make_permutation(icho, cfg);
    const bool identity = res.permutation.is_identity();

    const InverseCholesky permuted =
        identity ? InverseCholesky{} : refactor_permuted(icho, res.permutation);
    const Eigen::MatrixXd& C = identity ? icho.C : permuted.C;

    // Working copy in solve order, binary64.
    Eigen::MatrixXd Wp(m, n);
    for (std::uint32_t r = 0; r < m; ++r)
        for (std::uint32_t k = 0; k < n; ++k) Wp(r, k) = W(r, res.permutation.order[k]);
    const Eigen::MatrixXd W0p = Wp;

    res.codes.rows = m;
    res.codes.cols = n;
    res.codes.bits = cfg.weight_bits;
    res.codes.codes.assign(static_cast<std::size_t>(m) * n, 0);
    res.stats.rows = m;
    res.stats.cols = n;
    res.stats.beta1 = cfg.beta1;
    res.stats.beta2 = cfg.beta2;
    res.stats.scale_bits = cfg.scale_bits;
    res.stats.zero_bits = cfg.zero_bits;
    res.outliers.rows = m;
    res.outliers.cols = n;
    std::vector<float> loss_solve(static_cast<std::size_t>(m) * n, 0.0f);

    Eigen::MatrixXd errs;
    std::vector<double> c_diag;
    for (std::uint32_t i = 0; i < n; i += cfg.beta1) {
        const std::uint32_t bw = std::min(cfg.beta1, n - i);
        const auto block = Wp.middleCols(i, bw);

        c_diag.resize(bw);
        for (std::uint32_t c = 0; c < bw; ++c) c_diag[c] = C(i + c, i + c);
        const std::vector<std::uint8_t> mask =
            detail::detect_outliers_impl(block, c_diag.data(), cfg);

        const BlockFit fit = detail::fit_statistics_impl(block, mask, cfg);

        errs = Eigen::MatrixXd::Zero(m, bw);
        for (std::uint32_t jl = 0; jl < bw; ++jl) {
            const std::uint32_t j = i + jl;
            const double cjj = C(j, j);
            for (std::uint32_t r = 0; r < m; ++r) {
                const double w = Wp(r, j);
                const std::uint32_t code = quant_code(w, fit.scale[r], fit.zero[r], maxq);
                res.codes.codes[static_cast<std::size_t>(r) * n + j] =
                    static_cast<std::uint8_t>(code);
                const float base = dequant_value(fit.scale[r], fit.zero[r], code);
                const double err = w - static_cast<double>(base);
                loss_solve[static_cast<std::size_t>(r) * n + j] =
                    static_cast<float>(err * err / (2.0 * cjj * cjj));
                if (mask[static_cast<std::size_t>(r) * bw + jl]) {
                    res.outliers.items.push_back(
                        {r, j, fp16_round(static_cast<float>(err))});
                } else {
                    errs(r, jl) = err / cjj;
                }
            }
            if (jl + 1 < bw)
                Wp.middleCols(j + 1, bw - jl - 1).noalias() -=
                    errs.col(jl) * C.row(j).segment(j + 1, bw - jl - 1);
        }
        if (i + bw < n)
            Wp.middleCols(i + bw, n - i - bw).noalias() -=
                errs * C.block(i, i + bw, bw, n - i - bw);

        res.stats.blocks.push_back(fit.stats);
    }

    std::sort(res.outliers.items.begin(), res.outliers.items.end());
    res.outliers.validate();

    res.loss_map.resize(loss_solve.size());
    for (std::uint32_t r = 0; r < m; ++r)
        for (std::uint32_t k = 0; k < n; ++k)
            res.loss_map[static_cast<std::size_t>(r) * n + res.permutation.order[k]] =
                loss_solve[static_cast<std::size_t>(r) * n + k];

    // Report. The layer error is computed in solve order against the permuted
    // Hessian; it equals the original-order value by conjugation invariance.
    const DenseTensor recon = res.reconstruct_solve_order();
    Eigen::MatrixXd delta(m, n);
    for (std::uint32_t r = 0; r < m; ++r)
        for (std::uint32_t k = 0; k < n; ++k)
            delta(r, k) = static_cast<double>(recon(r, k)) - W0p(r, k);
    const Eigen::MatrixXd& H_solve = identity ? icho.H : permuted.H;
    res.report.relative_error = detail::relative_layer_error(delta, W0p, H_solve);
    res.report.outlier_rate = res.outliers.rate();
    LayoutSpec ls;
    ls.rows = m;
    ls.cols = n;
    ls.weight_bits = cfg.weight_bits;
    ls.scale_bits = cfg.scale_bits;
    ls.zero_bits = cfg.zero_bits;
    ls.beta1 = cfg.beta1;
    ls.beta2 = cfg.beta2;
    ls.outlier_count = static_cast<std::uint32_t>(res.outliers.items.size());
    ls.has_permutation = !identity;
    res.report.bits_per_param = measured_bits_per_param(ls);
    res.report.tau = cfg.tau;
    res.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

// ---------------------------------------------------------------------------
// tau tuning: binary search on the 0.05-step grid over [0.1, 1.0] for the
// smallest threshold whose outlier rate stays at or below the target.
// ---------------------------------------------------------------------------

struct TuneResult {
    double tau = 0.0;
    bool target_reached = false;
    SpqrResult result;
};

inline TuneResult tune_tau(const DenseTensor& W, const InverseCholesky& icho, SolverConfig cfg,
                           double target_rate) {
    if (target_rate <= 0.0 || target_rate > kOutlierRateCap)
        fail(Errc::config_invalid, "target outlier rate must be in (0, 0.05]");
    cfg.outliers_enabled = true;

    constexpr double kTauMin = 0.1, kTauStep = 0.05;
    constexpr int kGridMax = 18;  // 0.1 + 18 * 0.05 = 1.0
    const auto tau_at = [&](int k) { return kTauMin + kTauStep * k; };

    struct Probe {
        bool feasible = false;
        double rate = std::numeric_limits<double>::infinity();
    };
    std::optional<SpqrResult> best;  // run at the lowest feasible tau seen
    int best_k = -1;

    const auto probe = [&](int k) -> Probe {
        SolverConfig c = cfg;
        c.tau = tau_at(k);
        try {
            SpqrResult r = spqr_quantize(W, icho, c);
            const double rate = r.outliers.rate();
            if (rate <= target_rate) {
                best = std::move(r);
                best_k = k;
                return {true, rate};
            }
            return {false, rate};
        } catch (const Error& e) {
            if (e.code() == Errc::outlier_budget_exceeded) return {false, 1.0};
            throw;
        }
    };

    TuneResult out;
    if (probe(0).feasible) {
        out.tau = tau_at(0);
        out.target_reached = true;
        out.result = std::move(*best);
        out.result.report.tau_target_reached = true;
        return out;
    }
    if (!probe(kGridMax).feasible) {
        // Rate is above target even at tau = 1.0: report, do not fail silently.
        SolverConfig c = cfg;
        c.tau = tau_at(kGridMax);
        out.tau = c.tau;
        out.target_reached = false;
        out.result = spqr_quantize(W, icho, c);
        out.result.report.tau_target_reached = false;
        return out;
    }

    int lo = 0, hi = kGridMax;  // rate(lo) > target, rate(hi) <= target
    while (hi - lo > 1) {
        const int mid = (lo + hi) / 2;
        if (probe(mid).feasible)
            hi = mid;
        else
            lo = mid;
    }
    if (best_k != hi) probe(hi);
    out.tau = tau_at(hi);
    out.target_reached = true;
    out.result = std::move(*best);
    out.result.report.tau_target_reached = true;
    return out;
}

}  // namespace spqr
