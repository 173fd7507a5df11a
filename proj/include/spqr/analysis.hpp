#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "spqr/common.hpp"
#include "spqr/hessian.hpp"
#include "spqr/quantizer.hpp"
#include "spqr/solver.hpp"
#include "spqr/tensor.hpp"

namespace spqr {

struct SensitivityMap {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<float> values;  // row-major, non-negative
    std::string provenance;

    float operator()(std::uint32_t r, std::uint32_t c) const {
        return values[static_cast<std::size_t>(r) * cols + c];
    }
    float& operator()(std::uint32_t r, std::uint32_t c) {
        return values[static_cast<std::size_t>(r) * cols + c];
    }
};

// s_ij = (w_ij - quant(w_ij))^2 / (2 [(H + lambda I)^{-1}]_jj), with the
// inverse diagonal read off the Cholesky factor.
inline SensitivityMap sensitivity_closed_form(const DenseTensor& W, const InverseCholesky& icho,
                                              int bits, std::uint32_t group_size,
                                              QuantFlags flags = {}) {
    if (W.cols() != icho.n) fail(Errc::dimension_mismatch, "Hessian dimension mismatch");
    const auto [cm, params] = rtn_quantize_matrix(W, group_size, bits, flags);
    const DenseTensor recon = rtn_dequantize_matrix(cm, params);

    SensitivityMap map;
    map.rows = W.rows();
    map.cols = W.cols();
    map.values.resize(W.size());
    map.provenance = "closed_form b=" + std::to_string(bits) + " beta=" + std::to_string(group_size);
    std::vector<double> denom(W.cols());
    for (std::uint32_t j = 0; j < W.cols(); ++j) denom[j] = 2.0 * icho.inverse_diag(j);
    for (std::uint32_t r = 0; r < W.rows(); ++r)
        for (std::uint32_t c = 0; c < W.cols(); ++c) {
            const double d = static_cast<double>(W(r, c)) - recon(r, c);
            map(r, c) = static_cast<float>(d * d / denom[c]);
        }
    return map;
}

// Test oracle: minimum of ||W X - W' X||^2 over all W' with w'_ij pinned to
// `quant_value`, solved exactly as an equality-constrained least-squares
// problem on X itself (never through the Cholesky factor). With lambda > 0
// the objective gains the matching ridge term (lambda/2)||delta||^2.
inline double sensitivity_bruteforce(const DenseTensor& W, const DenseTensor& X, std::uint32_t i,
                                     std::uint32_t j, double quant_value, double lambda = 0.0) {
    if (static_cast<std::size_t>(W.rows()) * W.cols() > 64)
        fail(Errc::shape_mismatch, "brute-force oracle is limited to m*n <= 64");
    if (X.rows() != W.cols()) fail(Errc::dimension_mismatch, "X must have n rows");
    if (i >= W.rows() || j >= W.cols()) fail(Errc::shape_mismatch, "index out of range");

    const Eigen::Index n = W.cols(), d = X.cols();
    Eigen::MatrixXd Xd(n, d);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < d; ++c)
            Xd(r, c) = X(static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c));
    Eigen::MatrixXd A = Xd * Xd.transpose();
    A.diagonal().array() += lambda * 0.5;

    const double delta_j = quant_value - W(i, j);
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(n);
    delta(j) = delta_j;
    if (n > 1) {
        // Free entries of row i minimize the quadratic given delta_j fixed.
        Eigen::MatrixXd Asub(n - 1, n - 1);
        Eigen::VectorXd rhs(n - 1);
        Eigen::Index rr = 0;
        for (Eigen::Index r = 0; r < n; ++r) {
            if (r == j) continue;
            Eigen::Index cc = 0;
            for (Eigen::Index c = 0; c < n; ++c) {
                if (c == j) continue;
                Asub(rr, cc++) = A(r, c);
            }
            rhs(rr++) = -delta_j * A(r, j);
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(Asub);
        if (!lu.isInvertible())
            fail(Errc::ill_conditioned, "constrained system is singular");
        const Eigen::VectorXd u = lu.solve(rhs);
        rr = 0;
        for (Eigen::Index r = 0; r < n; ++r)
            if (r != j) delta(r) = u(rr++);
    }
    return delta.dot(A * delta);
}

// Max-pooling over pool x pool cells (ceil at the ragged edge).
inline SensitivityMap maxpool_heatmap(const SensitivityMap& map, std::uint32_t pool = 32) {
    if (pool == 0) fail(Errc::config_invalid, "pool size must be >= 1");
    SensitivityMap out;
    out.rows = (map.rows + pool - 1) / pool;
    out.cols = (map.cols + pool - 1) / pool;
    out.values.assign(static_cast<std::size_t>(out.rows) * out.cols, 0.0f);
    out.provenance = map.provenance + " maxpool" + std::to_string(pool);
    for (std::uint32_t r = 0; r < map.rows; ++r)
        for (std::uint32_t c = 0; c < map.cols; ++c) {
            float& cell = out(r / pool, c / pool);
            cell = std::max(cell, map(r, c));
        }
    return out;
}

// 8-bit grayscale PGM (P5), log-scaled; darker = more sensitive.
inline void write_pgm(const SensitivityMap& map, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(Errc::io_failure, "cannot open " + path.string());
    os << "P5\n" << map.cols << " " << map.rows << "\n255\n";

    constexpr double kFloor = 1e-30;
    double lo = 0.0, hi = 0.0;
    bool first = true;
    for (float v : map.values) {
        const double l = std::log10(std::max(static_cast<double>(v), kFloor));
        if (first) {
            lo = hi = l;
            first = false;
        } else {
            lo = std::min(lo, l);
            hi = std::max(hi, l);
        }
    }
    std::vector<std::uint8_t> pixels(map.values.size());
    for (std::size_t idx = 0; idx < map.values.size(); ++idx) {
        const double l = std::log10(std::max(static_cast<double>(map.values[idx]), kFloor));
        const double t = (hi > lo) ? (l - lo) / (hi - lo) : 0.0;
        pixels[idx] = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)));
    }
    os.write(reinterpret_cast<const char*>(pixels.data()),
             static_cast<std::streamsize>(pixels.size()));
    if (!os) fail(Errc::io_failure, "write failed for " + path.string());
}

inline void write_sensitivity_csv(const SensitivityMap& map, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) fail(Errc::io_failure, "cannot open " + path.string());
    os << "row,col,sensitivity\n";
    for (std::uint32_t r = 0; r < map.rows; ++r)
        for (std::uint32_t c = 0; c < map.cols; ++c)
            os << r << "," << c << "," << map(r, c) << "\n";
    if (!os) fail(Errc::io_failure, "write failed for " + path.string());
}

// Column-position statistics for the left-to-right error accumulation check.
struct PositionalStats {
    double head_mean = 0.0;
    double tail_mean = 0.0;
    double ratio = 1.0;  // tail_mean / head_mean
    double head_median = 0.0, head_q25 = 0.0, head_q75 = 0.0;
    double tail_median = 0.0, tail_q25 = 0.0, tail_q75 = 0.0;
};

namespace detail {

inline double quantile(std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace detail

inline PositionalStats positional_error_stats(const SensitivityMap& map, std::uint32_t head = 100,
                                              std::uint32_t tail = 100) {
    if (map.cols < head + tail)
        fail(Errc::shape_mismatch, "map needs at least head+tail columns");
    std::vector<double> hv, tv;
    hv.reserve(static_cast<std::size_t>(map.rows) * head);
    tv.reserve(static_cast<std::size_t>(map.rows) * tail);
    for (std::uint32_t r = 0; r < map.rows; ++r) {
        for (std::uint32_t c = 0; c < head; ++c) hv.push_back(map(r, c));
        for (std::uint32_t c = map.cols - tail; c < map.cols; ++c) tv.push_back(map(r, c));
    }
    PositionalStats st;
    for (double v : hv) st.head_mean += v;
    for (double v : tv) st.tail_mean += v;
    st.head_mean /= static_cast<double>(hv.size());
    st.tail_mean /= static_cast<double>(tv.size());
    st.ratio = (st.head_mean == st.tail_mean)
                   ? 1.0
                   : (st.head_mean > 0.0 ? st.tail_mean / st.head_mean
                                         : std::numeric_limits<double>::infinity());
    std::sort(hv.begin(), hv.end());
    std::sort(tv.begin(), tv.end());
    st.head_q25 = detail::quantile(hv, 0.25);
    st.head_median = detail::quantile(hv, 0.5);
    st.head_q75 = detail::quantile(hv, 0.75);
    st.tail_q25 = detail::quantile(tv, 0.25);
    st.tail_median = detail::quantile(tv, 0.5);
    st.tail_q75 = detail::quantile(tv, 0.75);
    return st;
}

// ---------------------------------------------------------------------------
// Method comparison harness at matched average bits.
// ---------------------------------------------------------------------------

enum class Method { rtn, gptq, spqr };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::rtn: return "RTN";
        case Method::gptq: return "GPTQ";
        case Method::spqr: return "SpQR";
    }
    return "?";
}

struct MethodSpec {
    Method method = Method::spqr;
    SolverConfig config;
};

struct ComparisonRow {
    std::string method;
    double avg_bits = 0.0;
    double relative_error = 0.0;
    std::uint64_t seed = 0;
    double outlier_rate = 0.0;
    double tau = 0.0;
};

// Estimated bits per parameter for a configuration. Raw (16-bit) statistics
// have no second level; each raw statistic is accounted at 16 bits.
inline double estimated_bits_for_config(const SolverConfig& cfg, double outlier_rate) {
    const double first = (static_cast<double>(cfg.scale_bits) + cfg.zero_bits) / cfg.beta1;
    double second = 0.0;
    if (cfg.scale_bits != kRawStatsBits) second += 32.0;
    if (cfg.zero_bits != kRawStatsBits) second += 32.0;
    second /= static_cast<double>(cfg.beta1) * cfg.beta2;
    return cfg.weight_bits + first + second + 32.0 * outlier_rate;
}

namespace detail {

inline double rtn_relative_error(const DenseTensor& W, const CodeMatrix& cm,
                                 const AffineParams& params, const Eigen::MatrixXd& H) {
    const DenseTensor recon = rtn_dequantize_matrix(cm, params);
    Eigen::MatrixXd delta(W.rows(), W.cols()), w0(W.rows(), W.cols());
    for (std::uint32_t r = 0; r < W.rows(); ++r)
        for (std::uint32_t c = 0; c < W.cols(); ++c) {
            w0(r, c) = W(r, c);
            delta(r, c) = static_cast<double>(recon(r, c)) - W(r, c);
        }
    return relative_layer_error(delta, w0, H);
}

}  // namespace detail

inline std::vector<ComparisonRow> compare_methods(const DenseTensor& W,
                                                  const std::vector<DenseTensor>& calib,
                                                  const std::vector<MethodSpec>& specs,
                                                  std::uint64_t seed) {
    if (calib.empty()) fail(Errc::empty_input, "need at least one calibration slab");
    HessianAccumulator acc(W.cols());
    for (const DenseTensor& X : calib) acc.accumulate(X);

    std::vector<ComparisonRow> rows;
    rows.reserve(specs.size());
    for (const MethodSpec& spec : specs) {
        ComparisonRow row;
        row.method = method_name(spec.method);
        row.seed = seed;
        if (spec.method == Method::rtn) {
            const auto [cm, params] =
                rtn_quantize_matrix(W, spec.config.beta1, spec.config.weight_bits,
                                    spec.config.quant_flags());
            row.relative_error = detail::rtn_relative_error(W, cm, params, acc.matrix());
            SolverConfig rtn_cfg = spec.config;
            rtn_cfg.scale_bits = kRawStatsBits;
            rtn_cfg.zero_bits = kRawStatsBits;
            row.avg_bits = estimated_bits_for_config(rtn_cfg, 0.0);
            row.outlier_rate = 0.0;
            row.tau = std::numeric_limits<double>::infinity();
        } else {
            const InverseCholesky icho = finalize(acc, spec.config.lambda_rel);
            SpqrResult result;
            if (spec.config.target_outlier_rate) {
                TuneResult tuned =
                    tune_tau(W, icho, spec.config, *spec.config.target_outlier_rate);
                result = std::move(tuned.result);
            } else {
                result = spqr_quantize(W, icho, spec.config);
            }
            row.relative_error = result.report.relative_error;
            row.avg_bits = estimated_bits_for_config(spec.config, result.report.outlier_rate);
            row.outlier_rate = result.report.outlier_rate;
            row.tau = result.report.tau;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace spqr
