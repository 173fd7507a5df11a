#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "spqr/common.hpp"
#include "spqr/tensor.hpp"

namespace spqr {

struct Permutation {
    std::vector<std::uint32_t> order;    // order[k] = source column placed at position k
    std::vector<std::uint32_t> inverse;  // inverse[order[k]] == k

    static Permutation identity(std::uint32_t n) {
        Permutation p;
        p.order.resize(n);
        p.inverse.resize(n);
        std::iota(p.order.begin(), p.order.end(), 0u);
        std::iota(p.inverse.begin(), p.inverse.end(), 0u);
        return p;
    }

    static Permutation from_order(std::vector<std::uint32_t> order) {
        Permutation p;
        p.inverse.assign(order.size(), 0u);
        std::vector<bool> seen(order.size(), false);
        for (std::uint32_t k = 0; k < order.size(); ++k) {
            const std::uint32_t src = order[k];
            if (src >= order.size() || seen[src]) fail(Errc::config_invalid, "order is not a bijection");
            seen[src] = true;
            p.inverse[src] = k;
        }
        p.order = std::move(order);
        return p;
    }

    bool is_identity() const {
        for (std::uint32_t k = 0; k < order.size(); ++k)
            if (order[k] != k) return false;
        return true;
    }

    std::uint32_t size() const { return static_cast<std::uint32_t>(order.size()); }
};

// Accumulates H = 2 X X^T over calibration batches in binary64. Mergeable by
// matrix addition; single writer at a time.
class HessianAccumulator {
public:
    explicit HessianAccumulator(std::uint32_t n)
        : n_(n), H_(Eigen::MatrixXd::Zero(n, n)) {
        if (n == 0) fail(Errc::shape_mismatch, "dimension must be >= 1");
    }

    void accumulate(const DenseTensor& X) {
        if (X.rows() != n_)
            fail(Errc::shape_mismatch, "calibration batch has " + std::to_string(X.rows()) +
                                           " rows, expected " + std::to_string(n_));
        using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        const Eigen::Map<const RowMajorF> xf(X.data().data(), X.rows(), X.cols());
        const Eigen::MatrixXd xd = xf.cast<double>();
        const Eigen::MatrixXd p = xd * xd.transpose();
        H_ += p + p.transpose();  // exactly symmetric form of 2 X X^T
        samples_ += X.cols();
    }

    void merge(const HessianAccumulator& other) {
        if (other.n_ != n_) fail(Errc::shape_mismatch, "accumulator dimension mismatch");
        H_ += other.H_;
        samples_ += other.samples_;
    }

    std::uint32_t dim() const { return n_; }
    std::int64_t samples_seen() const { return samples_; }
    const Eigen::MatrixXd& matrix() const { return H_; }

private:
    std::uint32_t n_;
    Eigen::MatrixXd H_;
    std::int64_t samples_ = 0;
};

// Upper-triangular factor C with C^T C = (H + lambda I)^{-1}. Carries the raw
// Hessian so reports and permuted re-factorizations can be derived from it.
struct InverseCholesky {
    std::uint32_t n = 0;
    Eigen::MatrixXd C;  // upper triangular
    double lambda = 0.0;
    Eigen::MatrixXd H;  // raw accumulated Hessian, pre-regularization

    double diag(std::uint32_t j) const { return C(j, j); }

    // [(H + lambda I)^{-1}]_jj; C is upper so this is the j-th column norm.
    double inverse_diag(std::uint32_t j) const { return C.col(j).squaredNorm(); }
};

namespace detail {

inline Eigen::MatrixXd regularized(const Eigen::MatrixXd& H_raw, double lambda) {
    Eigen::MatrixXd A = H_raw;
    // Dead-column rule: a column never activated by calibration keeps a unit
    // diagonal so the factorization stays well-posed.
    for (Eigen::Index j = 0; j < A.rows(); ++j)
        if (A(j, j) == 0.0) A(j, j) = 1.0;
    A.diagonal().array() += lambda;
    return A;
}

inline InverseCholesky factor_regularized(const Eigen::MatrixXd& H_raw, double lambda) {
    const Eigen::Index n = H_raw.rows();
    const Eigen::MatrixXd A = regularized(H_raw, lambda);

    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success)
        fail(Errc::not_positive_definite, "regularized Hessian is not positive definite");
    Eigen::MatrixXd Minv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    Minv = ((Minv + Minv.transpose()) * 0.5).eval();

    // M = L2 L2^T  with L2 lower  =>  C := L2^T is upper and C^T C = M.
    Eigen::LLT<Eigen::MatrixXd> llt2(Minv);
    if (llt2.info() != Eigen::Success)
        fail(Errc::not_positive_definite, "inverse Hessian lost positive definiteness");

    InverseCholesky out;
    out.n = static_cast<std::uint32_t>(n);
    out.C = Eigen::MatrixXd(llt2.matrixL()).transpose();
    out.lambda = lambda;
    out.H = H_raw;
    return out;
}

}  // namespace detail

// lambda = lambda_rel * mean(diag(H)) with the conventional 1% default.
inline InverseCholesky finalize(const HessianAccumulator& acc, double lambda_rel = 0.01) {
    if (acc.samples_seen() < 1) fail(Errc::empty_input, "no calibration samples accumulated");
    const double lambda = lambda_rel * acc.matrix().diagonal().mean();
    return detail::factor_regularized(acc.matrix(), lambda);
}

// Re-factors the same regularized problem with columns reordered;
// used when a solve applies a permutation internally.
inline InverseCholesky refactor_permuted(const InverseCholesky& icho, const Permutation& perm) {
    if (perm.size() != icho.n) fail(Errc::shape_mismatch, "permutation size mismatch");
    const Eigen::Index n = icho.n;
    Eigen::MatrixXd Hp(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) Hp(i, j) = icho.H(perm.order[i], perm.order[j]);
    return detail::factor_regularized(Hp, icho.lambda);
}

// Act-order heuristic: columns sorted by descending Hessian diagonal,
// ties broken by ascending index.
inline Permutation act_order(const HessianAccumulator& acc) {
    const auto d = acc.matrix().diagonal();
    std::vector<std::uint32_t> order(acc.dim());
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return d(a) > d(b); });
    return Permutation::from_order(std::move(order));
}

// Variant: ascending diagonal of the regularized inverse.
inline Permutation act_order_by_inverse_diag(const InverseCholesky& icho) {
    std::vector<std::uint32_t> order(icho.n);
    std::iota(order.begin(), order.end(), 0u);
    std::vector<double> d(icho.n);
    for (std::uint32_t j = 0; j < icho.n; ++j) d[j] = icho.inverse_diag(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return d[a] < d[b]; });
    return Permutation::from_order(std::move(order));
}

}  // namespace spqr
