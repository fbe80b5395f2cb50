#pragma once

// Dense small-block linear algebra shared by every assimilation method:
// trajectories, block-diagonal covariances, the block-bidiagonal mismatch
// Jacobian and a block-tridiagonal SPD solver.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace shadowda {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

/// Raised when a Cholesky factorization loses positive-definiteness.
class FactorizationError : public Error {
public:
    FactorizationError(const std::string& what, Index block)
        : Error(what + " (block " + std::to_string(block) + ")"), block_(block) {}
    Index block() const noexcept { return block_; }

private:
    Index block_;
};

/// Raised when a model step produces non-finite output.
class BlowUpError : public Error {
public:
    BlowUpError(const std::string& model, Index step)
        : Error("model '" + model + "' produced a non-finite state at step " + std::to_string(step)),
          step_(step) {}
    Index step() const noexcept { return step_; }

private:
    Index step_;
};

/// Iterative solver failure (divergence, damping overflow).
class SolverError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

}  // namespace detail

/// Sequence of N+1 states of dimension m stored column-wise, so the stacked
/// vector (u_0, u_1, ..., u_N) is the contiguous column-major buffer.
class Trajectory {
public:
    Trajectory() = default;

    Trajectory(Index dim, Index horizon) : states_(Matrix::Zero(dim, horizon + 1)) {
        detail::require(dim > 0 && horizon >= 0, "trajectory needs dim > 0 and horizon >= 0");
    }

    explicit Trajectory(Matrix states) : states_(std::move(states)) {
        detail::require(states_.rows() > 0 && states_.cols() > 0, "trajectory needs at least one state");
    }

    static Trajectory from_stacked(const Vector& stacked, Index dim) {
        detail::require(dim > 0 && stacked.size() % dim == 0 && stacked.size() > 0,
                        "stacked vector length is not a positive multiple of the state dimension");
        return Trajectory(Eigen::Map<const Matrix>(stacked.data(), dim, stacked.size() / dim));
    }

    Index dim() const noexcept { return states_.rows(); }
    Index horizon() const noexcept { return states_.cols() - 1; }
    Index size() const noexcept { return states_.cols(); }

    auto state(Index n) { return states_.col(n); }
    auto state(Index n) const { return states_.col(n); }

    Eigen::Map<Vector> stacked() { return {states_.data(), states_.size()}; }
    Eigen::Map<const Vector> stacked() const { return {states_.data(), states_.size()}; }

    const Matrix& matrix() const noexcept { return states_; }
    Matrix& matrix() noexcept { return states_; }

    bool all_finite() const { return states_.allFinite(); }

    Trajectory& operator+=(const Vector& delta) {
        detail::require(delta.size() == states_.size(), "update length does not match trajectory");
        stacked() += delta;
        return *this;
    }

    friend bool operator==(const Trajectory& a, const Trajectory& b) {
        return a.states_.rows() == b.states_.rows() && a.states_.cols() == b.states_.cols() &&
               a.states_ == b.states_;
    }

private:
    Matrix states_;
};

/// Checks that a matrix is symmetric (relative 1e-12) and positive-definite.
inline bool is_spd(const Matrix& c) {
    if (c.rows() != c.cols() || c.rows() == 0 || !c.allFinite()) return false;
    const double scale = std::max(c.cwiseAbs().maxCoeff(), 1e-300);
    if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) return false;
    Eigen::SelfAdjointEigenSolver<Matrix> es(c, Eigen::EigenvaluesOnly);
    return es.info() == Eigen::Success && es.eigenvalues().minCoeff() > 0.0;
}

/// Factors of one SPD block: the block, its inverse and principal square roots.
struct CovarianceFactors {
    Matrix block;
    Matrix inverse;
    Matrix sqrt;
    Matrix inv_sqrt;

    explicit CovarianceFactors(const Matrix& c) : block(c) {
        if (!is_spd(c)) throw DimensionError("covariance block is not symmetric positive-definite");
        Eigen::SelfAdjointEigenSolver<Matrix> es(c);
        const Vector& w = es.eigenvalues();
        const Matrix& v = es.eigenvectors();
        sqrt = v * w.cwiseSqrt().asDiagonal() * v.transpose();
        inv_sqrt = v * w.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose();
        inverse = v * w.cwiseInverse().asDiagonal() * v.transpose();
    }
};

/// Block-diagonal covariance. Each of `count()` diagonal blocks is one of a
/// small set of distinct SPD blocks; the uniform case has a single block
/// replicated along the diagonal.
class BlockCovariance {
public:
    BlockCovariance() = default;

    static BlockCovariance uniform(const Matrix& block, Index count) {
        detail::require(count > 0, "block covariance needs a positive replication count");
        return BlockCovariance({block}, std::vector<std::size_t>(static_cast<std::size_t>(count), 0));
    }

    BlockCovariance(const std::vector<Matrix>& blocks, std::vector<std::size_t> pattern)
        : pattern_(std::move(pattern)) {
        detail::require(!blocks.empty(), "block covariance needs at least one block");
        auto factors = std::make_shared<std::vector<CovarianceFactors>>();
        factors->reserve(blocks.size());
        for (const auto& b : blocks) {
            detail::require(b.rows() == blocks.front().rows(), "covariance blocks differ in dimension");
            factors->emplace_back(b);
        }
        for (auto p : pattern_) detail::require(p < blocks.size(), "covariance pattern index out of range");
        factors_ = std::move(factors);
    }

    Index block_dim() const { return factors_ ? factors_->front().block.rows() : 0; }
    Index count() const { return static_cast<Index>(pattern_.size()); }
    bool is_uniform() const { return factors_ && factors_->size() == 1; }
    std::size_t distinct_blocks() const { return factors_ ? factors_->size() : 0; }
    std::size_t pattern(Index n) const { return pattern_[static_cast<std::size_t>(n)]; }

    const CovarianceFactors& factors(Index n) const { return (*factors_)[pattern(n)]; }
    const Matrix& block(Index n) const { return factors(n).block; }
    const Matrix& inverse(Index n) const { return factors(n).inverse; }
    const Matrix& sqrt(Index n) const { return factors(n).sqrt; }
    const Matrix& inv_sqrt(Index n) const { return factors(n).inv_sqrt; }

    Matrix dense() const {
        const Index d = block_dim();
        Matrix out = Matrix::Zero(d * count(), d * count());
        for (Index n = 0; n < count(); ++n) out.block(n * d, n * d, d, d) = block(n);
        return out;
    }

    /// Applies the block-diagonal matrix to a stacked vector.
    Vector apply(const Vector& v) const {
        check_length(v);
        const Index d = block_dim();
        Vector out(v.size());
        for (Index n = 0; n < v.size() / d; ++n)
            out.segment(n * d, d).noalias() = block(uniform_index(n)) * v.segment(n * d, d);
        return out;
    }

    Vector apply_inv_sqrt(const Vector& v) const {
        check_length(v);
        const Index d = block_dim();
        Vector out(v.size());
        for (Index n = 0; n < v.size() / d; ++n)
            out.segment(n * d, d).noalias() = inv_sqrt(uniform_index(n)) * v.segment(n * d, d);
        return out;
    }

    /// A uniform covariance accepts any multiple of the block dimension;
    /// a patterned one requires exactly `count()` blocks.
    void check_length(const Vector& v) const {
        const Index d = block_dim();
        detail::require(d > 0 && v.size() % d == 0, "vector length is not a multiple of the covariance block size");
        if (!is_uniform())
            detail::require(v.size() == d * count(), "vector length does not match patterned covariance");
    }

private:
    Index uniform_index(Index n) const { return is_uniform() ? 0 : n; }

    std::shared_ptr<const std::vector<CovarianceFactors>> factors_;
    std::vector<std::size_t> pattern_;
};

/// v^T C^{-1} v evaluated blockwise.
inline double weighted_sq_norm(const Vector& v, const BlockCovariance& c) {
    c.check_length(v);
    const Index d = c.block_dim();
    double sum = 0.0;
    for (Index n = 0; n < v.size() / d; ++n) {
        const auto seg = v.segment(n * d, d);
        sum += seg.dot(c.inverse(c.is_uniform() ? 0 : n) * seg);
    }
    return sum;
}

/// Jacobian of the mismatch functional: block row n is [L_n, I] at block
/// columns (n, n+1), with L_n = -DF_n(u_n). Shape mN x m(N+1).
class BlockBidiagonal {
public:
    BlockBidiagonal() = default;

    BlockBidiagonal(Index dim, std::vector<Matrix> lower) : dim_(dim), lower_(std::move(lower)) {
        for (const auto& l : lower_)
            detail::require(l.rows() == dim_ && l.cols() == dim_, "bidiagonal block has wrong shape");
    }

    Index dim() const noexcept { return dim_; }
    Index block_rows() const noexcept { return static_cast<Index>(lower_.size()); }
    const Matrix& lower(Index n) const { return lower_[static_cast<std::size_t>(n)]; }

    Vector apply(const Vector& x) const {
        detail::require(x.size() == dim_ * (block_rows() + 1), "bidiagonal apply: input length mismatch");
        Vector out(dim_ * block_rows());
        for (Index n = 0; n < block_rows(); ++n)
            out.segment(n * dim_, dim_).noalias() =
                lower(n) * x.segment(n * dim_, dim_) + x.segment((n + 1) * dim_, dim_);
        return out;
    }

    Vector apply_transpose(const Vector& z) const {
        detail::require(z.size() == dim_ * block_rows(), "bidiagonal transpose: input length mismatch");
        Vector out = Vector::Zero(dim_ * (block_rows() + 1));
        for (Index n = 0; n < block_rows(); ++n) {
            const auto zn = z.segment(n * dim_, dim_);
            out.segment(n * dim_, dim_).noalias() += lower(n).transpose() * zn;
            out.segment((n + 1) * dim_, dim_) += zn;
        }
        return out;
    }

    Matrix dense() const {
        const Index rows = dim_ * block_rows();
        Matrix out = Matrix::Zero(rows, rows + dim_);
        for (Index n = 0; n < block_rows(); ++n) {
            out.block(n * dim_, n * dim_, dim_, dim_) = lower(n);
            out.block(n * dim_, (n + 1) * dim_, dim_, dim_).setIdentity();
        }
        return out;
    }

private:
    Index dim_ = 0;
    std::vector<Matrix> lower_;
};

/// Symmetric block-tridiagonal matrix; `sub[i]` is block (i+1, i).
struct BlockTridiagonal {
    std::vector<Matrix> diag;
    std::vector<Matrix> sub;

    Index blocks() const { return static_cast<Index>(diag.size()); }
    Index block_dim() const { return diag.empty() ? 0 : diag.front().rows(); }

    Matrix dense() const {
        const Index d = block_dim();
        Matrix out = Matrix::Zero(d * blocks(), d * blocks());
        for (Index i = 0; i < blocks(); ++i) out.block(i * d, i * d, d, d) = diag[static_cast<std::size_t>(i)];
        for (Index i = 0; i + 1 < blocks(); ++i) {
            out.block((i + 1) * d, i * d, d, d) = sub[static_cast<std::size_t>(i)];
            out.block(i * d, (i + 1) * d, d, d) = sub[static_cast<std::size_t>(i)].transpose();
        }
        return out;
    }

    Vector multiply(const Vector& x) const {
        const Index d = block_dim();
        Vector out(x.size());
        for (Index i = 0; i < blocks(); ++i) {
            const auto idx = static_cast<std::size_t>(i);
            out.segment(i * d, d).noalias() = diag[idx] * x.segment(i * d, d);
            if (i > 0) out.segment(i * d, d).noalias() += sub[idx - 1] * x.segment((i - 1) * d, d);
            if (i + 1 < blocks()) out.segment(i * d, d).noalias() += sub[idx].transpose() * x.segment((i + 1) * d, d);
        }
        return out;
    }
};

/// Block Cholesky factorization A = L L^T of an SPD block-tridiagonal
/// matrix; L is block lower-bidiagonal with lower-triangular diagonal blocks.
class BlockTridiagonalCholesky {
public:
    explicit BlockTridiagonalCholesky(const BlockTridiagonal& a) : dim_(a.block_dim()) {
        const auto k = a.diag.size();
        detail::require(k > 0 && a.sub.size() + 1 == k, "block-tridiagonal matrix has inconsistent block counts");
        chol_.reserve(k);
        coupling_.reserve(k - 1);
        Matrix pivot;
        for (std::size_t i = 0; i < k; ++i) {
            pivot = a.diag[i];
            if (i > 0) pivot.noalias() -= coupling_[i - 1] * coupling_[i - 1].transpose();
            chol_.emplace_back(pivot);
            if (chol_.back().info() != Eigen::Success)
                throw FactorizationError("block-tridiagonal Cholesky lost positive-definiteness",
                                         static_cast<Index>(i));
            if (i + 1 < k) {
                // C_i = S_i L_i^{-T}
                Matrix ct = chol_.back().matrixL().solve(a.sub[i].transpose());
                coupling_.emplace_back(ct.transpose());
            }
        }
    }

    Vector solve(const Vector& b) const {
        const Index k = static_cast<Index>(chol_.size());
        detail::require(b.size() == dim_ * k, "block-tridiagonal solve: right-hand side length mismatch");
        Vector z(b.size());
        for (Index i = 0; i < k; ++i) {
            Vector rhs = b.segment(i * dim_, dim_);
            if (i > 0) rhs.noalias() -= coupling_[static_cast<std::size_t>(i - 1)] * z.segment((i - 1) * dim_, dim_);
            z.segment(i * dim_, dim_) = chol_[static_cast<std::size_t>(i)].matrixL().solve(rhs);
        }
        Vector x(b.size());
        for (Index i = k - 1; i >= 0; --i) {
            Vector rhs = z.segment(i * dim_, dim_);
            if (i + 1 < k) rhs.noalias() -= coupling_[static_cast<std::size_t>(i)].transpose() * x.segment((i + 1) * dim_, dim_);
            x.segment(i * dim_, dim_) = chol_[static_cast<std::size_t>(i)].matrixU().solve(rhs);
        }
        return x;
    }

private:
    Index dim_;
    std::vector<Eigen::LLT<Matrix>> chol_;
    std::vector<Matrix> coupling_;
};

enum class GramSolver { block_tridiagonal, dense };

/// The shifted Gram system S(alpha) = J Co J^T + alpha Cm of the regularized
/// step. J Co J^T is assembled once so several alpha can be tried cheaply.
class ShiftedGramSystem {
public:
    struct Solution {
        Vector delta;       ///< -Co J^T lambda, trajectory-shaped
        Vector multiplier;  ///< lambda = S(alpha)^{-1} g
    };

    ShiftedGramSystem(const BlockBidiagonal& j, const BlockCovariance& co, const BlockCovariance& cm)
        : j_(j), co_(co), cm_(cm) {
        const Index m = j.dim();
        const Index n = j.block_rows();
        detail::require(co.block_dim() == m && cm.block_dim() == m, "covariance block size does not match Jacobian");
        detail::require(co.is_uniform() || co.count() == n + 1, "observation covariance needs N+1 blocks");
        detail::require(cm.is_uniform() || cm.count() == n, "model covariance needs N blocks");
        detail::require(n > 0, "shifted Gram system needs at least one mismatch block");
        auto cob = [&](Index k) -> const Matrix& { return co.block(co.is_uniform() ? 0 : k); };
        base_.diag.resize(static_cast<std::size_t>(n));
        base_.sub.resize(static_cast<std::size_t>(n - 1));
        for (Index k = 0; k < n; ++k) {
            const auto idx = static_cast<std::size_t>(k);
            const Matrix& l = j.lower(k);
            base_.diag[idx].noalias() = l * cob(k) * l.transpose();
            base_.diag[idx] += cob(k + 1);
            if (k + 1 < n) base_.sub[idx].noalias() = j.lower(k + 1) * cob(k + 1);
        }
    }

    BlockTridiagonal matrix(double alpha) const {
        BlockTridiagonal s = base_;
        if (alpha != 0.0)
            for (Index k = 0; k < s.blocks(); ++k)
                s.diag[static_cast<std::size_t>(k)] += alpha * cm_.block(cm_.is_uniform() ? 0 : k);
        return s;
    }

    Solution solve(double alpha, const Vector& g, GramSolver solver = GramSolver::block_tridiagonal) const {
        if (!(alpha >= 0.0)) throw DimensionError("shift alpha must be non-negative");
        detail::require(g.size() == j_.dim() * j_.block_rows(), "mismatch vector length does not match Jacobian");
        Solution out;
        if (g.isZero(0.0)) {
            out.multiplier = Vector::Zero(g.size());
            out.delta = Vector::Zero(g.size() + j_.dim());
            return out;
        }
        const BlockTridiagonal s = matrix(alpha);
        if (solver == GramSolver::block_tridiagonal) {
            out.multiplier = BlockTridiagonalCholesky(s).solve(g);
        } else {
            Eigen::LLT<Matrix> llt(s.dense());
            if (llt.info() != Eigen::Success) throw FactorizationError("dense Gram Cholesky failed", 0);
            out.multiplier = llt.solve(g);
        }
        out.delta = -co_.apply(j_.apply_transpose(out.multiplier));
        return out;
    }

private:
    BlockBidiagonal j_;
    BlockCovariance co_;
    BlockCovariance cm_;
    BlockTridiagonal base_;
};

/// delta = -Co J^T (J Co J^T + alpha Cm)^{-1} g.
inline Vector solve_shifted_gram(const BlockBidiagonal& j, const BlockCovariance& co, const BlockCovariance& cm,
                                 double alpha, const Vector& g,
                                 GramSolver solver = GramSolver::block_tridiagonal) {
    return ShiftedGramSystem(j, co, cm).solve(alpha, g, solver).delta;
}

}  // namespace shadowda
