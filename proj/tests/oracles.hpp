#pragma once

#include "shadowda/core.hpp"
#include "shadowda/random.hpp"

#include <functional>

namespace oracle {

using shadowda::Index;
using shadowda::Matrix;
using shadowda::Vector;

inline Matrix random_matrix(shadowda::Rng& rng, Index rows, Index cols) {
    std::normal_distribution<double> n;
    Matrix a(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) a(i, j) = n(rng);
    return a;
}

inline Vector random_vector(shadowda::Rng& rng, Index n) { return random_matrix(rng, n, 1).col(0); }

/// A A^T + shift I, well conditioned for small shift >= 0.1.
inline Matrix random_spd(shadowda::Rng& rng, Index n, double shift = 0.5) {
    const Matrix a = random_matrix(rng, n, n);
    Matrix c = a * a.transpose() / static_cast<double>(n) + shift * Matrix::Identity(n, n);
    return 0.5 * (c + c.transpose());
}

/// Dense block-diagonal matrix with `count` copies of `block`.
inline Matrix block_diag(const Matrix& block, Index count) {
    const Index d = block.rows();
    Matrix out = Matrix::Zero(d * count, d * count);
    for (Index k = 0; k < count; ++k) out.block(k * d, k * d, d, d) = block;
    return out;
}

/// Central-difference Jacobian of f at x.
inline Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x, double h = 1e-5) {
    const Index n = x.size();
    const Index m = f(x).size();
    Matrix j(m, n);
    for (Index k = 0; k < n; ++k) {
        Vector xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        j.col(k) = (f(xp) - f(xm)) / (2.0 * h);
    }
    return j;
}

inline double rel_err(const Matrix& a, const Matrix& b) {
    const double scale = std::max(b.norm(), 1e-300);
    return (a - b).norm() / scale;
}

}  // namespace oracle
