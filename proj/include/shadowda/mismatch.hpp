#pragma once

#include "shadowda/core.hpp"
#include "shadowda/models.hpp"
#include "shadowda/obs.hpp"

#include <vector>

namespace shadowda {

/// G(u): N blocks G_n = u_{n+1} - F_n(u_n), stored column-wise (m x N).
struct MismatchVector {
    Matrix blocks;

    Index dim() const { return blocks.rows(); }
    Index count() const { return blocks.cols(); }
    Eigen::Map<const Vector> stacked() const { return {blocks.data(), blocks.size()}; }
    auto block(Index n) const { return blocks.col(n); }
};

inline MismatchVector mismatch(const ModelSpec& model, const Trajectory& u) {
    detail::require(u.dim() == model.dim(), "trajectory dimension does not match model");
    MismatchVector g{Matrix(u.dim(), u.horizon())};
    for (Index n = 0; n < u.horizon(); ++n) g.blocks.col(n) = u.state(n + 1) - model.step(u.state(n), n);
    return g;
}

/// Block row n is [-DF_n(u_n), I].
inline BlockBidiagonal mismatch_jacobian(const ModelSpec& model, const Trajectory& u) {
    detail::require(u.dim() == model.dim(), "trajectory dimension does not match model");
    std::vector<Matrix> lower;
    lower.reserve(static_cast<std::size_t>(u.horizon()));
    for (Index n = 0; n < u.horizon(); ++n) lower.push_back(-model.jacobian(u.state(n), n));
    return BlockBidiagonal(u.dim(), std::move(lower));
}

/// C_m as a block-diagonal covariance over the N mismatch blocks.
inline BlockCovariance model_block_covariance(const ModelSpec& model, Index horizon) {
    if (!model.has_noise()) throw Error("model '" + model.name() + "' has no model error covariance");
    return BlockCovariance::uniform(model.model_covariance(), std::max<Index>(horizon, 1));
}

/// J_o = 1/2 ||H(u) - y||^2_{C_o} over the raw observations.
inline double cost_obs(const Trajectory& u, const ObservationSet& obs) {
    return 0.5 * weighted_sq_norm(obs.innovation(u), obs.block_covariance());
}

/// Diagnostic variant of J_o against the completed observations.
inline double cost_obs(const Trajectory& u, const CompletedObservations& completed) {
    detail::require(u.size() == completed.values.size() && u.dim() == completed.values.dim(),
                    "trajectory does not match completed observations");
    const Vector diff = u.stacked() - completed.values.stacked();
    return 0.5 * weighted_sq_norm(diff, completed.covariance);
}

/// J_m = 1/2 ||G(u)||^2_{C_m}.
inline double cost_model(const ModelSpec& model, const Trajectory& u) {
    if (u.horizon() == 0) return 0.0;
    const MismatchVector g = mismatch(model, u);
    return 0.5 * weighted_sq_norm(Vector(g.stacked()), model_block_covariance(model, u.horizon()));
}

/// C_o^{-1/2} (H(u) - y), pooled over observed steps and components.
inline Vector normalized_data_mismatch(const Trajectory& u, const ObservationSet& obs) {
    return obs.block_covariance().apply_inv_sqrt(obs.innovation(u));
}

/// C_m^{-1/2} G(u), pooled over steps and components.
inline Vector normalized_model_mismatch(const ModelSpec& model, const Trajectory& u) {
    if (u.horizon() == 0) return {};
    const MismatchVector g = mismatch(model, u);
    return model_block_covariance(model, u.horizon()).apply_inv_sqrt(Vector(g.stacked()));
}

}  // namespace shadowda
