#pragma once

// Weak-constraint 4DVar: Levenberg-Marquardt minimization of J_o + J_m over
// the whole trajectory.

#include "shadowda/core.hpp"
#include "shadowda/mismatch.hpp"
#include "shadowda/models.hpp"
#include "shadowda/obs.hpp"
#include "shadowda/shadowing.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace shadowda {

enum class W4DVarInit { observations, background };

inline std::string to_string(W4DVarInit init) {
    return init == W4DVarInit::observations ? "observations" : "background";
}

struct W4DVarConfig {
    W4DVarInit init = W4DVarInit::observations;
    double tolerance = 1e-6;  ///< on |J_k - J_{k+1}| / J_0
    Index max_iterations = 500;
    double initial_damping = 1e-3;
    double damping_up = 10.0;
    double damping_down = 10.0;
    double max_damping = 1e16;

    bool operator==(const W4DVarConfig&) const = default;

    void validate() const {
        if (!(tolerance > 0.0)) throw Error("w4dvar: tolerance must be positive");
        if (max_iterations < 0) throw Error("w4dvar: max_iterations must be >= 0");
        if (!(initial_damping >= 0.0 && damping_up > 1.0 && damping_down > 1.0))
            throw Error("w4dvar: damping must be >= 0 with up/down factors > 1");
    }
};

namespace detail {

/// H^T C_o^{-1} H restricted to one observed step, as an m x m block.
inline Matrix observation_precision_block(const ObservationSet& obs) {
    const Matrix co_inv = CovarianceFactors(obs.covariance).inverse;
    Matrix out = Matrix::Zero(obs.state_dim, obs.state_dim);
    for (Index i = 0; i < obs.obs_dim(); ++i)
        for (Index j = 0; j < obs.obs_dim(); ++j)
            out(obs.components[static_cast<std::size_t>(i)], obs.components[static_cast<std::size_t>(j)]) = co_inv(i, j);
    return out;
}

}  // namespace detail

inline double w4dvar_cost(const ModelSpec& model, const Trajectory& u, const ObservationSet& obs) {
    return cost_obs(u, obs) + cost_model(model, u);
}

/// DG^T C_m^{-1} G + DH^T C_o^{-1} (H(u) - y).
inline Vector w4dvar_gradient(const ModelSpec& model, const Trajectory& u, const ObservationSet& obs) {
    const Index m = u.dim();
    Vector grad = Vector::Zero(u.stacked().size());
    if (u.horizon() > 0) {
        const MismatchVector g = mismatch(model, u);
        const BlockBidiagonal j = mismatch_jacobian(model, u);
        const BlockCovariance cm = model_block_covariance(model, u.horizon());
        Vector weighted(g.blocks.size());
        for (Index n = 0; n < u.horizon(); ++n) weighted.segment(n * m, m).noalias() = cm.inverse(0) * g.block(n);
        grad = j.apply_transpose(weighted);
    }
    const Matrix co_inv = CovarianceFactors(obs.covariance).inverse;
    const Vector innov = obs.innovation(u);
    for (Index k = 0; k < obs.observed_steps(); ++k) {
        const Vector w = co_inv * innov.segment(k * obs.obs_dim(), obs.obs_dim());
        const Index n = obs.steps[static_cast<std::size_t>(k)];
        for (Index i = 0; i < obs.obs_dim(); ++i) grad[n * m + obs.components[static_cast<std::size_t>(i)]] += w[i];
    }
    return grad;
}

/// Gauss-Newton matrix DG^T C_m^{-1} DG + DH^T C_o^{-1} DH, block-tridiagonal over N+1 blocks.
inline BlockTridiagonal w4dvar_gauss_newton_matrix(const ModelSpec& model, const Trajectory& u,
                                                   const ObservationSet& obs) {
    const Index m = u.dim();
    const Index horizon = u.horizon();
    BlockTridiagonal a;
    a.diag.assign(static_cast<std::size_t>(horizon + 1), Matrix::Zero(m, m));
    a.sub.resize(static_cast<std::size_t>(horizon));
    if (horizon > 0) {
        const BlockBidiagonal j = mismatch_jacobian(model, u);
        const BlockCovariance cm = model_block_covariance(model, horizon);
        const Matrix& w = cm.inverse(0);
        for (Index n = 0; n < horizon; ++n) {
            const auto idx = static_cast<std::size_t>(n);
            const Matrix wl = w * j.lower(n);
            a.diag[idx].noalias() += j.lower(n).transpose() * wl;
            a.diag[idx + 1] += w;
            a.sub[idx] = wl;
        }
    }
    const Matrix hp = detail::observation_precision_block(obs);
    for (auto n : obs.steps) a.diag[static_cast<std::size_t>(n)] += hp;
    return a;
}

/// Solves (A + damping diag(A)) delta = -grad at u.
inline Vector w4dvar_step(const ModelSpec& model, const Trajectory& u, const ObservationSet& obs, double damping) {
    BlockTridiagonal a = w4dvar_gauss_newton_matrix(model, u, obs);
    for (auto& d : a.diag) d.diagonal() *= (1.0 + damping);
    return -BlockTridiagonalCholesky(a).solve(w4dvar_gradient(model, u, obs));
}

/// ||DH^T C_o^{-1}(H(u) - y) + DG^T C_m^{-1} G(u)||_inf, zero at a stationary point.
inline double stationarity_residual(const ModelSpec& model, const Trajectory& u, const ObservationSet& obs) {
    return w4dvar_gradient(model, u, obs).cwiseAbs().maxCoeff();
}

/// Levenberg-Marquardt from an explicit initial trajectory. Iterations count
/// accepted steps; the damping of each accepted step is kept in alpha_history.
inline AssimilationResult w4dvar_minimize(const ModelSpec& model, Trajectory initial, const ObservationSet& obs,
                                          const W4DVarConfig& cfg) {
    cfg.validate();
    detail::require(initial.dim() == model.dim() && initial.horizon() == obs.horizon,
                    "initial guess does not match model and observations");
    AssimilationResult result;
    result.analysis = std::move(initial);
    Trajectory& u = result.analysis;

    const double j0 = w4dvar_cost(model, u, obs);
    double cost = j0;
    double damping = cfg.initial_damping;
    result.termination = Termination::max_iterations;
    if (j0 == 0.0) result.termination = Termination::converged;

    BlockTridiagonal a;
    Vector grad;
    bool stale = true;
    while (result.termination != Termination::converged && result.iterations < cfg.max_iterations) {
        if (stale) {
            a = w4dvar_gauss_newton_matrix(model, u, obs);
            grad = w4dvar_gradient(model, u, obs);
            stale = false;
            if (grad.cwiseAbs().maxCoeff() == 0.0) {
                result.termination = Termination::converged;
                break;
            }
        }
        BlockTridiagonal damped = a;
        for (auto& d : damped.diag) d.diagonal() *= (1.0 + damping);
        Vector delta;
        double trial_cost = std::numeric_limits<double>::infinity();
        Trajectory trial = u;
        try {
            delta = -BlockTridiagonalCholesky(damped).solve(grad);
            trial += delta;
            if (trial.all_finite()) trial_cost = w4dvar_cost(model, trial, obs);
        } catch (const FactorizationError&) {
            // A nearly singular Gauss-Newton matrix counts as a rejected step.
        }
        if (trial_cost < cost) {
            const double decrease = cost - trial_cost;
            u = std::move(trial);
            cost = trial_cost;
            ++result.iterations;
            result.alpha_history.push_back(damping);
            result.trace.push_back({result.iterations, damping, cost_obs(u, obs), cost_model(model, u), delta.norm()});
            damping /= cfg.damping_down;
            stale = true;
            if (decrease / j0 < cfg.tolerance) result.termination = Termination::converged;
        } else {
            ++result.rejected_steps;
            damping = damping == 0.0 ? 1e-12 : damping * cfg.damping_up;
            if (damping > cfg.max_damping)
                throw SolverError("w4dvar: no cost decrease found before damping overflow (iteration " +
                                  std::to_string(result.iterations) + ", J = " + std::to_string(cost) + ")");
        }
    }
    evaluate_diagnostics(result, model, obs);
    return result;
}

/// Weak-constraint 4DVar initialized at the completed observations or at
/// the climatological mean (background).
inline AssimilationResult w4dvar_solve(const ModelSpec& model, const ObservationSet& obs,
                                       const CompletedObservations& completed, const Climatology& clim,
                                       const W4DVarConfig& cfg) {
    Trajectory initial = completed.values;
    if (cfg.init == W4DVarInit::background) {
        detail::require(clim.mean.size() == model.dim(), "background initialization needs a climatology");
        initial.matrix().colwise() = clim.mean;
    }
    return w4dvar_minimize(model, std::move(initial), obs, cfg);
}

}  // namespace shadowda
