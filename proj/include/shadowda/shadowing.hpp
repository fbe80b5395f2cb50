#pragma once

// Shadowing-based assimilation. Newton shadowing refines an initial guess to
// a model orbit with minimum-norm Newton steps. Weak-constraint shadowing
// replaces those steps with Levenberg-Marquardt steps whose regularization
// is chosen by a discrepancy rule, and stops as soon as the data mismatch
// exceeds its expected level.

#include "shadowda/core.hpp"
#include "shadowda/mismatch.hpp"
#include "shadowda/models.hpp"
#include "shadowda/obs.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace shadowda {

enum class Termination { data_mismatch_bound, max_iterations, converged, alpha_infeasible };

inline std::string to_string(Termination t) {
    switch (t) {
        case Termination::data_mismatch_bound: return "data_mismatch_bound";
        case Termination::max_iterations: return "max_iterations";
        case Termination::converged: return "converged";
        case Termination::alpha_infeasible: return "alpha_infeasible";
    }
    return "unknown";
}

/// One applied update. `cost_obs` and `cost_model` are evaluated after the update.
struct IterationRecord {
    Index k = 0;
    double alpha = 0.0;
    double cost_obs = 0.0;
    double cost_model = 0.0;
    double step_norm = 0.0;
};

inline nlohmann::json to_json(const IterationRecord& r) {
    return {{"k", r.k}, {"alpha", r.alpha}, {"J_o", r.cost_obs}, {"J_m", r.cost_model}, {"step_norm", r.step_norm}};
}

struct AssimilationResult {
    Trajectory analysis;
    Index iterations = 0;
    Index rejected_steps = 0;  ///< LM trials that did not lower the cost
    std::vector<double> alpha_history;
    std::vector<IterationRecord> trace;
    Termination termination = Termination::converged;
    double cost_obs = std::numeric_limits<double>::quiet_NaN();
    double cost_model = std::numeric_limits<double>::quiet_NaN();
    Index obs_count = 0;    ///< M, raw scalar observations
    Index model_count = 0;  ///< N m
    Vector data_mismatch;   ///< C_o^{-1/2}(H(u) - y)
    Vector model_mismatch;  ///< C_m^{-1/2} G(u)
};

/// Fills the cost and normalized mismatch fields of a result.
inline void evaluate_diagnostics(AssimilationResult& result, const ModelSpec& model, const ObservationSet& obs) {
    const Trajectory& u = result.analysis;
    result.cost_obs = cost_obs(u, obs);
    result.obs_count = obs.count();
    result.data_mismatch = normalized_data_mismatch(u, obs);
    result.model_count = u.horizon() * u.dim();
    if (model.has_noise()) {
        result.cost_model = cost_model(model, u);
        result.model_mismatch = normalized_model_mismatch(model, u);
    }
}

/// Norm of the step in the discrepancy rule: the completed covariance
/// restricted to the observed entries, or over the whole trajectory.
enum class StepNorm { observed, completed };

inline std::string to_string(StepNorm s) { return s == StepNorm::observed ? "observed" : "completed"; }

struct ShadowingConfig {
    double rho = 0.8;
    double r = 0.99;
    std::optional<double> fixed_alpha;  ///< unset: adaptive discrepancy-principle alpha
    Index max_iterations = 50;
    double newton_tolerance = 1e-9;
    double alpha_ceiling = 1099511627776.0;  // 2^40
    GramSolver solver = GramSolver::block_tridiagonal;
    StepNorm step_norm = StepNorm::observed;

    bool adaptive() const { return !fixed_alpha.has_value(); }

    bool operator==(const ShadowingConfig&) const = default;

    void validate() const {
        if (!(rho > 0.0 && rho < 1.0)) throw Error("shadowing: rho must lie in (0, 1)");
        if (!(r > 0.0 && r <= 1.0)) throw Error("shadowing: r must lie in (0, 1]");
        if (fixed_alpha && !(*fixed_alpha >= 0.0)) throw Error("shadowing: fixed alpha must be >= 0");
        if (max_iterations < 0) throw Error("shadowing: max_iterations must be >= 0");
        if (!(newton_tolerance > 0.0)) throw Error("shadowing: newton_tolerance must be positive");
    }
};

/// delta = -Co J^T (J Co J^T + alpha Cm)^{-1} G(u).
inline Vector lm_step(const ModelSpec& model, const Trajectory& u, double alpha, const BlockCovariance& co_completed,
                      const BlockCovariance& cm, GramSolver solver = GramSolver::block_tridiagonal) {
    if (u.horizon() == 0) return Vector::Zero(u.dim());
    const MismatchVector g = mismatch(model, u);
    const BlockBidiagonal j = mismatch_jacobian(model, u);
    return solve_shifted_gram(j, co_completed, cm, alpha, Vector(g.stacked()), solver);
}

struct AlphaSelection {
    bool feasible = false;
    double alpha = 0.0;
    Vector delta;
    double step_norm = 0.0;
    double bound = 0.0;      ///< sqrt(M) - ||H(u) - y||_{Co}
};

/// ||delta|| in the metric selected by `kind`.
inline double discrepancy_step_norm(const Vector& delta, const ObservationSet& obs, const BlockCovariance& co_completed,
                                    StepNorm kind) {
    if (kind == StepNorm::completed) return std::sqrt(weighted_sq_norm(delta, co_completed));
    ObservationSet zero = obs;
    zero.values.setZero();
    const Vector hd = zero.innovation(Trajectory::from_stacked(delta, obs.state_dim));
    return std::sqrt(weighted_sq_norm(hd, obs.block_covariance()));
}

/// Candidates 0, 1, 2, 4, ... starting at `alpha_prev`.
inline std::vector<double> alpha_candidates(double alpha_prev, double ceiling) {
    std::vector<double> out;
    double a = alpha_prev;
    if (a == 0.0) {
        out.push_back(0.0);
        a = 1.0;
    }
    for (; a <= ceiling; a *= 2.0) out.push_back(a);
    return out;
}

/// Walks the candidate sequence from `alpha_prev` and accepts the first alpha
/// whose step satisfies rho^{-1} ||delta(alpha)||_{Co} <= sqrt(M) - ||H(u) - y||_{Co}.
inline AlphaSelection select_alpha(const ShiftedGramSystem& system, const Vector& g, const Trajectory& u,
                                   const ObservationSet& obs, const BlockCovariance& co_completed,
                                   const ShadowingConfig& cfg, double alpha_prev) {
    AlphaSelection sel;
    const double data_norm = std::sqrt(weighted_sq_norm(obs.innovation(u), obs.block_covariance()));
    sel.bound = std::sqrt(static_cast<double>(obs.count())) - data_norm;
    if (!(sel.bound > 0.0)) return sel;
    for (double alpha : alpha_candidates(alpha_prev, cfg.alpha_ceiling)) {
        Vector delta = system.solve(alpha, g, cfg.solver).delta;
        const double norm = discrepancy_step_norm(delta, obs, co_completed, cfg.step_norm);
        if (norm / cfg.rho <= sel.bound) {
            sel.feasible = true;
            sel.alpha = alpha;
            sel.delta = std::move(delta);
            sel.step_norm = norm;
            return sel;
        }
    }
    return sel;
}

inline AlphaSelection select_alpha(const ModelSpec& model, const Trajectory& u, const ObservationSet& obs,
                                   const BlockCovariance& co_completed, const ShadowingConfig& cfg,
                                   double alpha_prev) {
    const MismatchVector g = mismatch(model, u);
    const BlockBidiagonal j = mismatch_jacobian(model, u);
    const BlockCovariance cm = model_block_covariance(model, u.horizon());
    const ShiftedGramSystem system(j, co_completed, cm);
    return select_alpha(system, Vector(g.stacked()), u, obs, co_completed, cfg, alpha_prev);
}

inline double data_chi2_per_obs(const Trajectory& u, const ObservationSet& obs) {
    return weighted_sq_norm(obs.innovation(u), obs.block_covariance()) / static_cast<double>(obs.count());
}

/// Weak-constraint shadowing from an explicit initial guess.
inline AssimilationResult weak_shadow(const ModelSpec& model, Trajectory initial, const BlockCovariance& co_completed,
                                      const ObservationSet& obs, const ShadowingConfig& cfg) {
    cfg.validate();
    detail::require(initial.dim() == model.dim() && initial.horizon() == obs.horizon,
                    "initial guess does not match model and observations");
    AssimilationResult result;
    result.analysis = std::move(initial);
    Trajectory& u = result.analysis;
    const BlockCovariance cm = model_block_covariance(model, u.horizon());

    double alpha_prev = 0.0;
    for (;;) {
        if (data_chi2_per_obs(u, obs) > cfg.r) {
            result.termination = Termination::data_mismatch_bound;
            break;
        }
        const MismatchVector g = mismatch(model, u);
        if (u.horizon() == 0 || g.blocks.cwiseAbs().maxCoeff() < cfg.newton_tolerance) {
            result.termination = Termination::converged;
            break;
        }
        if (result.iterations >= cfg.max_iterations) {
            result.termination = Termination::max_iterations;
            break;
        }
        const BlockBidiagonal j = mismatch_jacobian(model, u);
        const ShiftedGramSystem system(j, co_completed, cm);
        const Vector gv = g.stacked();

        double alpha = 0.0;
        Vector delta;
        double norm = 0.0;
        if (cfg.adaptive()) {
            AlphaSelection sel = select_alpha(system, gv, u, obs, co_completed, cfg, alpha_prev);
            if (!sel.feasible) {
                result.termination = Termination::alpha_infeasible;
                break;
            }
            alpha = sel.alpha;
            delta = std::move(sel.delta);
            norm = sel.step_norm;
            alpha_prev = alpha;
        } else {
            alpha = *cfg.fixed_alpha;
            delta = system.solve(alpha, gv, cfg.solver).delta;
            norm = discrepancy_step_norm(delta, obs, co_completed, cfg.step_norm);
        }
        u += delta;
        if (!u.all_finite()) throw SolverError("weak shadowing produced a non-finite iterate");
        ++result.iterations;
        result.alpha_history.push_back(alpha);
        result.trace.push_back({result.iterations, alpha, cost_obs(u, obs), cost_model(model, u), norm});
    }
    evaluate_diagnostics(result, model, obs);
    return result;
}

/// Weak-constraint shadowing initialized at the completed observations.
inline AssimilationResult weak_shadow(const ModelSpec& model, const CompletedObservations& completed,
                                      const ObservationSet& obs, const ShadowingConfig& cfg) {
    return weak_shadow(model, completed.values, completed.covariance, obs, cfg);
}

/// Newton shadowing: u <- u - J^T (J J^T)^{-1} G(u) until ||G||_inf falls
/// below the tolerance. Throws SolverError if ||G|| grows three times in a row.
inline AssimilationResult newton_shadow(const ModelSpec& model, const Trajectory& initial, const ShadowingConfig& cfg) {
    cfg.validate();
    detail::require(initial.dim() == model.dim(), "initial guess does not match model");
    AssimilationResult result;
    result.analysis = initial;
    Trajectory& u = result.analysis;
    const Index m = model.dim();
    if (u.horizon() == 0) return result;
    const BlockCovariance identity_states = BlockCovariance::uniform(Matrix::Identity(m, m), u.size());
    const BlockCovariance identity_mismatch = BlockCovariance::uniform(Matrix::Identity(m, m), u.horizon());

    double previous = std::numeric_limits<double>::infinity();
    int growth = 0;
    for (;;) {
        const MismatchVector g = mismatch(model, u);
        const double gmax = g.blocks.cwiseAbs().maxCoeff();
        if (!std::isfinite(gmax)) throw SolverError("newton shadowing: mismatch became non-finite");
        if (gmax < cfg.newton_tolerance) {
            result.termination = Termination::converged;
            break;
        }
        const double gnorm = g.blocks.norm();
        growth = gnorm > previous ? growth + 1 : 0;
        if (growth >= 3)
            throw SolverError("newton shadowing diverged: ||G|| grew for 3 consecutive iterations (||G|| = " +
                              std::to_string(gnorm) + " at iteration " + std::to_string(result.iterations) + ")");
        previous = gnorm;
        if (result.iterations >= cfg.max_iterations) {
            result.termination = Termination::max_iterations;
            break;
        }
        const BlockBidiagonal j = mismatch_jacobian(model, u);
        const Vector delta = solve_shifted_gram(j, identity_states, identity_mismatch, 0.0, Vector(g.stacked()), cfg.solver);
        u += delta;
        ++result.iterations;
        result.alpha_history.push_back(0.0);
        result.trace.push_back({result.iterations, 0.0, std::numeric_limits<double>::quiet_NaN(),
                                model.has_noise() ? cost_model(model, u) : std::numeric_limits<double>::quiet_NaN(),
                                delta.norm()});
    }
    result.model_count = u.horizon() * m;
    if (model.has_noise()) {
        result.cost_model = cost_model(model, u);
        result.model_mismatch = normalized_model_mismatch(model, u);
    }
    return result;
}

}  // namespace shadowda
