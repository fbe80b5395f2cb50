#pragma once

// Partial noisy observations y_n = H(X_n) + xi_n with H a component
// selection, and their completion to full-dimension "observations" using
// long-run climatological statistics of the deterministic model.

#include "shadowda/core.hpp"
#include "shadowda/models.hpp"
#include "shadowda/random.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace shadowda {

/// Raw observations: `values.col(k)` holds y at step `steps[k]`, restricted
/// to `components` (0-based).
struct ObservationSet {
    Index state_dim = 0;
    Index horizon = 0;
    std::vector<Index> components;
    std::vector<Index> steps;
    Matrix values;
    Matrix covariance;

    Index obs_dim() const { return static_cast<Index>(components.size()); }
    Index observed_steps() const { return static_cast<Index>(steps.size()); }
    /// Total scalar observation count M.
    Index count() const { return obs_dim() * observed_steps(); }
    bool fully_observed() const { return obs_dim() == state_dim && observed_steps() == horizon + 1; }

    /// H(u_n) for the observed components.
    Vector select(const Trajectory& u, Index n) const {
        Vector out(obs_dim());
        for (Index i = 0; i < obs_dim(); ++i) out[i] = u.state(n)[components[static_cast<std::size_t>(i)]];
        return out;
    }

    /// Stacked H(u) - y over observed steps.
    Vector innovation(const Trajectory& u) const {
        detail::require(u.dim() == state_dim && u.horizon() == horizon, "trajectory does not match observation set");
        Vector out(count());
        for (Index k = 0; k < observed_steps(); ++k)
            out.segment(k * obs_dim(), obs_dim()) = select(u, steps[static_cast<std::size_t>(k)]) - values.col(k);
        return out;
    }

    BlockCovariance block_covariance() const { return BlockCovariance::uniform(covariance, observed_steps()); }

    void validate() const {
        detail::require(state_dim > 0 && horizon >= 0, "observation set needs a state dimension and horizon");
        detail::require(!components.empty() && !steps.empty(), "observation set needs components and steps");
        detail::require(obs_dim() <= state_dim, "more observed components than state components");
        detail::require(std::is_sorted(components.begin(), components.end()) &&
                            std::adjacent_find(components.begin(), components.end()) == components.end(),
                        "observed components must be strictly increasing");
        detail::require(std::is_sorted(steps.begin(), steps.end()) &&
                            std::adjacent_find(steps.begin(), steps.end()) == steps.end(),
                        "observed steps must be strictly increasing");
        detail::require(components.front() >= 0 && components.back() < state_dim, "observed component out of range");
        detail::require(steps.front() >= 0 && steps.back() <= horizon, "observed step out of range");
        detail::require(values.rows() == obs_dim() && values.cols() == observed_steps(),
                        "observation values have wrong shape");
        detail::require(values.allFinite(), "observation values must be finite");
        detail::require(covariance.rows() == obs_dim() && covariance.cols() == obs_dim(),
                        "observation covariance has wrong shape");
    }
};

/// Steps 0, stride, 2*stride, ... <= horizon.
inline std::vector<Index> observation_steps(Index horizon, Index stride) {
    detail::require(stride > 0, "observation stride must be positive");
    std::vector<Index> out;
    for (Index n = 0; n <= horizon; n += stride) out.push_back(n);
    return out;
}

/// y_n = H(X_n) + xi_n with xi_n ~ N(0, C_o). A zero C_o gives noiseless data.
inline ObservationSet observe(const Trajectory& truth, std::vector<Index> components, std::vector<Index> steps,
                              const Matrix& co, Rng& rng) {
    ObservationSet obs;
    obs.state_dim = truth.dim();
    obs.horizon = truth.horizon();
    obs.components = std::move(components);
    obs.steps = std::move(steps);
    obs.covariance = co;
    detail::require(!obs.components.empty() && !obs.steps.empty(), "observe needs components and steps");
    obs.values.resize(obs.obs_dim(), obs.observed_steps());
    for (Index k = 0; k < obs.observed_steps(); ++k) obs.values.col(k) = obs.select(truth, obs.steps[static_cast<std::size_t>(k)]);
    if (!co.isZero(0.0)) {
        GaussianSampler noise(co);
        for (Index k = 0; k < obs.observed_steps(); ++k) obs.values.col(k) += noise(rng);
    }
    obs.validate();
    return obs;
}

struct Climatology {
    Vector mean;
    Matrix covariance;
    Index length = 0;
};

/// Long deterministic run after `spinup_time` of spin-up from the reference
/// state; streaming (Welford) mean and covariance over `n_steps` states.
inline Climatology climatology(const ModelSpec& model, Index n_steps, double spinup_time = 5.0) {
    detail::require(n_steps >= 10000, "climatology needs at least 1e4 steps");
    Vector x = model.reference_state();
    const Index spinup = steps_for_time(model, spinup_time);
    for (Index n = 0; n < spinup; ++n) x = step_deterministic(model, x, n);
    Climatology out;
    out.mean = Vector::Zero(model.dim());
    Matrix comoment = Matrix::Zero(model.dim(), model.dim());
    Vector delta(model.dim());
    for (Index k = 0; k < n_steps; ++k) {
        delta = x - out.mean;
        out.mean += delta / static_cast<double>(k + 1);
        comoment.noalias() += delta * (x - out.mean).transpose();
        x = step_deterministic(model, x, spinup + k);
    }
    out.covariance = comoment / static_cast<double>(n_steps - 1);
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
    out.length = n_steps;
    return out;
}

/// Full-dimension initial guess and its block covariance.
struct CompletedObservations {
    Trajectory values;
    BlockCovariance covariance;
};

/// Fills unobserved components and steps with the climatological mean. The
/// covariance keeps C_o on the observed components, the climatological
/// covariance on the unobserved ones and zero cross-covariance.
inline CompletedObservations complete(const ObservationSet& obs, const Climatology& clim) {
    obs.validate();
    const Index m = obs.state_dim;
    const bool need_clim = !obs.fully_observed();
    if (need_clim)
        detail::require(clim.mean.size() == m && clim.covariance.rows() == m && clim.covariance.cols() == m,
                        "climatology dimension does not match the state");

    CompletedObservations out{Trajectory(m, obs.horizon), {}};
    if (need_clim) out.values.matrix().colwise() = clim.mean;

    std::vector<bool> observed(static_cast<std::size_t>(m), false);
    for (auto c : obs.components) observed[static_cast<std::size_t>(c)] = true;

    for (Index k = 0; k < obs.observed_steps(); ++k)
        for (Index i = 0; i < obs.obs_dim(); ++i)
            out.values.state(obs.steps[static_cast<std::size_t>(k)])[obs.components[static_cast<std::size_t>(i)]] =
                obs.values(i, k);

    std::vector<Matrix> blocks;
    // Observed-step block.
    Matrix at_obs = Matrix::Zero(m, m);
    for (Index a = 0; a < m; ++a)
        for (Index b = 0; b < m; ++b)
            if (!observed[static_cast<std::size_t>(a)] && !observed[static_cast<std::size_t>(b)])
                at_obs(a, b) = clim.covariance(a, b);
    for (Index i = 0; i < obs.obs_dim(); ++i)
        for (Index j = 0; j < obs.obs_dim(); ++j)
            at_obs(obs.components[static_cast<std::size_t>(i)], obs.components[static_cast<std::size_t>(j)]) =
                obs.covariance(i, j);
    blocks.push_back(at_obs);

    std::vector<std::size_t> pattern(static_cast<std::size_t>(obs.horizon + 1), 1);
    for (auto n : obs.steps) pattern[static_cast<std::size_t>(n)] = 0;
    if (obs.observed_steps() < obs.horizon + 1) blocks.push_back(clim.covariance);

    try {
        out.covariance = BlockCovariance(blocks, std::move(pattern));
    } catch (const DimensionError&) {
        throw Error("completed observation covariance is singular or not symmetric");
    }
    return out;
}

}  // namespace shadowda
