#include "oracles.hpp"
#include "shadowda/shadowing.hpp"
#include "shadowda/w4dvar.hpp"

#include <gtest/gtest.h>

using namespace shadowda;

namespace {

struct Problem {
    ModelSpec model;
    Trajectory truth;
    ObservationSet obs;
    CompletedObservations completed;
};

Problem l96_problem(std::uint64_t seed, Index horizon) {
    Problem p{make_model("l96"), {}, {}, {}};
    Rng rng(seed);
    p.truth = generate_truth(p.model, rng, 1.0, horizon);
    p.obs = observe(p.truth, {0, 5, 10}, observation_steps(horizon, 10), 0.01 * Matrix::Identity(3, 3), rng);
    Climatology clim;
    clim.mean = Vector::Constant(15, 2.3);
    clim.covariance = 13.0 * Matrix::Identity(15, 15);
    p.completed = complete(p.obs, clim);
    return p;
}

Problem dw_problem(std::uint64_t seed, Index horizon) {
    Problem p{double_well(), {}, {}, {}};
    Rng rng(seed);
    p.truth = generate_truth(p.model, rng, 5.0, horizon);
    p.obs = observe(p.truth, {0}, observation_steps(horizon, 1), Matrix::Constant(1, 1, 0.16), rng);
    p.completed = complete(p.obs, {});
    return p;
}

}  // namespace

TEST(W4DVar, GradientMatchesFiniteDifferences) {
    const Problem p = l96_problem(81, 20);
    const Trajectory& u = p.completed.values;
    const Vector grad = w4dvar_gradient(p.model, u, p.obs);
    const Matrix fd = oracle::fd_jacobian(
        [&](const Vector& x) {
            Vector out(1);
            out[0] = w4dvar_cost(p.model, Trajectory::from_stacked(x, u.dim()), p.obs);
            return out;
        },
        u.stacked(), 1e-4);
    EXPECT_LT(oracle::rel_err(grad, fd.transpose()), 1e-5);
}

TEST(W4DVar, GaussNewtonMatrixMatchesDenseAssembly) {
    const Problem p = l96_problem(82, 10);
    const Trajectory& u = p.completed.values;
    const Matrix j = mismatch_jacobian(p.model, u).dense();
    const Matrix cm_inv = model_block_covariance(p.model, 10).dense().inverse();
    Matrix h = Matrix::Zero(p.obs.count(), u.stacked().size());
    for (Index k = 0; k < p.obs.observed_steps(); ++k)
        for (Index i = 0; i < 3; ++i) h(k * 3 + i, p.obs.steps[static_cast<std::size_t>(k)] * 15 + p.obs.components[static_cast<std::size_t>(i)]) = 1.0;
    const Matrix expected = j.transpose() * cm_inv * j + h.transpose() * h / 0.01;
    EXPECT_LT(oracle::rel_err(w4dvar_gauss_newton_matrix(p.model, u, p.obs).dense(), expected), 1e-12);
}

TEST(W4DVar, CostDecreasesMonotonically) {
    const Problem p = l96_problem(83, 200);
    const AssimilationResult r = w4dvar_solve(p.model, p.obs, p.completed, {}, {});
    ASSERT_GT(r.iterations, 0);
    double prev = w4dvar_cost(p.model, p.completed.values, p.obs);
    for (const auto& rec : r.trace) {
        const double j = rec.cost_obs + rec.cost_model;
        EXPECT_LT(j, prev);
        prev = j;
    }
    EXPECT_EQ(static_cast<Index>(r.trace.size()), r.iterations);
    EXPECT_EQ(r.termination, Termination::converged);
}

TEST(W4DVar, TightToleranceReachesStationaryPoint) {
    const Problem p = dw_problem(84, 400);
    W4DVarConfig cfg;
    cfg.tolerance = 1e-12;
    const double g0 = stationarity_residual(p.model, p.completed.values, p.obs);
    const AssimilationResult r = w4dvar_solve(p.model, p.obs, p.completed, {}, cfg);
    EXPECT_LT(stationarity_residual(p.model, r.analysis, p.obs), 1e-4 * g0);
}

TEST(W4DVar, NoiselessOrbitIsAlreadyOptimal) {
    const ModelSpec dw = double_well();
    Trajectory u(1, 50);
    u.state(0)[0] = 0.3;
    for (Index n = 0; n < 50; ++n) u.state(n + 1) = step_deterministic(dw, u.state(n), n);
    Rng rng(85);
    const ObservationSet obs = observe(u, {0}, observation_steps(50, 1), Matrix::Zero(1, 1), rng);
    ObservationSet with_cov = obs;
    with_cov.covariance = Matrix::Constant(1, 1, 0.16);
    const AssimilationResult r = w4dvar_minimize(dw, u, with_cov, {});
    EXPECT_EQ(r.iterations, 0);
    EXPECT_EQ(r.termination, Termination::converged);
    EXPECT_TRUE(r.analysis == u);
}

TEST(W4DVar, ShadowingAnalysisIsNotStationary) {
    const Problem p = dw_problem(86, 400);
    const AssimilationResult shadow = weak_shadow(p.model, p.completed, p.obs, {});
    const AssimilationResult var = w4dvar_solve(p.model, p.obs, p.completed, {}, {});
    const double rs = stationarity_residual(p.model, shadow.analysis, p.obs);
    const double rv = stationarity_residual(p.model, var.analysis, p.obs);
    EXPECT_GT(rs, 100.0 * rv);
    EXPECT_GT(rs, 1.0);
}

TEST(W4DVar, BackgroundInitializationNeedsClimatology) {
    const Problem p = l96_problem(87, 20);
    W4DVarConfig cfg;
    cfg.init = W4DVarInit::background;
    EXPECT_THROW(w4dvar_solve(p.model, p.obs, p.completed, {}, cfg), Error);
    Climatology clim;
    clim.mean = Vector::Constant(15, 2.3);
    clim.covariance = Matrix::Identity(15, 15);
    const AssimilationResult r = w4dvar_solve(p.model, p.obs, p.completed, clim, cfg);
    EXPECT_GT(r.iterations, 0);
    Trajectory start(15, 20);
    start.matrix().colwise() = clim.mean;
    EXPECT_LT(r.cost_obs + r.cost_model, w4dvar_cost(p.model, start, p.obs));
}

TEST(W4DVar, RejectedStepsAreCountedSeparately) {
    const Problem p = l96_problem(88, 100);
    W4DVarConfig cfg;
    cfg.initial_damping = 0.0;
    const AssimilationResult r = w4dvar_solve(p.model, p.obs, p.completed, {}, cfg);
    EXPECT_EQ(static_cast<Index>(r.alpha_history.size()), r.iterations);
    EXPECT_GE(r.rejected_steps, 0);
}

TEST(W4DVar, RejectsInvalidConfiguration) {
    W4DVarConfig cfg;
    cfg.damping_up = 1.0;
    EXPECT_THROW(cfg.validate(), Error);
    cfg = {};
    cfg.tolerance = 0.0;
    EXPECT_THROW(cfg.validate(), Error);
}
