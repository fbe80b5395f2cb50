#include "oracles.hpp"
#include "shadowda/shadowing.hpp"
#include "shadowda/w4dvar.hpp"

#include <gtest/gtest.h>

using namespace shadowda;

namespace {

struct Twin {
    Trajectory truth;
    ObservationSet obs;
    CompletedObservations completed;
};

Twin dw_twin(std::uint64_t seed, Index horizon) {
    const ModelSpec dw = double_well();
    Rng rng(seed);
    Twin t;
    t.truth = generate_truth(dw, rng, 5.0, horizon);
    t.obs = observe(t.truth, {0}, observation_steps(horizon, 1), Matrix::Constant(1, 1, 0.16), rng);
    t.completed = complete(t.obs, {});
    return t;
}

/// Minimizer of 1/2 ||J d + G||^2_{Cm} + alpha/2 ||d||^2_{Co} by dense normal equations.
Vector dense_lm_oracle(const Matrix& j, const Matrix& co, const Matrix& cm, const Vector& g, double alpha) {
    const Matrix cm_inv = cm.inverse();
    const Matrix lhs = j.transpose() * cm_inv * j + alpha * co.inverse();
    return lhs.ldlt().solve(-j.transpose() * cm_inv * g);
}

}  // namespace

TEST(LmStep, ZeroMismatchGivesZeroStep) {
    const ModelSpec dw = double_well();
    Trajectory u(1, 5);
    u.matrix().setOnes();
    const BlockCovariance co = BlockCovariance::uniform(Matrix::Constant(1, 1, 0.16), 6);
    const Vector d = lm_step(dw, u, 1.0, co, model_block_covariance(dw, 5));
    EXPECT_EQ(d.norm(), 0.0);
}

TEST(LmStep, MatchesDenseNormalEquations) {
    const ModelSpec l = make_model("l63");
    Rng rng(61);
    Trajectory u = generate_truth(l, rng, 5.0, 4);
    u.matrix() += 0.3 * oracle::random_matrix(rng, 3, 5);
    Rng crng(62);
    const Matrix co_block = oracle::random_spd(crng, 3);
    const BlockCovariance co = BlockCovariance::uniform(co_block, 5);
    const BlockCovariance cm = model_block_covariance(l, 4);
    const Matrix j = mismatch_jacobian(l, u).dense();
    const Vector g = mismatch(l, u).stacked();
    for (double alpha : {0.01, 1.0, 7.5, 300.0}) {
        const Vector oracle_step = dense_lm_oracle(j, co.dense(), cm.dense(), g, alpha);
        for (GramSolver s : {GramSolver::block_tridiagonal, GramSolver::dense})
            EXPECT_LT(oracle::rel_err(lm_step(l, u, alpha, co, cm, s), oracle_step), 1e-8) << alpha;
    }
}

TEST(LmStep, LargeAlphaApproachesScaledGradientStep) {
    const ModelSpec dw = double_well();
    Twin t = dw_twin(63, 20);
    const BlockCovariance cm = model_block_covariance(dw, 20);
    const Matrix j = mismatch_jacobian(dw, t.completed.values).dense();
    const Vector g = mismatch(dw, t.completed.values).stacked();
    const Vector limit = -t.completed.covariance.dense() * j.transpose() * cm.dense().inverse() * g;
    const double alpha = 1e8;
    const Vector d = lm_step(dw, t.completed.values, alpha, t.completed.covariance, cm);
    EXPECT_LT(oracle::rel_err(alpha * d, limit), 1e-6);
}

TEST(NewtonShadowing, FirstStepIsUnregularizedLmStep) {
    const ModelSpec dw = double_well(0.0);
    Twin t = dw_twin(64, 50);
    ShadowingConfig cfg;
    cfg.max_iterations = 1;
    const AssimilationResult r = newton_shadow(dw, t.completed.values, cfg);
    const BlockCovariance id_states = BlockCovariance::uniform(Matrix::Identity(1, 1), 51);
    const BlockCovariance id_mis = BlockCovariance::uniform(Matrix::Identity(1, 1), 50);
    const Vector d = lm_step(dw, t.completed.values, 0.0, id_states, id_mis);
    ASSERT_EQ(r.iterations, 1);
    EXPECT_LT(oracle::rel_err(r.analysis.stacked() - t.completed.values.stacked(), d), 1e-12);
}

TEST(NewtonShadowing, ExactOrbitNeedsNoIterations) {
    const ModelSpec l = lorenz63(0.0);
    Trajectory u(3, 30);
    u.state(0) = l.reference_state();
    for (Index n = 0; n < 30; ++n) u.state(n + 1) = step_deterministic(l, u.state(n), n);
    const AssimilationResult r = newton_shadow(l, u, {});
    EXPECT_EQ(r.iterations, 0);
    EXPECT_EQ(r.termination, Termination::converged);
}

TEST(NewtonShadowing, ConvergesNearDeterministicOrbit) {
    const ModelSpec dw = double_well(0.0);
    Trajectory orbit(1, 100);
    orbit.state(0)[0] = 0.6;
    for (Index n = 0; n < 100; ++n) orbit.state(n + 1) = step_deterministic(dw, orbit.state(n), n);
    Rng rng(65);
    std::normal_distribution<double> noise(0.0, 0.1);
    Trajectory guess = orbit;
    for (Index n = 0; n <= 100; ++n) guess.state(n)[0] += noise(rng);
    ShadowingConfig cfg;
    const AssimilationResult r = newton_shadow(dw, guess, cfg);
    EXPECT_EQ(r.termination, Termination::converged);
    EXPECT_LT(mismatch(dw, r.analysis).blocks.cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((r.analysis.matrix() - orbit.matrix()).cwiseAbs().maxCoeff(), 0.5);
}

TEST(AlphaSelection, CandidateSequence) {
    const auto c = alpha_candidates(0.0, 8.0);
    EXPECT_EQ(c, (std::vector<double>{0.0, 1.0, 2.0, 4.0, 8.0}));
    EXPECT_EQ(alpha_candidates(4.0, 16.0), (std::vector<double>{4.0, 8.0, 16.0}));
}

TEST(AlphaSelection, AcceptsZeroWhenDataFitIsExactAndStepTiny) {
    const ModelSpec dw = double_well();
    Trajectory u(1, 10);
    u.matrix().setOnes();
    u.state(5)[0] = 1.0 + 1e-6;
    ObservationSet obs;
    obs.state_dim = 1;
    obs.horizon = 10;
    obs.components = {0};
    obs.steps = observation_steps(10, 1);
    obs.values = u.matrix();
    obs.covariance = Matrix::Constant(1, 1, 0.16);
    const BlockCovariance co = obs.block_covariance();
    const AlphaSelection sel = select_alpha(dw, u, obs, co, {}, 0.0);
    ASSERT_TRUE(sel.feasible);
    EXPECT_EQ(sel.alpha, 0.0);
    EXPECT_NEAR(sel.bound, std::sqrt(11.0), 1e-12);
}

TEST(AlphaSelection, InfeasibleWhenDataNormExceedsBound) {
    const ModelSpec dw = double_well();
    Twin t = dw_twin(66, 30);
    Trajectory far = t.completed.values;
    far.matrix().array() += 5.0;
    const AlphaSelection sel = select_alpha(dw, far, t.obs, t.completed.covariance, {}, 0.0);
    EXPECT_FALSE(sel.feasible);
    EXPECT_LE(sel.bound, 0.0);
}

TEST(AlphaSelection, StepNormDecreasesWithAlpha) {
    const ModelSpec l = make_model("l96");
    Rng rng(67);
    const Trajectory truth = generate_truth(l, rng, 1.0, 60);
    Climatology clim;
    clim.mean = Vector::Constant(15, 2.3);
    clim.covariance = 13.0 * Matrix::Identity(15, 15);
    const ObservationSet obs = observe(truth, {0, 5, 10}, observation_steps(60, 10), 0.01 * Matrix::Identity(3, 3), rng);
    const CompletedObservations c = complete(obs, clim);
    const BlockCovariance cm = model_block_covariance(l, 60);
    const ShiftedGramSystem sys(mismatch_jacobian(l, c.values), c.covariance, cm);
    const Vector g = mismatch(l, c.values).stacked();
    for (StepNorm kind : {StepNorm::observed, StepNorm::completed}) {
        double prev = std::numeric_limits<double>::infinity();
        for (int k = 0; k < 10; ++k) {
            const double alpha = std::pow(10.0, -2.0 + 0.6 * k);
            const double norm = discrepancy_step_norm(sys.solve(alpha, g, GramSolver::block_tridiagonal).delta, obs,
                                                      c.covariance, kind);
            EXPECT_LE(norm, prev * (1.0 + 1e-10)) << to_string(kind) << " alpha " << alpha;
            prev = norm;
        }
    }
}

TEST(AlphaSelection, StepNormsAgreeWhenFullyObserved) {
    Twin t = dw_twin(68, 20);
    Rng rng(69);
    const Vector d = oracle::random_vector(rng, 21);
    EXPECT_NEAR(discrepancy_step_norm(d, t.obs, t.completed.covariance, StepNorm::observed),
                discrepancy_step_norm(d, t.obs, t.completed.covariance, StepNorm::completed), 1e-12);
}

TEST(WeakShadowing, ThresholdBelowInitialMisfitStopsImmediately) {
    const ModelSpec dw = double_well();
    Twin t = dw_twin(70, 50);
    ShadowingConfig cfg;
    cfg.r = 1e-6;
    Trajectory start = t.completed.values;
    start.matrix().array() += 0.01;
    const AssimilationResult r = weak_shadow(dw, start, t.completed.covariance, t.obs, cfg);
    EXPECT_EQ(r.iterations, 0);
    EXPECT_EQ(r.termination, Termination::data_mismatch_bound);
    EXPECT_TRUE(r.analysis == start);
}

TEST(WeakShadowing, StoppingAndStepBoundInvariants) {
    for (StepNorm kind : {StepNorm::observed, StepNorm::completed}) {
        const ModelSpec dw = double_well();
        for (std::uint64_t seed = 71; seed < 74; ++seed) {
            Twin t = dw_twin(seed, 400);
            ShadowingConfig cfg;
            cfg.step_norm = kind;
            const AssimilationResult r = weak_shadow(dw, t.completed, t.obs, cfg);
            ASSERT_EQ(static_cast<Index>(r.trace.size()), r.iterations);
            ASSERT_EQ(static_cast<Index>(r.alpha_history.size()), r.iterations);
            ASSERT_GT(r.iterations, 0);
            const double m = static_cast<double>(t.obs.count());

            // Replay: every iterate before the last satisfies chi2 <= r, the last one does not.
            Trajectory u = t.completed.values;
            double alpha_prev = 0.0;
            for (Index k = 0; k < r.iterations; ++k) {
                EXPECT_LE(data_chi2_per_obs(u, t.obs), cfg.r);
                const double data_norm = std::sqrt(2.0 * cost_obs(u, t.obs));
                const AlphaSelection sel = select_alpha(dw, u, t.obs, t.completed.covariance, cfg, alpha_prev);
                ASSERT_TRUE(sel.feasible);
                EXPECT_EQ(sel.alpha, r.alpha_history[static_cast<std::size_t>(k)]);
                EXPECT_GE(sel.alpha, alpha_prev);
                EXPECT_LE(sel.step_norm, cfg.rho * (std::sqrt(m) - data_norm) * (1.0 + 1e-12));
                u += sel.delta;
                // Triangle inequality: the update never pushes the misfit past M.
                EXPECT_LT(2.0 * cost_obs(u, t.obs), m);
                alpha_prev = sel.alpha;
            }
            EXPECT_LT((u.matrix() - r.analysis.matrix()).cwiseAbs().maxCoeff(), 1e-12);
            if (r.termination == Termination::data_mismatch_bound) {
                EXPECT_GT(data_chi2_per_obs(r.analysis, t.obs), cfg.r);
            }
            EXPECT_TRUE(r.termination == Termination::data_mismatch_bound || r.termination == Termination::converged);
        }
    }
}

TEST(WeakShadowing, FirstFixedAlphaStepMatchesGaussNewtonStep) {
    const ModelSpec dw = double_well();
    Twin t = dw_twin(75, 100);
    ShadowingConfig cfg;
    cfg.fixed_alpha = 1.0;
    cfg.max_iterations = 1;
    cfg.r = 1.0;
    const AssimilationResult r = weak_shadow(dw, t.completed, t.obs, cfg);
    ASSERT_EQ(r.iterations, 1);
    const Vector gn = w4dvar_step(dw, t.completed.values, t.obs, 0.0);
    EXPECT_LT(oracle::rel_err(r.analysis.stacked() - t.completed.values.stacked(), gn), 1e-8);
}

TEST(WeakShadowing, TraceRecordsPostUpdateCosts) {
    const ModelSpec dw = double_well();
    Twin t = dw_twin(76, 200);
    const AssimilationResult r = weak_shadow(dw, t.completed, t.obs, {});
    ASSERT_FALSE(r.trace.empty());
    for (std::size_t k = 0; k < r.trace.size(); ++k) EXPECT_EQ(r.trace[k].k, static_cast<Index>(k + 1));
    EXPECT_DOUBLE_EQ(r.trace.back().cost_obs, r.cost_obs);
    EXPECT_DOUBLE_EQ(r.trace.back().cost_model, r.cost_model);
    EXPECT_EQ(r.obs_count, 201);
    EXPECT_EQ(r.model_count, 200);
}

TEST(WeakShadowing, RejectsInvalidConfiguration) {
    const ModelSpec dw = double_well();
    Twin t = dw_twin(77, 10);
    ShadowingConfig cfg;
    cfg.rho = 1.5;
    EXPECT_THROW(weak_shadow(dw, t.completed, t.obs, cfg), Error);
    cfg.rho = 0.8;
    cfg.r = 0.0;
    EXPECT_THROW(weak_shadow(dw, t.completed, t.obs, cfg), Error);
}
