#pragma once

// Discrete-time test systems. Each model is an explicit Euler step of an ODE;
// the stochastic variant adds Gaussian model error with covariance C_m
// (Euler-Maruyama), the deterministic variant omits it.

#include "shadowda/core.hpp"
#include "shadowda/random.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace shadowda {

class ModelSpec {
public:
    using StepFn = std::function<Vector(const Vector&, Index)>;
    using JacobianFn = std::function<Matrix(const Vector&, Index)>;

    ModelSpec(std::string name, Index dim, double tau, double sigma_m, StepFn step, JacobianFn jacobian,
              Matrix covariance_shape, Vector reference_state)
        : name_(std::move(name)),
          dim_(dim),
          tau_(tau),
          sigma_m_(sigma_m),
          step_(std::move(step)),
          jacobian_(std::move(jacobian)),
          shape_(std::move(covariance_shape)),
          covariance_(tau * sigma_m * sigma_m * shape_),
          reference_(std::move(reference_state)) {
        detail::require(dim_ > 0 && tau_ > 0.0 && sigma_m_ >= 0.0, "model needs dim > 0, tau > 0, sigma_m >= 0");
        detail::require(covariance_.rows() == dim_ && covariance_.cols() == dim_ && reference_.size() == dim_,
                        "model covariance or reference state has wrong dimension");
        if (sigma_m_ > 0.0) noise_sqrt_ = CovarianceFactors(covariance_).sqrt;
    }

    const std::string& name() const noexcept { return name_; }
    Index dim() const noexcept { return dim_; }
    double tau() const noexcept { return tau_; }
    double sigma_m() const noexcept { return sigma_m_; }
    bool has_noise() const noexcept { return sigma_m_ > 0.0; }

    /// C_m; zero for the deterministic (sigma_m = 0) variant.
    const Matrix& model_covariance() const noexcept { return covariance_; }
    const Vector& reference_state() const noexcept { return reference_; }

    Vector step(const Vector& x, Index n) const { return step_(x, n); }
    Matrix jacobian(const Vector& x, Index n) const { return jacobian_(x, n); }

    /// Square root of C_m used to draw the model error.
    const Matrix& noise_sqrt() const noexcept { return noise_sqrt_; }

    /// Same dynamics with a different noise amplitude.
    ModelSpec with_sigma(double sigma_m) const {
        ModelSpec out = *this;
        out.sigma_m_ = sigma_m;
        out.covariance_ = tau_ * sigma_m * sigma_m * shape_;
        out.noise_sqrt_ = sigma_m > 0.0 ? CovarianceFactors(out.covariance_).sqrt : Matrix();
        return out;
    }

private:
    std::string name_;
    Index dim_;
    double tau_;
    double sigma_m_;
    StepFn step_;
    JacobianFn jacobian_;
    Matrix shape_;
    Matrix covariance_;
    Vector reference_;
    Matrix noise_sqrt_;
};

/// F_n(x); throws BlowUpError if the result is not finite.
inline Vector step_deterministic(const ModelSpec& model, const Vector& x, Index n) {
    Vector out = model.step(x, n);
    if (!out.allFinite()) throw BlowUpError(model.name(), n);
    return out;
}

/// F_n(x) + sqrt(C_m) eta_n.
inline Vector step_stochastic(const ModelSpec& model, const Vector& x, Index n, Rng& rng) {
    Vector out = model.step(x, n);
    if (model.has_noise()) {
        std::normal_distribution<double> normal(0.0, 1.0);
        Vector eta(model.dim());
        for (Index i = 0; i < eta.size(); ++i) eta[i] = normal(rng);
        out.noalias() += model.noise_sqrt() * eta;
    }
    if (!out.allFinite()) throw BlowUpError(model.name(), n);
    return out;
}

inline Matrix jacobian(const ModelSpec& model, const Vector& x, Index n) { return model.jacobian(x, n); }

/// Number of steps covering `time` model time units, rounding up.
inline Index steps_for_time(const ModelSpec& model, double time) {
    detail::require(time >= 0.0, "time span must be non-negative");
    const double ratio = time / model.tau();
    const double nearest = std::round(ratio);
    if (std::abs(ratio - nearest) < 1e-9 * std::max(1.0, nearest)) return static_cast<Index>(nearest);
    return static_cast<Index>(std::ceil(ratio));
}

/// Spins the stochastic model up from its reference state, discards the
/// spin-up and returns the following N+1 states.
inline Trajectory generate_truth(const ModelSpec& model, Rng& rng, double spinup_time, Index horizon) {
    detail::require(horizon >= 0, "horizon must be non-negative");
    Vector x = model.reference_state();
    const Index spinup = steps_for_time(model, spinup_time);
    for (Index n = 0; n < spinup; ++n) x = step_stochastic(model, x, n, rng);
    Trajectory truth(model.dim(), horizon);
    truth.state(0) = x;
    for (Index n = 0; n < horizon; ++n) truth.state(n + 1) = step_stochastic(model, truth.state(n), n, rng);
    return truth;
}

/// x_{n+1} = x_n + tau x_n (1 - x_n^2) + sqrt(tau) sigma_m eta_n.
inline ModelSpec double_well(double sigma_m = 1.0, double tau = 0.05) {
    auto step = [tau](const Vector& x, Index) -> Vector {
        Vector out(1);
        out[0] = x[0] + tau * x[0] * (1.0 - x[0] * x[0]);
        return out;
    };
    auto jac = [tau](const Vector& x, Index) -> Matrix {
        Matrix out(1, 1);
        out(0, 0) = 1.0 + tau * (1.0 - 3.0 * x[0] * x[0]);
        return out;
    };
    return ModelSpec("dw", 1, tau, sigma_m, step, jac, Matrix::Identity(1, 1), Vector::Ones(1));
}

/// Euler-discretized Lorenz 63 with the standard parameters (10, 28, 8/3).
/// The default noise gives tau * sigma_m^2 = 0.6.
inline ModelSpec lorenz63(double sigma_m = std::sqrt(120.0), double tau = 0.005) {
    static constexpr double s = 10.0, rho = 28.0, beta = 8.0 / 3.0;
    auto step = [tau](const Vector& x, Index) -> Vector {
        Vector out(3);
        out[0] = x[0] + tau * s * (x[1] - x[0]);
        out[1] = x[1] + tau * (rho * x[0] - x[1] - x[0] * x[2]);
        out[2] = x[2] + tau * (x[0] * x[1] - beta * x[2]);
        return out;
    };
    auto jac = [tau](const Vector& x, Index) -> Matrix {
        Matrix df(3, 3);
        df << -s, s, 0.0,
              rho - x[2], -1.0, -x[0],
              x[1], x[0], -beta;
        return Matrix::Identity(3, 3) + tau * df;
    };
    return ModelSpec("l63", 3, tau, sigma_m, step, jac, Matrix::Identity(3, 3), Vector::Ones(3));
}

/// Circulant correlation of the L96 model error: 0.5 on the diagonal, 0.25
/// on the cyclic neighbours.
inline Matrix lorenz96_covariance_shape(Index dim) {
    Matrix c = Matrix::Zero(dim, dim);
    for (Index l = 0; l < dim; ++l) {
        c(l, l) = 0.5;
        c(l, (l + 1) % dim) = 0.25;
        c(l, (l + dim - 1) % dim) = 0.25;
    }
    return c;
}

/// Euler-discretized Lorenz 96 with cyclic indices.
inline ModelSpec lorenz96(double sigma_m = std::sqrt(20.0), double tau = 0.005, Index dim = 15,
                          double forcing = 8.0) {
    detail::require(dim >= 4, "Lorenz 96 needs at least 4 components");
    auto wrap = [dim](Index l) { return (l + dim) % dim; };
    auto step = [tau, dim, forcing, wrap](const Vector& x, Index) -> Vector {
        Vector out(dim);
        for (Index l = 0; l < dim; ++l) {
            const double f = -x[wrap(l - 2)] * x[wrap(l - 1)] + x[wrap(l - 1)] * x[wrap(l + 1)] - x[l] + forcing;
            out[l] = x[l] + tau * f;
        }
        return out;
    };
    auto jac = [tau, dim, wrap](const Vector& x, Index) -> Matrix {
        Matrix out = Matrix::Identity(dim, dim) * (1.0 - tau);
        for (Index l = 0; l < dim; ++l) {
            out(l, wrap(l - 2)) += -tau * x[wrap(l - 1)];
            out(l, wrap(l - 1)) += tau * (x[wrap(l + 1)] - x[wrap(l - 2)]);
            out(l, wrap(l + 1)) += tau * x[wrap(l - 1)];
        }
        return out;
    };
    Vector reference = Vector::Constant(dim, forcing);
    reference[0] += 0.01;
    return ModelSpec("l96", dim, tau, sigma_m, step, jac, lorenz96_covariance_shape(dim), reference);
}

/// Name-keyed model factories. `sigma_m` overrides the default noise level.
class ModelRegistry {
public:
    using Factory = std::function<ModelSpec(std::optional<double>)>;

    static const ModelRegistry& instance() {
        static const ModelRegistry registry;
        return registry;
    }

    bool contains(const std::string& name) const { return factories_.count(name) > 0; }

    ModelSpec make(const std::string& name, std::optional<double> sigma_m = {}) const {
        const auto it = factories_.find(name);
        if (it == factories_.end()) throw Error("unknown model '" + name + "'; registered models: " + names_joined());
        return it->second(sigma_m);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [name, _] : factories_) out.push_back(name);
        return out;
    }

    std::string names_joined() const {
        std::string out;
        for (const auto& name : names()) out += (out.empty() ? "" : ", ") + name;
        return out;
    }

private:
    ModelRegistry() {
        factories_["dw"] = [](std::optional<double> s) { return double_well(s.value_or(1.0)); };
        factories_["l63"] = [](std::optional<double> s) { return lorenz63(s.value_or(std::sqrt(120.0))); };
        factories_["l96"] = [](std::optional<double> s) { return lorenz96(s.value_or(std::sqrt(20.0))); };
    }

    std::map<std::string, Factory> factories_;
};

inline ModelSpec make_model(const std::string& name, std::optional<double> sigma_m = {}) {
    return ModelRegistry::instance().make(name, sigma_m);
}

}  // namespace shadowda
