#pragma once

// Twin experiments: a truth and one observation realization per replicate,
// shared by every configured method, aggregated over seeds.

#include "shadowda/core.hpp"
#include "shadowda/io.hpp"
#include "shadowda/mismatch.hpp"
#include "shadowda/models.hpp"
#include "shadowda/obs.hpp"
#include "shadowda/random.hpp"
#include "shadowda/shadowing.hpp"
#include "shadowda/w4dvar.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace shadowda {

enum class MethodKind { newton, shadow, w4dvar };

inline std::string to_string(MethodKind k) {
    switch (k) {
        case MethodKind::newton: return "newton";
        case MethodKind::shadow: return "shadow";
        case MethodKind::w4dvar: return "w4dvar";
    }
    return "unknown";
}

struct MethodSpec {
    std::string name;
    MethodKind kind = MethodKind::shadow;
    ShadowingConfig shadowing;
    W4DVarConfig w4dvar;

    bool operator==(const MethodSpec&) const = default;

    static MethodSpec newton(std::string name = "newton") { return {std::move(name), MethodKind::newton, {}, {}}; }
    static MethodSpec shadow(std::string name = "shadow", double rho = 0.8, double r = 0.99) {
        MethodSpec m{std::move(name), MethodKind::shadow, {}, {}};
        m.shadowing.rho = rho;
        m.shadowing.r = r;
        return m;
    }
    static MethodSpec shadow_fixed(std::string name, double alpha, double r) {
        MethodSpec m = shadow(std::move(name), 0.8, r);
        m.shadowing.fixed_alpha = alpha;
        return m;
    }
    static MethodSpec w4dvar_method(std::string name = "w4dvar", W4DVarInit init = W4DVarInit::observations) {
        MethodSpec m{std::move(name), MethodKind::w4dvar, {}, {}};
        m.w4dvar.init = init;
        return m;
    }
};

struct ObservationSpec {
    std::vector<Index> components{0};
    Index stride = 1;
    double variance = 0.16;  ///< C_o = variance * I

    bool operator==(const ObservationSpec&) const = default;
};

struct ExperimentConfig {
    std::string model = "dw";
    std::optional<double> sigma_m;  ///< unset: model default
    Index horizon = 4000;
    ObservationSpec observations;
    Index climatology_steps = 1000000;  ///< only used when observations are partial
    double spinup_time = 5.0;
    Index replicates = 100;
    std::uint64_t base_seed = 1;
    std::vector<MethodSpec> methods;

    bool operator==(const ExperimentConfig&) const = default;

    ModelSpec make_model() const { return shadowda::make_model(model, sigma_m); }

    bool fully_observed(Index state_dim) const {
        return static_cast<Index>(observations.components.size()) == state_dim && observations.stride == 1;
    }

    void validate() const {
        const ModelSpec spec = make_model();
        if (!spec.has_noise()) throw Error("experiment: sigma_m must be positive");
        if (horizon < 1) throw Error("experiment: n must be >= 1");
        if (replicates < 1) throw Error("experiment: replicates must be >= 1");
        if (!(spinup_time >= 0.0)) throw Error("experiment: spinup must be >= 0");
        if (observations.stride < 1) throw Error("experiment: obs.stride must be >= 1");
        if (!(observations.variance > 0.0)) throw Error("experiment: obs.variance must be positive");
        auto comps = observations.components;
        if (comps.empty()) throw Error("experiment: obs.components is empty");
        std::sort(comps.begin(), comps.end());
        if (std::adjacent_find(comps.begin(), comps.end()) != comps.end() || comps != observations.components)
            throw Error("experiment: obs.components must be strictly increasing");
        if (comps.front() < 0 || comps.back() >= spec.dim())
            throw Error("experiment: obs.components out of range for model '" + model + "' (dimension " +
                        std::to_string(spec.dim()) + ")");
        if (!fully_observed(spec.dim()) && climatology_steps < 10000)
            throw Error("experiment: climatology.steps must be >= 10000 for partial observations");
        if (methods.empty()) throw Error("experiment: no methods configured");
        for (std::size_t i = 0; i < methods.size(); ++i) {
            const MethodSpec& m = methods[i];
            if (m.name.empty()) throw Error("experiment: method without a name");
            for (std::size_t j = 0; j < i; ++j)
                if (methods[j].name == m.name) throw Error("experiment: duplicate method '" + m.name + "'");
            if (m.kind == MethodKind::w4dvar)
                m.w4dvar.validate();
            else
                m.shadowing.validate();
        }
    }
};

inline std::vector<std::string> preset_names() { return {"table1", "table2", "table3", "longrun"}; }

/// Twin-experiment setups for the double well, Lorenz 63 and Lorenz 96 studies.
inline ExperimentConfig preset(const std::string& name) {
    ExperimentConfig cfg;
    if (name == "table1") {
        cfg.model = "dw";
        cfg.horizon = 4000;
        cfg.observations = {{0}, 1, 0.16};
        cfg.methods = {MethodSpec::shadow_fixed("na_shadow", 1.0, 0.99), MethodSpec::shadow("shadow"),
                       MethodSpec::w4dvar_method("w4dvar")};
    } else if (name == "table2") {
        cfg.model = "l63";
        cfg.horizon = 2000;
        cfg.observations = {{0}, 1, 0.05};
        cfg.climatology_steps = 20000000;
        cfg.methods = {MethodSpec::shadow_fixed("na_shadow_r0.9", 1.0, 0.9),
                       MethodSpec::shadow_fixed("na_shadow_r0.99", 1.0, 0.99), MethodSpec::shadow("shadow"),
                       MethodSpec::w4dvar_method("w4dvar")};
    } else if (name == "table3" || name == "longrun") {
        cfg.model = "l96";
        cfg.horizon = name == "table3" ? 1000 : 10000;
        cfg.observations = {{0, 5, 10}, 10, 0.01};
        cfg.climatology_steps = 2000000;
        if (name == "table3") {
            cfg.methods = {MethodSpec::shadow_fixed("na_shadow_r0.9", 1.0, 0.9),
                           MethodSpec::shadow_fixed("na_shadow_r0.99", 1.0, 0.99), MethodSpec::shadow("shadow"),
                           MethodSpec::w4dvar_method("w4dvar_bg", W4DVarInit::background),
                           MethodSpec::w4dvar_method("w4dvar_obs", W4DVarInit::observations)};
        } else {
            cfg.replicates = 1;
            cfg.methods = {MethodSpec::shadow("shadow"), MethodSpec::w4dvar_method("w4dvar")};
        }
    } else {
        throw Error("unknown preset '" + name + "' (known: table1, table2, table3, longrun)");
    }
    return cfg;
}

/// Climatology of the deterministic model, memoized per process.
inline Climatology experiment_climatology(const ExperimentConfig& cfg) {
    const ModelSpec model = cfg.make_model();
    if (cfg.fully_observed(model.dim())) return {};
    static std::mutex mutex;
    static std::map<std::tuple<std::string, Index, double>, Climatology> cache;
    const auto key = std::make_tuple(cfg.model, cfg.climatology_steps, cfg.spinup_time);
    std::lock_guard<std::mutex> lock(mutex);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, climatology(model.with_sigma(0.0), cfg.climatology_steps, cfg.spinup_time)).first;
    return it->second;
}

/// FNV-1a over the raw bytes of the inputs a method consumes.
inline std::uint64_t input_hash(const ObservationSet& obs, const CompletedObservations& completed) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    mix(obs.values.data(), sizeof(double) * static_cast<std::size_t>(obs.values.size()));
    mix(obs.covariance.data(), sizeof(double) * static_cast<std::size_t>(obs.covariance.size()));
    mix(obs.steps.data(), sizeof(Index) * obs.steps.size());
    mix(obs.components.data(), sizeof(Index) * obs.components.size());
    mix(completed.values.matrix().data(), sizeof(double) * static_cast<std::size_t>(completed.values.matrix().size()));
    return h;
}

struct TwinData {
    Trajectory truth;
    ObservationSet observations;
    CompletedObservations completed;
};

/// Truth after spin-up, then observation noise, both from one seeded stream.
inline TwinData make_twin(const ExperimentConfig& cfg, const Climatology& clim, std::uint64_t seed) {
    const ModelSpec model = cfg.make_model();
    Rng rng = make_rng(seed);
    TwinData data{generate_truth(model, rng, cfg.spinup_time, cfg.horizon), {}, {}};
    const auto d = static_cast<Index>(cfg.observations.components.size());
    data.observations = observe(data.truth, cfg.observations.components,
                                observation_steps(cfg.horizon, cfg.observations.stride),
                                cfg.observations.variance * Matrix::Identity(d, d), rng);
    data.completed = complete(data.observations, clim);
    return data;
}

inline AssimilationResult run_method(const MethodSpec& method, const ModelSpec& model, const TwinData& data,
                                     const Climatology& clim) {
    switch (method.kind) {
        case MethodKind::newton: {
            AssimilationResult r = newton_shadow(model, data.completed.values, method.shadowing);
            evaluate_diagnostics(r, model, data.observations);
            return r;
        }
        case MethodKind::shadow: return weak_shadow(model, data.completed, data.observations, method.shadowing);
        case MethodKind::w4dvar: return w4dvar_solve(model, data.observations, data.completed, clim, method.w4dvar);
    }
    throw Error("unknown method kind");
}

struct MethodOutcome {
    std::string method;
    bool ok = false;
    std::string error;
    std::uint64_t input_hash = 0;
    AssimilationResult result;
};

struct ReplicateResult {
    std::uint64_t seed = 0;
    Trajectory truth;
    std::vector<MethodOutcome> outcomes;
};

inline ReplicateResult run_replicate(const ExperimentConfig& cfg, const Climatology& clim, std::uint64_t seed) {
    const ModelSpec model = cfg.make_model();
    TwinData data = make_twin(cfg, clim, seed);
    ReplicateResult out;
    out.seed = seed;
    for (const MethodSpec& method : cfg.methods) {
        MethodOutcome o;
        o.method = method.name;
        o.input_hash = input_hash(data.observations, data.completed);
        try {
            o.result = run_method(method, model, data, clim);
            o.ok = true;
        } catch (const Error& e) {
            o.error = e.what();
        }
        out.outcomes.push_back(std::move(o));
    }
    out.truth = std::move(data.truth);
    return out;
}

inline ReplicateResult run_replicate(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    return run_replicate(cfg, experiment_climatology(cfg), seed);
}

struct Moments {
    double mean = 0.0;
    double std = 0.0;
};

/// Mean and sample standard deviation of the sorted values, so the result
/// does not depend on the order of the inputs.
inline Moments sorted_moments(std::vector<double> values) {
    Moments out;
    if (values.empty()) {
        out.mean = out.std = std::numeric_limits<double>::quiet_NaN();
        return out;
    }
    std::sort(values.begin(), values.end());
    const double n = static_cast<double>(values.size());
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(ss / (n - 1.0));
    }
    return out;
}

struct MethodSummary {
    std::string method;
    Index replicates = 0;
    Index failures = 0;
    Moments iterations;
    Moments obs_cost;       ///< J_o / M
    Moments obs_cost_completed;  ///< J_o / ((N + 1) m)
    Moments model_cost;     ///< J_m / (N m)
    Moments combined_cost;  ///< 2 (J_o + J_m) / (M + N m)
};

struct EnsembleSummary {
    std::vector<MethodSummary> methods;

    const MethodSummary& at(const std::string& name) const {
        for (const auto& m : methods)
            if (m.method == name) return m;
        throw Error("no summary for method '" + name + "'");
    }
};

inline EnsembleSummary summarize(const std::vector<std::string>& methods, const std::vector<ReplicateResult>& replicates) {
    EnsembleSummary out;
    for (const std::string& name : methods) {
        MethodSummary s;
        s.method = name;
        std::vector<double> it, jo, joc, jm, comb;
        for (const ReplicateResult& rep : replicates)
            for (const MethodOutcome& o : rep.outcomes) {
                if (o.method != name) continue;
                ++s.replicates;
                if (!o.ok) {
                    ++s.failures;
                    continue;
                }
                const AssimilationResult& r = o.result;
                const auto m = static_cast<double>(r.obs_count);
                const auto nm = static_cast<double>(r.model_count);
                it.push_back(static_cast<double>(r.iterations));
                jo.push_back(r.cost_obs / m);
                joc.push_back(r.cost_obs / static_cast<double>(r.analysis.size() * r.analysis.dim()));
                jm.push_back(r.cost_model / nm);
                comb.push_back(2.0 * (r.cost_obs + r.cost_model) / (m + nm));
            }
        s.iterations = sorted_moments(it);
        s.obs_cost = sorted_moments(jo);
        s.obs_cost_completed = sorted_moments(joc);
        s.model_cost = sorted_moments(jm);
        s.combined_cost = sorted_moments(comb);
        out.methods.push_back(std::move(s));
    }
    return out;
}

inline bool deterministic_mode() {
    const char* v = std::getenv("ASSIM_DETERMINISTIC");
    return v != nullptr && std::strcmp(v, "1") == 0;
}

struct EnsembleResult {
    EnsembleSummary summary;
    std::vector<ReplicateResult> replicates;  ///< in seed order
};

/// Replicates for seeds base_seed .. base_seed + R - 1 on `jobs` workers.
/// ASSIM_DETERMINISTIC=1 forces a single worker.
inline EnsembleResult run_ensemble(const ExperimentConfig& cfg, unsigned jobs = 1) {
    cfg.validate();
    const Climatology clim = experiment_climatology(cfg);
    if (deterministic_mode() || jobs == 0) jobs = 1;
    const auto count = static_cast<std::size_t>(cfg.replicates);
    jobs = static_cast<unsigned>(std::min<std::size_t>(jobs, count));

    EnsembleResult out;
    out.replicates.resize(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++)
            out.replicates[i] = run_replicate(cfg, clim, cfg.base_seed + i);
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < jobs; ++t) pool.emplace_back(worker);
    }
    std::vector<std::string> names;
    for (const auto& m : cfg.methods) names.push_back(m.name);
    out.summary = summarize(names, out.replicates);
    return out;
}

struct Histogram {
    double lo = -6.0;
    double hi = 6.0;
    std::vector<std::uint64_t> counts;
    std::uint64_t total = 0;  ///< including samples outside [lo, hi)
    double mean = 0.0;
    double variance = 0.0;  ///< sample variance
    double skewness = 0.0;

    Index bins() const { return static_cast<Index>(counts.size()); }
    double width() const { return (hi - lo) / static_cast<double>(counts.size()); }
    double bin_left(Index i) const { return lo + width() * static_cast<double>(i); }
    double bin_right(Index i) const { return lo + width() * static_cast<double>(i + 1); }
    double density(Index i) const {
        return total == 0 ? 0.0 : static_cast<double>(counts[static_cast<std::size_t>(i)]) / (static_cast<double>(total) * width());
    }
};

inline Histogram make_histogram(const Vector& samples, Index bins = 61, double lo = -6.0, double hi = 6.0) {
    detail::require(bins > 0 && hi > lo, "histogram needs bins > 0 and hi > lo");
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    h.total = static_cast<std::uint64_t>(samples.size());
    for (double v : samples) {
        if (!(v >= lo && v < hi)) continue;
        auto i = static_cast<std::size_t>((v - lo) / h.width());
        h.counts[std::min(i, h.counts.size() - 1)]++;
    }
    const auto n = static_cast<double>(samples.size());
    if (n > 0) h.mean = samples.mean();
    if (n > 1) {
        const Vector c = samples.array() - h.mean;
        h.variance = c.squaredNorm() / (n - 1.0);
        const double m2 = c.squaredNorm() / n;
        const double m3 = c.array().cube().sum() / n;
        h.skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
    }
    return h;
}

struct MismatchHistograms {
    Histogram data;
    Histogram model;
};

inline MismatchHistograms mismatch_histograms(const AssimilationResult& result, Index bins = 61, double lo = -6.0,
                                              double hi = 6.0) {
    return {make_histogram(result.data_mismatch, bins, lo, hi), make_histogram(result.model_mismatch, bins, lo, hi)};
}

/// Normalized mismatches of one method pooled over all successful replicates.
inline MismatchHistograms pooled_mismatch_histograms(const std::vector<ReplicateResult>& replicates,
                                                     const std::string& method, Index bins = 61, double lo = -6.0,
                                                     double hi = 6.0) {
    std::vector<double> data, model;
    for (const auto& rep : replicates)
        for (const auto& o : rep.outcomes) {
            if (o.method != method || !o.ok) continue;
            data.insert(data.end(), o.result.data_mismatch.begin(), o.result.data_mismatch.end());
            model.insert(model.end(), o.result.model_mismatch.begin(), o.result.model_mismatch.end());
        }
    const Eigen::Map<const Vector> dv(data.data(), static_cast<Index>(data.size()));
    const Eigen::Map<const Vector> mv(model.data(), static_cast<Index>(model.size()));
    return {make_histogram(dv, bins, lo, hi), make_histogram(mv, bins, lo, hi)};
}

struct UnobservedStats {
    std::string method;
    double distance = 0.0;  ///< ||X - u||^2 / (N (m - d)) over unobserved components
    double mean = 0.0;
    double std = 0.0;
    Histogram histogram;
};

struct LongRunResult {
    Index horizon = 0;
    std::vector<UnobservedStats> methods;  ///< "climatology" first, then the configured methods
    std::vector<MethodOutcome> outcomes;

    const UnobservedStats& at(const std::string& name) const {
        for (const auto& m : methods)
            if (m.method == name) return m;
        throw Error("no long-run statistics for '" + name + "'");
    }
};

inline std::vector<Index> unobserved_components(const ExperimentConfig& cfg, Index state_dim) {
    std::vector<Index> out;
    for (Index i = 0; i < state_dim; ++i)
        if (std::find(cfg.observations.components.begin(), cfg.observations.components.end(), i) ==
            cfg.observations.components.end())
            out.push_back(i);
    return out;
}

inline UnobservedStats unobserved_stats(std::string name, const Trajectory& truth, const Trajectory& u,
                                        const std::vector<Index>& unobserved, Index bins, double lo, double hi) {
    Vector values(static_cast<Index>(unobserved.size()) * u.size());
    double sq = 0.0;
    Index k = 0;
    for (Index n = 0; n < u.size(); ++n)
        for (Index c : unobserved) {
            const double diff = truth.state(n)[c] - u.state(n)[c];
            sq += diff * diff;
            values[k++] = u.state(n)[c];
        }
    UnobservedStats s;
    s.method = std::move(name);
    s.distance = sq / (static_cast<double>(u.horizon()) * static_cast<double>(unobserved.size()));
    s.histogram = make_histogram(values, bins, lo, hi);
    s.mean = s.histogram.mean;
    s.std = std::sqrt(s.histogram.variance);
    return s;
}

/// One long replicate: distances of each analysis (and of the climatological
/// mean) to the truth over unobserved components, and the spread of the
/// unobserved analysis values.
inline LongRunResult long_run_unobserved(const ExperimentConfig& cfg, Index bins = 70, double lo = -15.0,
                                         double hi = 20.0) {
    cfg.validate();
    const ModelSpec model = cfg.make_model();
    const std::vector<Index> unobserved = unobserved_components(cfg, model.dim());
    if (unobserved.empty()) throw Error("long run: every component is observed, the unobserved distance is undefined");
    const Climatology clim = experiment_climatology(cfg);
    ReplicateResult rep = run_replicate(cfg, clim, cfg.base_seed);

    LongRunResult out;
    out.horizon = cfg.horizon;
    Trajectory background(model.dim(), cfg.horizon);
    background.matrix().colwise() = clim.mean;
    out.methods.push_back(unobserved_stats("climatology", rep.truth, background, unobserved, bins, lo, hi));
    for (const auto& o : rep.outcomes)
        if (o.ok) out.methods.push_back(unobserved_stats(o.method, rep.truth, o.result.analysis, unobserved, bins, lo, hi));
    out.outcomes = std::move(rep.outcomes);
    return out;
}

inline void write_summary_csv(std::ostream& os, const EnsembleSummary& s) {
    os << "method,replicates,failures,iterations_mean,iterations_std,obs_cost_mean,obs_cost_std,"
          "model_cost_mean,model_cost_std,combined_cost_mean,combined_cost_std,obs_cost_completed_mean,"
          "obs_cost_completed_std\n";
    for (const auto& m : s.methods)
        os << m.method << ',' << m.replicates << ',' << m.failures << ',' << format_double(m.iterations.mean) << ','
           << format_double(m.iterations.std) << ',' << format_double(m.obs_cost.mean) << ','
           << format_double(m.obs_cost.std) << ',' << format_double(m.model_cost.mean) << ','
           << format_double(m.model_cost.std) << ',' << format_double(m.combined_cost.mean) << ','
           << format_double(m.combined_cost.std) << ',' << format_double(m.obs_cost_completed.mean) << ','
           << format_double(m.obs_cost_completed.std) << '\n';
}

/// One row per (replicate, method).
inline void write_replicates_csv(std::ostream& os, const std::vector<ReplicateResult>& replicates) {
    os << "seed,method,ok,iterations,rejected_steps,termination,J_o,J_m,M,Nm,input_hash,error\n";
    for (const auto& rep : replicates)
        for (const auto& o : rep.outcomes) {
            const AssimilationResult& r = o.result;
            std::string err = o.error;
            std::replace(err.begin(), err.end(), ',', ';');
            std::replace(err.begin(), err.end(), '\n', ' ');
            os << rep.seed << ',' << o.method << ',' << (o.ok ? 1 : 0) << ',' << r.iterations << ','
               << r.rejected_steps << ',' << (o.ok ? to_string(r.termination) : "error") << ','
               << format_double(r.cost_obs) << ',' << format_double(r.cost_model) << ',' << r.obs_count << ','
               << r.model_count << ',' << o.input_hash << ',' << err << '\n';
        }
}

inline void write_histogram_csv(std::ostream& os, const Histogram& h) {
    os << "bin_left,bin_right,count,density\n";
    for (Index i = 0; i < h.bins(); ++i)
        os << format_double(h.bin_left(i)) << ',' << format_double(h.bin_right(i)) << ','
           << h.counts[static_cast<std::size_t>(i)] << ',' << format_double(h.density(i)) << '\n';
}

namespace detail {

inline std::string json_number(double v) { return std::isfinite(v) ? format_double(v) : "null"; }

}  // namespace detail

/// One JSON object per applied update.
inline void write_trace_jsonl(std::ostream& os, const std::string& method, const AssimilationResult& r) {
    for (const auto& rec : r.trace)
        os << "{\"method\":" << nlohmann::json(method).dump() << ",\"k\":" << rec.k
           << ",\"alpha\":" << detail::json_number(rec.alpha) << ",\"J_o\":" << detail::json_number(rec.cost_obs)
           << ",\"J_m\":" << detail::json_number(rec.cost_model)
           << ",\"step_norm\":" << detail::json_number(rec.step_norm) << "}\n";
}

}  // namespace shadowda
