// assimilate: twin-experiment driver.
//
//   assimilate truth      --model dw --n 4000 --seed 1 --out run
//   assimilate assimilate --model l96 --method w4dvar --init background --out run
//   assimilate ensemble   --config exp.cfg --jobs 4 --out run
//   assimilate reproduce  table3 --replicates 100 --out run
//
// Exit codes: 0 ok, 2 configuration error, 3 solver error.

#include "shadowda/config.hpp"
#include "shadowda/harness.hpp"
#include "shadowda/io.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace shadowda;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_config = 2;
constexpr int exit_solver = 3;

struct Options {
    std::string config_path;
    std::optional<std::string> model;
    std::optional<Index> horizon;
    std::optional<std::uint64_t> seed;
    std::optional<Index> replicates;
    unsigned jobs = 1;
    std::string out = "out";
    std::string method = "shadow";
    std::optional<double> rho;
    std::optional<double> r;
    std::optional<std::string> alpha;
    std::optional<std::string> init;
    std::optional<Index> max_iter;
    std::string data_dir;
    std::string target;
};

struct Reference {
    double iterations, obs_cost, model_cost, combined;
};

const std::map<std::string, std::map<std::string, Reference>>& references() {
    static const std::map<std::string, std::map<std::string, Reference>> refs = {
        {"table1",
         {{"na_shadow", {2, 0.516, 0.050, 0.565}},
          {"shadow", {6.8, 0.492, 0.062, 0.554}},
          {"w4dvar", {4.3, 0.365, 0.133, 0.499}}}},
        {"table2",
         {{"na_shadow_r0.9", {3.7, 0.54, 0.10, 0.41}},
          {"na_shadow_r0.99", {4, 0.6, 0.09, 0.43}},
          {"shadow", {6.2, 0.494, 0.101, 0.398}},
          {"w4dvar", {5.1, 0.064, 0.145, 0.249}}}},
        {"table3",
         {{"na_shadow_r0.9", {3.2, 0.50, 0.03, 0.09}},
          {"na_shadow_r0.99", {3.7, 0.59, 0.03, 0.08}},
          {"shadow", {6.5, 0.498, 0.03, 0.08}},
          {"w4dvar_bg", {55, 0.017, 0.014, 0.028}},
          {"w4dvar_obs", {49, 0.017, 0.011, 0.023}}}},
    };
    return refs;
}

const std::map<std::string, double> longrun_reference = {{"climatology", 18.8}, {"shadow", 16.5}, {"w4dvar", 22.7}};

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::string preset_for_model(const std::string& model) {
    if (model == "dw") return "table1";
    if (model == "l63") return "table2";
    if (model == "l96") return "table3";
    throw ConfigError("--model", 0,
                      "unknown model '" + model + "' (registered: " + ModelRegistry::instance().names_joined() + ")");
}

void apply_method_overrides(MethodSpec& m, const Options& o) {
    if (m.kind == MethodKind::w4dvar) {
        if (o.init) {
            if (*o.init == "observations" || *o.init == "obs") m.w4dvar.init = W4DVarInit::observations;
            else if (*o.init == "background" || *o.init == "bg") m.w4dvar.init = W4DVarInit::background;
            else throw ConfigError("--init", 0, "expected observations or background, got '" + *o.init + "'");
        }
        if (o.max_iter) m.w4dvar.max_iterations = *o.max_iter;
        return;
    }
    if (o.max_iter) m.shadowing.max_iterations = *o.max_iter;
    if (m.kind != MethodKind::shadow) return;
    if (o.rho) m.shadowing.rho = *o.rho;
    if (o.r) m.shadowing.r = *o.r;
    if (o.alpha) {
        if (*o.alpha == "adaptive") {
            m.shadowing.fixed_alpha.reset();
        } else {
            try {
                m.shadowing.fixed_alpha = parse_double(*o.alpha);
            } catch (const Error& e) {
                throw ConfigError("--alpha", 0, e.what());
            }
        }
    }
}

/// Config file (or the default setup of --model), then flag overrides.
ExperimentConfig resolve_config(const Options& o) {
    ExperimentConfig cfg;
    if (!o.config_path.empty()) {
        cfg = load_config(o.config_path);
        if (o.model) cfg.model = *o.model;
    } else {
        cfg = preset(preset_for_model(o.model.value_or("dw")));
    }
    if (!ModelRegistry::instance().contains(cfg.model))
        throw ConfigError("--model", 0,
                          "unknown model '" + cfg.model + "' (registered: " + ModelRegistry::instance().names_joined() + ")");
    if (o.horizon) cfg.horizon = *o.horizon;
    if (o.seed) cfg.base_seed = *o.seed;
    if (o.replicates) cfg.replicates = *o.replicates;
    for (auto& m : cfg.methods) apply_method_overrides(m, o);
    return cfg;
}

/// Keeps the configured method called `name`, or builds a default one of that kind.
ExperimentConfig select_method(ExperimentConfig cfg, const Options& o) {
    for (const auto& m : cfg.methods)
        if (m.name == o.method) {
            cfg.methods = {m};
            return cfg;
        }
    MethodSpec m;
    if (o.method == "shadow") m = MethodSpec::shadow();
    else if (o.method == "newton") m = MethodSpec::newton();
    else if (o.method == "w4dvar") m = MethodSpec::w4dvar_method();
    else throw ConfigError("--method", 0, "unknown method '" + o.method + "' (use shadow, newton, w4dvar or a configured name)");
    apply_method_overrides(m, o);
    cfg.methods = {m};
    return cfg;
}

unsigned effective_jobs(unsigned jobs) { return deterministic_mode() ? 1u : std::max(1u, jobs); }

fs::path prepare_output(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw ConfigError("--out", 0, "cannot create output directory '" + out + "': " + ec.message());
    return fs::path(out);
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p);
    if (!os) throw Error("cannot write " + p.string());
    return os;
}

void write_manifest(const fs::path& dir, const std::string& command, const Options& o, const ExperimentConfig& cfg,
                    const std::vector<std::string>& argv) {
    RunManifest m;
    m.command = command;
    m.config_path = o.config_path;
    m.config = cfg;
    m.base_seed = cfg.base_seed;
    m.output_dir = dir.string();
    m.started_at = utc_now();
    m.jobs = effective_jobs(o.jobs);
    m.argv = argv;
    open_out(dir / "manifest.json") << to_json(m).dump(2) << '\n';
    // Re-running with --config <dir>/config.resolved reproduces the outputs.
    open_out(dir / "config.resolved") << serialize_config(cfg);
}

void write_method_outputs(const fs::path& dir, const std::string& method, std::size_t replicate,
                          const AssimilationResult& r) {
    auto os = open_out(dir / ("trace_" + method + "_" + std::to_string(replicate) + ".jsonl"));
    write_trace_jsonl(os, method, r);
}

void write_histograms(const fs::path& dir, const std::string& method, const MismatchHistograms& h) {
    auto data = open_out(dir / ("histogram_" + method + "_data.csv"));
    write_histogram_csv(data, h.data);
    auto model = open_out(dir / ("histogram_" + method + "_model.csv"));
    write_histogram_csv(model, h.model);
}

int cmd_truth(const Options& o, const std::vector<std::string>& argv) {
    const ExperimentConfig cfg = resolve_config(o);
    cfg.validate();
    const fs::path dir = prepare_output(o.out);
    write_manifest(dir, "truth", o, cfg, argv);
    const TwinData data = make_twin(cfg, experiment_climatology(cfg), cfg.base_seed);
    auto t = open_out(dir / "truth.csv");
    write_trajectory_csv(t, data.truth);
    auto y = open_out(dir / "observations.csv");
    write_observations_csv(y, data.observations);
    std::cout << "wrote truth (" << data.truth.size() << " states) and " << data.observations.count()
              << " observations to " << dir.string() << '\n';
    return exit_ok;
}

int cmd_assimilate(const Options& o, const std::vector<std::string>& argv) {
    const ExperimentConfig cfg = select_method(resolve_config(o), o);
    cfg.validate();
    const fs::path dir = prepare_output(o.out);
    write_manifest(dir, "assimilate", o, cfg, argv);
    const ModelSpec model = cfg.make_model();
    const Climatology clim = experiment_climatology(cfg);

    TwinData data;
    if (o.data_dir.empty()) {
        data = make_twin(cfg, clim, cfg.base_seed);
    } else {
        std::ifstream is(fs::path(o.data_dir) / "observations.csv");
        if (!is) throw ConfigError(o.data_dir, 0, "no observations.csv in data directory");
        const auto d = static_cast<Index>(cfg.observations.components.size());
        data.observations = read_observations_csv(is, model.dim(), cfg.horizon,
                                                  cfg.observations.variance * Matrix::Identity(d, d));
        data.completed = complete(data.observations, clim);
    }
    const MethodSpec& method = cfg.methods.front();
    const AssimilationResult r = run_method(method, model, data, clim);

    auto a = open_out(dir / "analysis.csv");
    write_trajectory_csv(a, r.analysis);
    write_method_outputs(dir, method.name, 0, r);
    write_histograms(dir, method.name, mismatch_histograms(r));
    ReplicateResult rep;
    rep.seed = cfg.base_seed;
    rep.outcomes.push_back({method.name, true, {}, input_hash(data.observations, data.completed), r});
    auto s = open_out(dir / "summary.csv");
    write_summary_csv(s, summarize({method.name}, {rep}));

    std::cout << method.name << ": " << to_string(r.termination) << " after " << r.iterations << " iterations, J_o/M "
              << format_double(r.cost_obs / static_cast<double>(r.obs_count));
    if (r.model_count > 0) std::cout << ", J_m/Nm " << format_double(r.cost_model / static_cast<double>(r.model_count));
    std::cout << '\n';
    return exit_ok;
}

void write_ensemble(const fs::path& dir, const ExperimentConfig& cfg, const EnsembleResult& e) {
    auto s = open_out(dir / "summary.csv");
    write_summary_csv(s, e.summary);
    auto rows = open_out(dir / "replicates.csv");
    write_replicates_csv(rows, e.replicates);
    for (const auto& m : cfg.methods) write_histograms(dir, m.name, pooled_mismatch_histograms(e.replicates, m.name));
    for (std::size_t i = 0; i < e.replicates.size(); ++i)
        for (const auto& o : e.replicates[i].outcomes)
            if (o.ok) write_method_outputs(dir, o.method, i, o.result);
}

void print_summary(const EnsembleSummary& s, const std::map<std::string, Reference>* ref) {
    std::printf("%-18s %5s %15s %17s %17s %17s\n", "method", "fail", "iterations", "J_o/M", "J_m/Nm", "combined");
    for (const auto& m : s.methods) {
        std::printf("%-18s %5lld %7.2f+-%-6.2f %8.4f+-%-7.4f %8.4f+-%-7.4f %8.4f+-%-7.4f\n", m.method.c_str(),
                    static_cast<long long>(m.failures), m.iterations.mean, m.iterations.std, m.obs_cost.mean,
                    m.obs_cost.std, m.model_cost.mean, m.model_cost.std, m.combined_cost.mean, m.combined_cost.std);
        if (ref) {
            auto it = ref->find(m.method);
            if (it != ref->end())
                std::printf("%-18s %5s %15.2f %17.4f %17.4f %17.4f\n", "  reference", "", it->second.iterations,
                            it->second.obs_cost, it->second.model_cost, it->second.combined);
        }
    }
}

int cmd_ensemble(const Options& o, const std::vector<std::string>& argv) {
    const ExperimentConfig cfg = resolve_config(o);
    cfg.validate();
    const fs::path dir = prepare_output(o.out);
    write_manifest(dir, "ensemble", o, cfg, argv);
    const EnsembleResult e = run_ensemble(cfg, effective_jobs(o.jobs));
    write_ensemble(dir, cfg, e);
    print_summary(e.summary, nullptr);
    return exit_ok;
}

int run_table(const std::string& name, const Options& o, const fs::path& dir, const std::vector<std::string>& argv) {
    ExperimentConfig cfg = preset(name);
    if (o.seed) cfg.base_seed = *o.seed;
    if (o.replicates) cfg.replicates = *o.replicates;
    if (o.horizon) cfg.horizon = *o.horizon;
    for (auto& m : cfg.methods) apply_method_overrides(m, o);
    cfg.validate();
    prepare_output(dir.string());
    write_manifest(dir, "reproduce " + name, o, cfg, argv);
    const EnsembleResult e = run_ensemble(cfg, effective_jobs(o.jobs));
    write_ensemble(dir, cfg, e);
    std::cout << name << " (" << cfg.replicates << " replicates, N = " << cfg.horizon << ")\n";
    print_summary(e.summary, &references().at(name));
    return exit_ok;
}

int run_longrun(const Options& o, const fs::path& dir, const std::vector<std::string>& argv) {
    ExperimentConfig cfg = preset("longrun");
    if (o.seed) cfg.base_seed = *o.seed;
    if (o.horizon) cfg.horizon = *o.horizon;
    for (auto& m : cfg.methods) apply_method_overrides(m, o);
    cfg.validate();
    prepare_output(dir.string());
    write_manifest(dir, "reproduce longrun", o, cfg, argv);
    const LongRunResult lr = long_run_unobserved(cfg);
    auto os = open_out(dir / "longrun.csv");
    os << "method,distance,unobserved_mean,unobserved_std\n";
    std::cout << "longrun (N = " << cfg.horizon << ")\n";
    std::printf("%-12s %10s %10s %10s %10s\n", "method", "distance", "reference", "mean", "std");
    for (const auto& s : lr.methods) {
        os << s.method << ',' << format_double(s.distance) << ',' << format_double(s.mean) << ','
           << format_double(s.std) << '\n';
        auto h = open_out(dir / ("histogram_" + s.method + "_unobserved.csv"));
        write_histogram_csv(h, s.histogram);
        const auto ref = longrun_reference.find(s.method);
        std::printf("%-12s %10.3f %10.1f %10.3f %10.3f\n", s.method.c_str(), s.distance,
                    ref == longrun_reference.end() ? 0.0 : ref->second, s.mean, s.std);
    }
    for (const auto& out : lr.outcomes)
        if (!out.ok) std::cerr << out.method << " failed: " << out.error << '\n';
    return exit_ok;
}

int cmd_reproduce(const Options& o, const std::vector<std::string>& argv) {
    const fs::path dir = prepare_output(o.out);
    if (o.target == "table1" || o.target == "table2" || o.target == "table3") return run_table(o.target, o, dir, argv);
    if (o.target == "longrun") return run_longrun(o, dir, argv);
    if (o.target == "figures") {
        for (const char* t : {"table1", "table2", "table3"}) run_table(t, o, dir / t, argv);
        Options lo = o;
        lo.horizon.reset();
        return run_longrun(lo, dir / "longrun", argv);
    }
    throw ConfigError("reproduce", 0, "unknown target '" + o.target + "' (table1, table2, table3, figures, longrun)");
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv, argv + argc);
    Options o;
    CLI::App app{"Weak-constraint shadowing and 4DVar twin experiments"};
    app.require_subcommand(1);

    auto common = [&o](CLI::App* c) {
        c->add_option("--config", o.config_path, "experiment file (key = value, [method.<name>] sections)");
        c->add_option("--model", o.model, "model: " + ModelRegistry::instance().names_joined());
        c->add_option("--n", o.horizon, "assimilation window length in steps")->check(CLI::PositiveNumber);
        c->add_option("--seed", o.seed, "base seed");
        c->add_option("--replicates", o.replicates, "replicate count")->check(CLI::PositiveNumber);
        c->add_option("--jobs", o.jobs, "worker threads for replicates")->check(CLI::PositiveNumber);
        c->add_option("--out", o.out, "output directory");
        c->add_option("--rho", o.rho, "discrepancy safety factor in (0, 1)");
        c->add_option("--r", o.r, "data-mismatch stopping level");
        c->add_option("--alpha", o.alpha, "'adaptive' or a fixed regularization parameter");
        c->add_option("--init", o.init, "w4dvar initialization: observations | background");
        c->add_option("--max-iter", o.max_iter, "iteration cap")->check(CLI::NonNegativeNumber);
    };
    CLI::App* truth = app.add_subcommand("truth", "generate a truth trajectory and observations");
    common(truth);
    CLI::App* assim = app.add_subcommand("assimilate", "run one method on one realization");
    common(assim);
    assim->add_option("--method", o.method, "shadow | newton | w4dvar | configured method name");
    assim->add_option("--data", o.data_dir, "directory holding observations.csv (default: generate from --seed)");
    CLI::App* ensemble = app.add_subcommand("ensemble", "run all configured methods over replicates");
    common(ensemble);
    CLI::App* reproduce = app.add_subcommand("reproduce", "run a predefined study");
    common(reproduce);
    reproduce->add_option("target", o.target, "table1 | table2 | table3 | figures | longrun")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    }

    try {
        if (truth->parsed()) return cmd_truth(o, args);
        if (assim->parsed()) return cmd_assimilate(o, args);
        if (ensemble->parsed()) return cmd_ensemble(o, args);
        return cmd_reproduce(o, args);
    } catch (const SolverError& e) {
        std::cerr << "solver error: " << e.what() << '\n';
        return exit_solver;
    } catch (const FactorizationError& e) {
        std::cerr << "solver error: " << e.what() << '\n';
        return exit_solver;
    } catch (const BlowUpError& e) {
        std::cerr << "solver error: " << e.what() << '\n';
        return exit_solver;
    } catch (const Error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
