#pragma once

// Flat key = value experiment files. Top-level keys describe the twin
// experiment; each [method.<name>] section configures one method.
//
//   model = l96
//   n = 1000
//   obs.components = 0,5,10
//   obs.stride = 10
//   obs.variance = 0.01
//
//   [method.shadow]
//   type = shadow
//   rho = 0.8

#include "shadowda/core.hpp"
#include "shadowda/harness.hpp"
#include "shadowda/io.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace shadowda {

inline constexpr const char* artifact_version = "0.1.0";

class ConfigError : public Error {
public:
    ConfigError(const std::string& source, int line, const std::string& what)
        : Error(source + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + what), line_(line) {}
    int line() const noexcept { return line_; }

private:
    int line_;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct ConfigEntry {
    std::string value;
    int line = 0;
};

using ConfigSection = std::map<std::string, ConfigEntry>;

class SectionReader {
public:
    SectionReader(std::string source, const ConfigSection& entries) : source_(std::move(source)), entries_(entries) {}

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    template <class F>
    void read(const std::string& key, F&& assign) {
        auto it = entries_.find(key);
        if (it == entries_.end()) return;
        used_.push_back(key);
        try {
            assign(it->second.value);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(source_, it->second.line, "bad value for '" + key + "': " + e.what());
        }
    }

    void number(const std::string& key, double& out) {
        read(key, [&](const std::string& v) { out = parse_double(v); });
    }

    void integer(const std::string& key, Index& out) {
        read(key, [&](const std::string& v) {
            std::size_t used = 0;
            const long long x = std::stoll(v, &used);
            if (used != v.size()) throw Error("not an integer: '" + v + "'");
            out = static_cast<Index>(x);
        });
    }

    void reject_unused(const std::string& where) const {
        for (const auto& [key, entry] : entries_)
            if (std::find(used_.begin(), used_.end(), key) == used_.end())
                throw ConfigError(source_, entry.line, "unknown key '" + key + "' in " + where);
    }

    int line_of(const std::string& key) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? 0 : it->second.line;
    }

private:
    std::string source_;
    const ConfigSection& entries_;
    std::vector<std::string> used_;
};

inline std::vector<Index> parse_index_list(const std::string& text) {
    std::vector<Index> out;
    for (const std::string& field : split(text, ',')) {
        const std::string f = trim(field);
        std::size_t used = 0;
        const long long v = std::stoll(f, &used);
        if (used != f.size()) throw Error("not an integer: '" + f + "'");
        out.push_back(static_cast<Index>(v));
    }
    return out;
}

inline GramSolver parse_solver(const std::string& v) {
    if (v == "block_tridiagonal") return GramSolver::block_tridiagonal;
    if (v == "dense") return GramSolver::dense;
    throw Error("expected block_tridiagonal or dense, got '" + v + "'");
}

inline std::string to_string(GramSolver s) { return s == GramSolver::dense ? "dense" : "block_tridiagonal"; }

inline MethodSpec read_method(const std::string& source, const std::string& name, const ConfigSection& entries) {
    SectionReader r(source, entries);
    MethodSpec m;
    m.name = name;
    if (!r.has("type")) throw ConfigError(source, 0, "[method." + name + "] needs a 'type' key");
    r.read("type", [&](const std::string& v) {
        if (v == "shadow") m.kind = MethodKind::shadow;
        else if (v == "newton") m.kind = MethodKind::newton;
        else if (v == "w4dvar") m.kind = MethodKind::w4dvar;
        else throw Error("expected shadow, newton or w4dvar, got '" + v + "'");
    });
    if (m.kind == MethodKind::w4dvar) {
        W4DVarConfig& w = m.w4dvar;
        r.read("init", [&](const std::string& v) {
            if (v == "observations") w.init = W4DVarInit::observations;
            else if (v == "background") w.init = W4DVarInit::background;
            else throw Error("expected observations or background, got '" + v + "'");
        });
        r.number("tolerance", w.tolerance);
        r.integer("max_iter", w.max_iterations);
        r.number("damping", w.initial_damping);
        r.number("damping_up", w.damping_up);
        r.number("damping_down", w.damping_down);
        r.number("max_damping", w.max_damping);
    } else {
        ShadowingConfig& s = m.shadowing;
        if (m.kind == MethodKind::shadow) {
            r.number("rho", s.rho);
            r.number("r", s.r);
            r.read("alpha", [&](const std::string& v) {
                if (v == "adaptive") s.fixed_alpha.reset();
                else s.fixed_alpha = parse_double(v);
            });
            r.number("alpha_ceiling", s.alpha_ceiling);
            r.read("step_norm", [&](const std::string& v) {
                if (v == "observed") s.step_norm = StepNorm::observed;
                else if (v == "completed") s.step_norm = StepNorm::completed;
                else throw Error("expected observed or completed, got '" + v + "'");
            });
        }
        r.integer("max_iter", s.max_iterations);
        r.number("newton_tolerance", s.newton_tolerance);
        r.read("solver", [&](const std::string& v) { s.solver = parse_solver(v); });
    }
    r.reject_unused("[method." + name + "] (type " + to_string(m.kind) + ")");
    return m;
}

}  // namespace detail

/// Parses an experiment file. Errors carry `source:line`.
inline ExperimentConfig parse_config(std::istream& is, const std::string& source = "<config>") {
    detail::ConfigSection top;
    std::vector<std::pair<std::string, detail::ConfigSection>> sections;
    detail::ConfigSection* current = &top;
    std::string raw;
    int lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        std::string line = raw;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(source, lineno, "unterminated section header");
            const std::string header = detail::trim(line.substr(1, line.size() - 2));
            const std::string prefix = "method.";
            if (header.rfind(prefix, 0) != 0 || header.size() == prefix.size())
                throw ConfigError(source, lineno, "unknown section '" + header + "' (expected [method.<name>])");
            const std::string name = header.substr(prefix.size());
            for (const auto& s : sections)
                if (s.first == name) throw ConfigError(source, lineno, "duplicate section [method." + name + "]");
            sections.emplace_back(name, detail::ConfigSection{});
            current = &sections.back().second;
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(source, lineno, "expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(source, lineno, "missing key before '='");
        if (value.empty()) throw ConfigError(source, lineno, "missing value for '" + key + "'");
        if (!current->emplace(key, detail::ConfigEntry{value, lineno}).second)
            throw ConfigError(source, lineno, "duplicate key '" + key + "'");
    }

    ExperimentConfig cfg;
    detail::SectionReader r(source, top);
    r.read("model", [&](const std::string& v) {
        if (!ModelRegistry::instance().contains(v))
            throw Error("unknown model '" + v + "' (registered: " + ModelRegistry::instance().names_joined() + ")");
        cfg.model = v;
    });
    r.read("sigma_m", [&](const std::string& v) { cfg.sigma_m = parse_double(v); });
    r.integer("n", cfg.horizon);
    r.read("obs.components", [&](const std::string& v) { cfg.observations.components = detail::parse_index_list(v); });
    r.integer("obs.stride", cfg.observations.stride);
    r.number("obs.variance", cfg.observations.variance);
    r.integer("climatology.steps", cfg.climatology_steps);
    r.number("spinup_time", cfg.spinup_time);
    r.integer("replicates", cfg.replicates);
    r.read("seed", [&](const std::string& v) {
        std::size_t used = 0;
        cfg.base_seed = std::stoull(v, &used);
        if (used != v.size() || v.front() == '-') throw Error("not a seed: '" + v + "'");
    });
    r.reject_unused("top level");
    for (const auto& [name, entries] : sections) cfg.methods.push_back(detail::read_method(source, name, entries));
    return cfg;
}

inline ExperimentConfig parse_config_string(const std::string& text, const std::string& source = "<config>") {
    std::istringstream is(text);
    return parse_config(is, source);
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path, 0, "cannot open config file");
    return parse_config(is, path);
}

/// Every field, in a fixed order, so that parse(serialize(c)) == c.
inline std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "model = " << cfg.model << '\n';
    if (cfg.sigma_m) os << "sigma_m = " << format_double(*cfg.sigma_m) << '\n';
    os << "n = " << cfg.horizon << '\n';
    os << "obs.components = ";
    for (std::size_t i = 0; i < cfg.observations.components.size(); ++i)
        os << (i ? "," : "") << cfg.observations.components[i];
    os << '\n';
    os << "obs.stride = " << cfg.observations.stride << '\n';
    os << "obs.variance = " << format_double(cfg.observations.variance) << '\n';
    os << "climatology.steps = " << cfg.climatology_steps << '\n';
    os << "spinup_time = " << format_double(cfg.spinup_time) << '\n';
    os << "replicates = " << cfg.replicates << '\n';
    os << "seed = " << cfg.base_seed << '\n';
    for (const MethodSpec& m : cfg.methods) {
        os << "\n[method." << m.name << "]\n";
        os << "type = " << to_string(m.kind) << '\n';
        if (m.kind == MethodKind::w4dvar) {
            const W4DVarConfig& w = m.w4dvar;
            os << "init = " << to_string(w.init) << '\n';
            os << "tolerance = " << format_double(w.tolerance) << '\n';
            os << "max_iter = " << w.max_iterations << '\n';
            os << "damping = " << format_double(w.initial_damping) << '\n';
            os << "damping_up = " << format_double(w.damping_up) << '\n';
            os << "damping_down = " << format_double(w.damping_down) << '\n';
            os << "max_damping = " << format_double(w.max_damping) << '\n';
            continue;
        }
        const ShadowingConfig& s = m.shadowing;
        if (m.kind == MethodKind::shadow) {
            os << "rho = " << format_double(s.rho) << '\n';
            os << "r = " << format_double(s.r) << '\n';
            os << "alpha = " << (s.fixed_alpha ? format_double(*s.fixed_alpha) : "adaptive") << '\n';
            os << "alpha_ceiling = " << format_double(s.alpha_ceiling) << '\n';
            os << "step_norm = " << to_string(s.step_norm) << '\n';
        }
        os << "max_iter = " << s.max_iterations << '\n';
        os << "newton_tolerance = " << format_double(s.newton_tolerance) << '\n';
        os << "solver = " << detail::to_string(s.solver) << '\n';
    }
    return os.str();
}

struct RunManifest {
    std::string command;
    std::string config_path;  ///< empty when the config came from flags or a preset
    ExperimentConfig config;
    std::uint64_t base_seed = 0;
    std::string output_dir;
    std::string started_at;  ///< UTC, ISO 8601
    unsigned jobs = 1;
    std::vector<std::string> argv;
};

inline nlohmann::json to_json(const RunManifest& m) {
    return {{"command", m.command},
            {"config_path", m.config_path},
            {"config", serialize_config(m.config)},
            {"base_seed", m.base_seed},
            {"artifact_version", artifact_version},
            {"output_dir", m.output_dir},
            {"started_at", m.started_at},
            {"jobs", m.jobs},
            {"deterministic", deterministic_mode()},
            {"argv", m.argv}};
}

}  // namespace shadowda
