#pragma once

// Text serialization of trajectories and observation sets. Doubles are
// written with 17 significant digits so a write/read cycle is bit-exact.

#include "shadowda/core.hpp"
#include "shadowda/obs.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace shadowda {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& text) {
    if (text.empty() || std::isspace(static_cast<unsigned char>(text.front())))
        throw Error("not a number: '" + text + "'");
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(text.c_str(), &end);
    if (end == text.c_str()) throw Error("not a number: '" + text + "'");
    if (*end != '\0') throw Error("trailing characters in number: '" + text + "'");
    if (errno == ERANGE && std::isinf(v)) throw Error("number out of range: '" + text + "'");
    return v;
}

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, sep)) out.push_back(field);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

inline std::string trim_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

}  // namespace detail

/// Columns: step, x0, x1, ..., x{m-1}.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& u) {
    os << "step";
    for (Index i = 0; i < u.dim(); ++i) os << ",x" << i;
    os << '\n';
    for (Index n = 0; n < u.size(); ++n) {
        os << n;
        for (Index i = 0; i < u.dim(); ++i) os << ',' << format_double(u.state(n)[i]);
        os << '\n';
    }
}

inline Trajectory read_trajectory_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw Error("trajectory csv: missing header");
    const auto header = detail::split(detail::trim_cr(line), ',');
    if (header.size() < 2 || header.front() != "step") throw Error("trajectory csv: bad header");
    const Index m = static_cast<Index>(header.size()) - 1;
    std::vector<double> data;
    Index rows = 0;
    while (std::getline(is, line)) {
        line = detail::trim_cr(line);
        if (line.empty()) continue;
        const auto fields = detail::split(line, ',');
        if (static_cast<Index>(fields.size()) != m + 1)
            throw Error("trajectory csv: row " + std::to_string(rows + 2) + " has the wrong number of fields");
        if (std::stoll(fields[0]) != rows) throw Error("trajectory csv: steps must be consecutive from 0");
        for (Index i = 1; i <= m; ++i) data.push_back(parse_double(fields[static_cast<std::size_t>(i)]));
        ++rows;
    }
    if (rows == 0) throw Error("trajectory csv: no states");
    return Trajectory(Eigen::Map<const Matrix>(data.data(), m, rows));
}

/// One row per scalar observation: step, component, value.
inline void write_observations_csv(std::ostream& os, const ObservationSet& obs) {
    os << "step,component,value\n";
    for (Index k = 0; k < obs.observed_steps(); ++k)
        for (Index i = 0; i < obs.obs_dim(); ++i)
            os << obs.steps[static_cast<std::size_t>(k)] << ',' << obs.components[static_cast<std::size_t>(i)] << ','
               << format_double(obs.values(i, k)) << '\n';
}

/// The csv carries values only; dimensions and covariance come from the caller.
inline ObservationSet read_observations_csv(std::istream& is, Index state_dim, Index horizon, const Matrix& covariance) {
    std::string line;
    if (!std::getline(is, line) || detail::trim_cr(line) != "step,component,value")
        throw Error("observation csv: expected header 'step,component,value'");
    std::map<std::pair<Index, Index>, double> cells;
    std::set<Index> steps, comps;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        line = detail::trim_cr(line);
        if (line.empty()) continue;
        const auto f = detail::split(line, ',');
        if (f.size() != 3) throw Error("observation csv: line " + std::to_string(lineno) + " needs 3 fields");
        const Index n = std::stoll(f[0]);
        const Index c = std::stoll(f[1]);
        cells[{n, c}] = parse_double(f[2]);
        steps.insert(n);
        comps.insert(c);
    }
    ObservationSet obs;
    obs.state_dim = state_dim;
    obs.horizon = horizon;
    obs.components.assign(comps.begin(), comps.end());
    obs.steps.assign(steps.begin(), steps.end());
    obs.covariance = covariance;
    obs.values.resize(obs.obs_dim(), obs.observed_steps());
    for (Index k = 0; k < obs.observed_steps(); ++k)
        for (Index i = 0; i < obs.obs_dim(); ++i) {
            const auto it = cells.find({obs.steps[static_cast<std::size_t>(k)], obs.components[static_cast<std::size_t>(i)]});
            if (it == cells.end()) throw Error("observation csv: every observed step needs every observed component");
            obs.values(i, k) = it->second;
        }
    obs.validate();
    return obs;
}

inline nlohmann::json matrix_to_json(const Matrix& a) {
    nlohmann::json rows = nlohmann::json::array();
    for (Index i = 0; i < a.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Index j = 0; j < a.cols(); ++j) row.push_back(a(i, j));
        rows.push_back(row);
    }
    return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    const auto rows = static_cast<Index>(j.size());
    const auto cols = rows > 0 ? static_cast<Index>(j.at(0).size()) : 0;
    Matrix out(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        if (static_cast<Index>(j.at(static_cast<std::size_t>(i)).size()) != cols) throw Error("ragged matrix in json");
        for (Index c = 0; c < cols; ++c)
            out(i, c) = j.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(c)).get<double>();
    }
    return out;
}

inline nlohmann::json to_json(const ObservationSet& obs) {
    nlohmann::json j;
    j["state_dim"] = obs.state_dim;
    j["horizon"] = obs.horizon;
    j["components"] = obs.components;
    j["steps"] = obs.steps;
    j["covariance"] = matrix_to_json(obs.covariance);
    // one row per observed step
    j["values"] = matrix_to_json(obs.values.transpose());
    return j;
}

inline ObservationSet observations_from_json(const nlohmann::json& j) {
    ObservationSet obs;
    obs.state_dim = j.at("state_dim").get<Index>();
    obs.horizon = j.at("horizon").get<Index>();
    obs.components = j.at("components").get<std::vector<Index>>();
    obs.steps = j.at("steps").get<std::vector<Index>>();
    obs.covariance = matrix_from_json(j.at("covariance"));
    obs.values = matrix_from_json(j.at("values")).transpose();
    obs.validate();
    return obs;
}

}  // namespace shadowda
