#pragma once

// JSON run configuration. Physical quantities are either bare SI numbers or
// strings carrying a unit ("80 km/h", "150 veh/km", "30 s"). Unknown keys
// are rejected so that typos do not silently fall back to defaults.

#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mixsim/analysis.hpp"
#include "mixsim/backstepping.hpp"
#include "mixsim/errors.hpp"
#include "mixsim/markov.hpp"
#include "mixsim/simulation.hpp"
#include "mixsim/traffic_model.hpp"
#include "mixsim/units.hpp"

namespace mixsim {

struct AnalysisSettings {
  std::optional<std::pair<double, double>> fit_window;
  int n_realizations = 50;
  std::optional<LyapunovConfig> lyapunov;  // selected automatically when absent
};

struct MarkovSettings {
  std::optional<double> dt;      // Kolmogorov step, default 0.1 / tau*
  double record_every = 1.0;     // s
};

struct RunConfig {
  std::string path;
  Scenario scenario;
  MarkovSettings markov;
  AnalysisSettings analysis;
  std::optional<KernelProblem> synthetic_kernels;
};

namespace config_detail {

using json = nlohmann::json;
using units::Dimension;

inline void check_keys(const json& obj, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(section + ": unknown key \"" + key + "\"");
  }
}

inline double quantity(const json& v, Dimension dim, const std::string& field) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) return units::parse_quantity(v.get<std::string>(), dim, field);
  throw ConfigError(field + ": expected a number or a string with a unit");
}

inline double req(const json& obj, const char* key, Dimension dim, const std::string& section) {
  const std::string field = section + "." + key;
  if (!obj.contains(key)) throw ConfigError(field + ": missing");
  return quantity(obj.at(key), dim, field);
}

inline double opt(const json& obj, const char* key, Dimension dim, const std::string& section, double fallback) {
  return obj.contains(key) ? quantity(obj.at(key), dim, section + "." + key) : fallback;
}

inline long integer(const json& obj, const char* key, const std::string& section, long fallback) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) throw ConfigError(section + "." + key + ": expected an integer");
  return v.get<long>();
}

inline std::vector<double> quantity_list(const json& v, Dimension dim, const std::string& field) {
  if (!v.is_array()) throw ConfigError(field + ": expected an array");
  std::vector<double> out;
  for (std::size_t k = 0; k < v.size(); ++k) out.push_back(quantity(v[k], dim, field + "[" + std::to_string(k) + "]"));
  return out;
}

inline Vec4 vec4_or_scalar(const json& v, const std::string& field) {
  if (v.is_number()) return Vec4::Constant(v.get<double>());
  const auto list = quantity_list(v, Dimension::kNone, field);
  if (list.size() != 4) throw ConfigError(field + ": expected 4 entries (rho1, v1, rho2, v2) or a scalar");
  return Vec4(list[0], list[1], list[2], list[3]);
}

inline TrafficParams parse_traffic(const json& t) {
  const std::string s = "traffic";
  check_keys(t, s, {"V1", "V2", "iota1", "iota2", "gamma1", "gamma2", "AObar1", "AObar2", "a1", "d", "l", "s1",
                    "rho1_star", "rho2_star", "L", "W"});
  TrafficParams p;
  p.V1 = req(t, "V1", Dimension::kSpeed, s);
  p.V2 = req(t, "V2", Dimension::kSpeed, s);
  p.iota1 = req(t, "iota1", Dimension::kTime, s);
  p.iota2 = req(t, "iota2", Dimension::kTime, s);
  p.gamma1 = req(t, "gamma1", Dimension::kNone, s);
  p.gamma2 = req(t, "gamma2", Dimension::kNone, s);
  p.AObar1 = req(t, "AObar1", Dimension::kNone, s);
  p.AObar2 = req(t, "AObar2", Dimension::kNone, s);
  p.d = req(t, "d", Dimension::kLength, s);
  p.l = opt(t, "l", Dimension::kLength, s, 0.0);
  p.s1 = req(t, "s1", Dimension::kLength, s);
  p.a1 = opt(t, "a1", Dimension::kArea, s, p.impact_area(p.s1));
  p.rho1_star = req(t, "rho1_star", Dimension::kDensity, s);
  p.rho2_star = req(t, "rho2_star", Dimension::kDensity, s);
  p.L = req(t, "L", Dimension::kLength, s);
  p.W = req(t, "W", Dimension::kLength, s);
  p.validate();
  return p;
}

inline SpacingModeSet parse_modes(const json& m) {
  const std::string s = "modes";
  check_keys(m, s, {"states", "nominal", "lower", "upper"});
  if (!m.contains("states")) throw ConfigError("modes.states: missing");
  SpacingModeSet ms;
  ms.states = quantity_list(m.at("states"), Dimension::kLength, "modes.states");
  if (ms.states.empty()) throw ConfigError("modes.states must not be empty");
  ms.nominal = req(m, "nominal", Dimension::kLength, s);
  ms.lower = opt(m, "lower", Dimension::kLength, s, ms.states.front());
  ms.upper = opt(m, "upper", Dimension::kLength, s, ms.states.back());
  ms.validate();
  return ms;
}

inline ChainSpec parse_markov(const json* m, const SpacingModeSet& modes, MarkovSettings& settings) {
  ChainSpec c;
  c.modes = modes;
  const int n = static_cast<int>(modes.size());
  if (m == nullptr) {
    if (n != 5) throw ConfigError("markov: section required unless modes.states has 5 entries");
    c.rates = RateTable::cosine(10.0, 0.001, n);
    c.initial_distribution = ChainSpec::reference().initial_distribution;
    c.validate();
    return c;
  }
  const std::string s = "markov";
  check_keys(*m, s, {"initial_probabilities", "r_scale", "s_scale", "rate_matrix", "dt", "record_every"});
  if (m->contains("rate_matrix")) {
    if (m->contains("r_scale") || m->contains("s_scale")) {
      throw ConfigError("markov: give either rate_matrix or r_scale/s_scale, not both");
    }
    const auto& rm = m->at("rate_matrix");
    if (!rm.is_array() || static_cast<int>(rm.size()) != n) throw ConfigError("markov.rate_matrix: expected one row per state");
    Eigen::MatrixXd R(n, n);
    for (int i = 0; i < n; ++i) {
      const auto row = quantity_list(rm[static_cast<std::size_t>(i)], Dimension::kRate, "markov.rate_matrix");
      if (static_cast<int>(row.size()) != n) throw ConfigError("markov.rate_matrix: every row needs one entry per state");
      for (int j = 0; j < n; ++j) R(i, j) = row[static_cast<std::size_t>(j)];
    }
    c.rates = RateTable::constant(R);
  } else {
    c.rates = RateTable::cosine(req(*m, "r_scale", Dimension::kRate, s), req(*m, "s_scale", Dimension::kRate, s), n);
  }
  if (!m->contains("initial_probabilities")) throw ConfigError("markov.initial_probabilities: missing");
  const auto p0 = quantity_list(m->at("initial_probabilities"), Dimension::kNone, "markov.initial_probabilities");
  c.initial_distribution = Eigen::Map<const Eigen::VectorXd>(p0.data(), static_cast<Eigen::Index>(p0.size()));
  if (m->contains("dt")) settings.dt = req(*m, "dt", Dimension::kTime, s);
  settings.record_every = opt(*m, "record_every", Dimension::kTime, s, settings.record_every);
  c.validate();
  return c;
}

inline ModePath parse_pinned_path(const json& p) {
  check_keys(p, "sim.pinned_path", {"jump_times", "mode_indices"});
  ModePath path;
  path.jump_times = quantity_list(p.at("jump_times"), Dimension::kTime, "sim.pinned_path.jump_times");
  path.mode_indices.clear();
  for (const auto& v : p.at("mode_indices")) {
    if (!v.is_number_integer()) throw ConfigError("sim.pinned_path.mode_indices: expected integers");
    path.mode_indices.push_back(v.get<int>());
  }
  return path;
}

inline void parse_sim(const json& sj, Scenario& sc) {
  const std::string s = "sim";
  check_keys(sj, s, {"n_cells", "cfl", "horizon", "snapshot_every", "loop", "seed", "nominal_only", "pinned_path"});
  sc.n_cells = static_cast<int>(integer(sj, "n_cells", s, sc.n_cells));
  sc.cfl = opt(sj, "cfl", Dimension::kNone, s, sc.cfl);
  sc.horizon = opt(sj, "horizon", Dimension::kTime, s, sc.horizon);
  sc.snapshot_every = opt(sj, "snapshot_every", Dimension::kTime, s, sc.snapshot_every);
  sc.seed = static_cast<std::uint64_t>(integer(sj, "seed", s, static_cast<long>(sc.seed)));
  if (sj.contains("loop")) {
    const auto loop = sj.at("loop").get<std::string>();
    if (loop == "open") sc.loop = LoopMode::kOpen;
    else if (loop == "closed") sc.loop = LoopMode::kClosed;
    else throw ConfigError("sim.loop: expected \"open\" or \"closed\"");
  }
  if (sj.contains("nominal_only")) sc.nominal_only = sj.at("nominal_only").get<bool>();
  if (sj.contains("pinned_path")) sc.pinned_path = parse_pinned_path(sj.at("pinned_path"));
}

inline KernelProblem parse_synthetic(const json& k) {
  const std::string s = "kernels.synthetic";
  check_keys(k, s, {"lambda_plus", "lambda_minus", "Q", "coupling", "decay", "L"});
  KernelProblem pb;
  const auto lp = quantity_list(k.at("lambda_plus"), Dimension::kSpeed, s + ".lambda_plus");
  const auto q = quantity_list(k.at("Q"), Dimension::kNone, s + ".Q");
  if (lp.size() != 3 || q.size() != 3) throw ConfigError(s + ": lambda_plus and Q need 3 entries");
  pb.lambda_plus = Vec3(lp[0], lp[1], lp[2]);
  pb.Q = Vec3(q[0], q[1], q[2]);
  pb.lambda_minus = req(k, "lambda_minus", Dimension::kSpeed, s);
  pb.L = req(k, "L", Dimension::kLength, s);
  if (!(pb.lambda_minus > 0.0) || (pb.lambda_plus.array() <= 0.0).any() || !(pb.L > 0.0)) {
    throw ConfigError(s + ": speeds and L must be positive");
  }
  pb.sigma.coupling.setZero();
  pb.sigma.decay.setZero();
  if (k.contains("coupling")) {
    const auto& c = k.at("coupling");
    if (!c.is_array() || c.size() != 4) throw ConfigError(s + ".coupling: expected a 4x4 array");
    for (int i = 0; i < 4; ++i) {
      const auto row = quantity_list(c[static_cast<std::size_t>(i)], Dimension::kRate, s + ".coupling");
      if (row.size() != 4) throw ConfigError(s + ".coupling: expected a 4x4 array");
      for (int j = 0; j < 4; ++j) pb.sigma.coupling(i, j) = i == j ? 0.0 : row[static_cast<std::size_t>(j)];
    }
  }
  if (k.contains("decay")) {
    const auto d = quantity_list(k.at("decay"), Dimension::kNone, s + ".decay");
    if (d.size() != 4) throw ConfigError(s + ".decay: expected 4 entries");
    pb.sigma.decay = Vec4(d[0], d[1], d[2], d[3]);
  }
  return pb;
}

}  // namespace config_detail

/// Parses a configuration document; `origin` only feeds diagnostics.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  using config_detail::json;
  using units::Dimension;
  namespace cd = config_detail;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  RunConfig rc;
  rc.path = origin;
  try {
    cd::check_keys(doc, "config", {"traffic", "modes", "markov", "sim", "ic", "kernels", "analysis"});
    if (!doc.contains("traffic")) throw ConfigError("traffic: missing section");
    if (!doc.contains("modes")) throw ConfigError("modes: missing section");
    auto& sc = rc.scenario;
    sc.params = cd::parse_traffic(doc.at("traffic"));
    const auto modes = cd::parse_modes(doc.at("modes"));
    sc.chain = cd::parse_markov(doc.contains("markov") ? &doc.at("markov") : nullptr, modes, rc.markov);
    if (doc.contains("sim")) cd::parse_sim(doc.at("sim"), sc);
    if (doc.contains("ic")) {
      const auto& ic = doc.at("ic");
      cd::check_keys(ic, "ic", {"amplitudes", "wavenumbers"});
      if (ic.contains("amplitudes")) sc.ic.amplitude = cd::vec4_or_scalar(ic.at("amplitudes"), "ic.amplitudes");
      if (ic.contains("wavenumbers")) sc.ic.wavenumber = cd::vec4_or_scalar(ic.at("wavenumbers"), "ic.wavenumbers");
    }
    if (doc.contains("kernels")) {
      const auto& k = doc.at("kernels");
      cd::check_keys(k, "kernels", {"n", "tol", "max_iter", "synthetic"});
      sc.kernels.n = static_cast<int>(cd::integer(k, "n", "kernels", sc.kernels.n));
      sc.kernels.tol = cd::opt(k, "tol", Dimension::kNone, "kernels", sc.kernels.tol);
      sc.kernels.max_iter = static_cast<int>(cd::integer(k, "max_iter", "kernels", sc.kernels.max_iter));
      if (k.contains("synthetic")) rc.synthetic_kernels = cd::parse_synthetic(k.at("synthetic"));
      if (sc.kernels.n < 16 || sc.kernels.max_iter < 1 || !(sc.kernels.tol > 0.0)) {
        throw ConfigError("kernels: need n >= 16, max_iter >= 1, tol > 0");
      }
    }
    if (doc.contains("analysis")) {
      const auto& a = doc.at("analysis");
      cd::check_keys(a, "analysis", {"fit_window", "n_realizations", "lyapunov"});
      if (a.contains("fit_window")) {
        const auto w = cd::quantity_list(a.at("fit_window"), Dimension::kTime, "analysis.fit_window");
        if (w.size() != 2 || !(w[0] < w[1])) throw ConfigError("analysis.fit_window: expected [t_a, t_b] with t_a < t_b");
        rc.analysis.fit_window = std::pair{w[0], w[1]};
      }
      rc.analysis.n_realizations = static_cast<int>(cd::integer(a, "n_realizations", "analysis", rc.analysis.n_realizations));
      if (rc.analysis.n_realizations < 1) throw ConfigError("analysis.n_realizations must be >= 1");
      if (a.contains("lyapunov")) {
        const auto& l = a.at("lyapunov");
        cd::check_keys(l, "analysis.lyapunov", {"nu", "a"});
        LyapunovConfig cfg{cd::req(l, "nu", Dimension::kNone, "analysis.lyapunov"),
                           cd::req(l, "a", Dimension::kNone, "analysis.lyapunov")};
        cfg.validate();
        rc.analysis.lyapunov = cfg;
      }
    }
    sc.validate();
  } catch (const json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open configuration file");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path);
}

/// Pinned mode path from CSV lines "t,mode_index" (header optional); the
/// first row must be at t = 0.
inline ModePath load_mode_path_csv(const std::string& path, double horizon) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open mode path file");
  ModePath p;
  p.jump_times.clear();
  p.mode_indices.clear();
  p.horizon = horizon;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ConfigError(path + ":" + std::to_string(lineno) + ": expected \"t,mode_index\"");
    try {
      std::size_t used = 0;
      const double t = std::stod(line.substr(0, comma), &used);
      const int m = std::stoi(line.substr(comma + 1));
      p.jump_times.push_back(t);
      p.mode_indices.push_back(m);
    } catch (const std::exception&) {
      if (p.jump_times.empty() && lineno == 1) continue;  // header
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected \"t,mode_index\"");
    }
  }
  return p;
}

}  // namespace mixsim
