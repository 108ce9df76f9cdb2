#pragma once

// Linearized mixed-traffic plant with Markov-switching AV spacing, integrated
// in the active mode's Riemann variables by first-order upwind transport with
// explicit Euler coupling terms. The stored state is always the physical
// deviation z = (rho1, v1, rho2, v2) from the nominal equilibrium, so it is
// continuous across mode switches.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <vector>

#include "mixsim/backstepping.hpp"
#include "mixsim/errors.hpp"
#include "mixsim/markov.hpp"
#include "mixsim/traffic_model.hpp"

namespace mixsim {

/// Cell-averaged deviation profile on a uniform grid of n cells over [0, L].
struct StateProfile {
  double L = 0.0;
  double dx = 0.0;
  std::vector<double> x;  // cell centres
  std::vector<Vec4> z;

  static StateProfile zeros(double L, int n_cells) {
    StateProfile s;
    s.L = L;
    s.dx = L / n_cells;
    s.x = cell_centers(L, n_cells);
    s.z.assign(static_cast<std::size_t>(n_cells), Vec4::Zero());
    return s;
  }

  int cells() const { return static_cast<int>(z.size()); }

  /// int_0^L |z|^2 dx (midpoint rule), components in SI and unweighted.
  double l2_squared() const {
    double acc = 0.0;
    for (const auto& v : z) acc += v.squaredNorm();
    return acc * dx;
  }
  double l2_norm() const { return std::sqrt(l2_squared()); }
};

struct InitialCondition {
  Vec4 amplitude = Vec4::Constant(0.1);  // fractions of the equilibrium scale
  Vec4 wavenumber = Vec4::Ones();        // full periods over [0, L]
};

enum class LoopMode { kOpen, kClosed };

inline const char* loop_name(LoopMode m) { return m == LoopMode::kOpen ? "open" : "closed"; }

struct Scenario {
  TrafficParams params = TrafficParams::reference();
  ChainSpec chain = ChainSpec::reference();
  int n_cells = 100;
  double cfl = 0.9;
  double horizon = 400.0;
  LoopMode loop = LoopMode::kClosed;
  InitialCondition ic;
  std::uint64_t seed = 1;
  double snapshot_every = 10.0;  // s; 0 keeps every step
  std::optional<ModePath> pinned_path;
  bool nominal_only = false;  // freeze the plant at the nominal spacing
  KernelSettings kernels;

  void validate() const {
    params.validate();
    chain.validate();
    if (!(cfl > 0.0 && cfl < 1.0)) throw ConfigError("sim.cfl must lie in (0, 1)");
    if (!(horizon >= 0.0)) throw ConfigError("sim.horizon must be >= 0");
    if (n_cells < 32) throw ConfigError("sim.n_cells must be >= 32");
    if (!(snapshot_every >= 0.0)) throw ConfigError("sim.snapshot_every must be >= 0");
    for (int k = 0; k < 4; ++k) {
      if (!(std::abs(ic.amplitude(k)) < 0.5)) {
        throw ConfigError("ic.amplitudes must be below 0.5 in magnitude (linearization validity)");
      }
    }
    if (pinned_path) pinned_path->validate(chain.size());
  }
};

/// z_k(x, 0) = A_k scale_k sin(2 pi m_k x / L), scale = (rho1*, v1*, rho2*, v2*)
/// of the nominal equilibrium, sampled at cell centres.
inline StateProfile initial_condition(const TrafficParams& p, double nominal_s2, int n_cells, const InitialCondition& ic) {
  for (int k = 0; k < 4; ++k) {
    if (!(std::abs(ic.amplitude(k)) < 0.5)) {
      throw ConfigError("initial_condition: amplitudes must be below 0.5 in magnitude");
    }
  }
  const auto eq = equilibrium(p, nominal_s2);
  const Vec4 scale(p.rho1_star, eq.v1, p.rho2_star, eq.v2);
  auto s = StateProfile::zeros(p.L, n_cells);
  for (int c = 0; c < n_cells; ++c) {
    for (int k = 0; k < 4; ++k) {
      s.z[c](k) = ic.amplitude(k) * scale(k) * std::sin(2.0 * std::numbers::pi * ic.wavenumber(k) * s.x[c] / p.L);
    }
  }
  return s;
}

inline StateProfile initial_condition(const Scenario& sc) {
  return initial_condition(sc.params, sc.chain.modes.nominal, sc.n_cells, sc.ic);
}

/// Cellwise matrices of one mode on the simulation grid.
struct ModeField {
  ModeLinearization mode;
  std::vector<Mat4> T, Tinv, M;  // M: coupling Sigma(x) of the w-system
  double ubar_scale = 0.0;       // Ubar = ubar_scale * U

  ModeField() = default;
  ModeField(const ModeLinearization& m, int n_cells) : mode(m) {
    require_riemann(m, "ModeField");
    const auto x = cell_centers(m.L, n_cells);
    T.resize(x.size());
    Tinv.resize(x.size());
    M.resize(x.size());
    for (std::size_t c = 0; c < x.size(); ++c) {
      const auto rt = riemann_transform_at(m, x[c]);
      T[c] = rt.T;
      Tinv[c] = rt.Tinv;
      M[c] = m.sigma.full(x[c]);
    }
    ubar_scale = std::exp(-m.decay(3) * m.L) / m.kappa(3);
  }
};

/// One explicit step. Inflow ghosts: w+(0) = Q w-(cell 0),
/// w-(L) = R w+(cell n-1) + Ubar. Throws NumericalError on a CFL violation.
inline void step(StateProfile& s, const ModeField& f, double U, double dt) {
  const int n = s.cells();
  const double dx = s.dx;
  const Vec4& lam = f.mode.speeds;
  if (!(dt * lam.cwiseAbs().maxCoeff() <= dx * (1.0 + 1e-12))) {
    std::ostringstream msg;
    msg << "step: CFL violated (dt = " << dt << " s, dx = " << dx << " m, max|lambda| = " << lam.cwiseAbs().maxCoeff()
        << " m/s)";
    throw NumericalError(msg.str());
  }
  std::vector<Vec4> w(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) w[c] = f.T[c] * s.z[c];

  const Vec3 left_ghost = f.mode.Q * w[0](3);
  const double right_ghost = f.mode.R.dot(w[n - 1].head<3>()) + f.ubar_scale * U;
  const double r = dt / dx;
  for (int c = 0; c < n; ++c) {
    Vec4 next = w[c];
    const Vec3 upstream = c == 0 ? left_ghost : Vec3(w[c - 1].head<3>());
    for (int k = 0; k < 3; ++k) next(k) -= lam(k) * r * (w[c](k) - upstream(k));
    const double downstream = c == n - 1 ? right_ghost : w[c + 1](3);
    next(3) -= lam(3) * r * (downstream - w[c](3));
    next += dt * (f.M[c] * w[c]);
    s.z[c] = f.Tinv[c] * next;
  }
}

struct Snapshot {
  double t = 0.0;
  std::vector<Vec4> z;
};

struct Trace {
  std::vector<double> t;
  std::vector<double> l2;
  std::vector<double> U;
  std::vector<int> mode_index;
  std::vector<double> lyapunov;  // empty unless an evaluator was supplied
  std::vector<Snapshot> snapshots;
  double dt = 0.0;
  double L = 0.0;
  int n_cells = 0;
  std::vector<double> x;

  std::size_t size() const { return t.size(); }
};

/// Lyapunov evaluator hook: (state, index into Simulator::fields) -> V.
using LyapunovHook = std::function<double(const StateProfile&, int)>;

/// Prepared simulator: per-mode fields, global dt and (closed loop) the
/// nominal controller. Reusable across realizations.
class Simulator {
 public:
  explicit Simulator(const Scenario& sc) : sc_(sc) {
    sc_.validate();
    const auto& states = sc_.chain.modes.states;
    for (double s2 : states) {
      auto m = linearize(sc_.params, s2);
      require_riemann(m, "Simulator");
      fields_.emplace_back(m, sc_.n_cells);
    }
    nominal_ = linearize(sc_.params, sc_.chain.modes.nominal);
    require_riemann(nominal_, "Simulator");
    nominal_index_ = static_cast<int>(states.size());
    for (std::size_t k = 0; k < states.size(); ++k) {
      if (states[k] == sc_.chain.modes.nominal) nominal_index_ = static_cast<int>(k);
    }
    if (nominal_index_ == static_cast<int>(states.size())) fields_.emplace_back(nominal_, sc_.n_cells);

    const double dx = sc_.params.L / sc_.n_cells;
    double max_speed = 0.0;
    for (const auto& f : fields_) max_speed = std::max(max_speed, f.mode.speeds.cwiseAbs().maxCoeff());
    steps_ = sc_.horizon > 0.0 ? static_cast<long>(std::ceil(sc_.horizon / (sc_.cfl * dx / max_speed) - 1e-9)) : 0;
    dt_ = steps_ > 0 ? sc_.horizon / static_cast<double>(steps_) : 0.0;

    // Kernels are also needed in open loop to evaluate the Lyapunov functional.
    kernels_ = solve_kernels(nominal_, sc_.kernels);
    if (sc_.loop == LoopMode::kClosed) controller_ = build_controller(nominal_, kernels_, sc_.n_cells);
  }

  const Scenario& scenario() const { return sc_; }
  const ModeLinearization& nominal() const { return nominal_; }
  int nominal_index() const { return nominal_index_; }
  const std::vector<ModeField>& fields() const { return fields_; }
  const KernelGrid& kernels() const { return kernels_; }
  const std::optional<Controller>& controller() const { return controller_; }
  double dt() const { return dt_; }
  long steps() const { return steps_; }

  /// Mode path for realization `seed` according to the scenario settings.
  ModePath path_for(std::uint64_t seed) const {
    if (sc_.nominal_only) return ModePath::constant(nominal_index_, sc_.horizon);
    if (sc_.pinned_path) {
      ModePath p = *sc_.pinned_path;
      p.horizon = sc_.horizon;
      return p;
    }
    return sample_path(sc_.chain, seed, sc_.horizon);
  }

  Trace run(const ModePath& path, const StateProfile& z0, const LyapunovHook& lyapunov = {}) const {
    Trace tr;
    tr.dt = dt_;
    tr.L = sc_.params.L;
    tr.n_cells = sc_.n_cells;
    tr.x = z0.x;
    const long stride = sc_.snapshot_every > 0.0 && dt_ > 0.0
                            ? std::max<long>(1, std::lround(sc_.snapshot_every / dt_))
                            : 1;
    StateProfile s = z0;
    auto record = [&](long k, int mode, double U) {
      const double t = static_cast<double>(k) * dt_;
      tr.t.push_back(t);
      tr.l2.push_back(s.l2_norm());
      tr.U.push_back(U);
      tr.mode_index.push_back(mode);
      if (lyapunov) tr.lyapunov.push_back(lyapunov(s, mode));
      if (k % stride == 0 || k == steps_) tr.snapshots.push_back({t, s.z});
    };
    auto control = [&](const StateProfile& st) {
      return controller_ ? control_input(*controller_, st.z) : 0.0;
    };

    int mode = path.mode_indices.front();
    double U = control(s);
    record(0, mode, U);
    for (long k = 0; k < steps_; ++k) {
      const double t = static_cast<double>(k) * dt_;
      mode = mode_at(path, std::min(t, path.horizon));
      step(s, fields_[mode], U, dt_);
      U = control(s);
      const int mode_after = mode_at(path, std::min(static_cast<double>(k + 1) * dt_, path.horizon));
      record(k + 1, mode_after, U);
    }
    return tr;
  }

  Trace run(std::uint64_t seed, const LyapunovHook& lyapunov = {}) const {
    return run(path_for(seed), initial_condition(sc_), lyapunov);
  }

 private:
  Scenario sc_;
  std::vector<ModeField> fields_;
  ModeLinearization nominal_;
  int nominal_index_ = 0;
  double dt_ = 0.0;
  long steps_ = 0;
  KernelGrid kernels_;
  std::optional<Controller> controller_;
};

inline Trace run(const Scenario& sc) { return Simulator(sc).run(sc.seed); }

}  // namespace mixsim
