#pragma once

// Post-processing of simulated trajectories: Lyapunov functional, decay
// fits, Monte Carlo mean-square ensembles, perturbation terms of the
// switched target system and the transport residual of the beta channel.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mixsim/backstepping.hpp"
#include "mixsim/errors.hpp"
#include "mixsim/simulation.hpp"
#include "mixsim/traffic_model.hpp"

namespace mixsim {

// ---------------------------------------------------------------------------
// Lyapunov functional

struct LyapunovConfig {
  double nu = 1.0;  // 1/s
  double a = 1.0;

  void validate() const {
    if (!(nu > 0.0)) throw ConfigError("analysis.lyapunov.nu must be > 0");
    if (!(a > 0.0)) throw ConfigError("analysis.lyapunov.a must be > 0");
  }
};

/// Diagonal of D_j(x): e^{-nu x / s_k} / s_k on the three positive channels,
/// a e^{nu x / Lm} / Lm on the negative one, speeds of the active mode.
inline Vec4 lyapunov_weights(const ModeLinearization& mode, const LyapunovConfig& cfg, double x) {
  Vec4 d;
  for (int k = 0; k < 3; ++k) d(k) = std::exp(-cfg.nu * x / mode.speeds(k)) / mode.speeds(k);
  const double lm = mode.lambda_minus();
  d(3) = cfg.a * std::exp(cfg.nu * x / lm) / lm;
  return d;
}

/// min and max of the D_j diagonal over [0, L] (entries are monotone in x).
inline std::pair<double, double> lyapunov_weight_bounds(const ModeLinearization& mode, const LyapunovConfig& cfg) {
  const Vec4 d0 = lyapunov_weights(mode, cfg, 0.0);
  const Vec4 dL = lyapunov_weights(mode, cfg, mode.L);
  return {std::min(d0.minCoeff(), dL.minCoeff()), std::max(d0.maxCoeff(), dL.maxCoeff())};
}

/// theta = K0(T_j z) on the cell grid.
inline std::vector<Vec4> backstepping_state(const StateProfile& z, const ModeField& active, const BacksteppingOperator& op) {
  std::vector<Vec4> w(z.z.size());
  for (std::size_t c = 0; c < w.size(); ++c) w[c] = active.T[c] * z.z[c];
  return op.apply(w);
}

/// V = int theta^T D_j theta dx with theta = K0(T_j z) (midpoint rule).
inline double lyapunov_value(const StateProfile& z, const ModeField& active, const BacksteppingOperator& op,
                             const LyapunovConfig& cfg) {
  const auto theta = backstepping_state(z, active, op);
  double v = 0.0;
  for (std::size_t c = 0; c < theta.size(); ++c) {
    const Vec4 d = lyapunov_weights(active.mode, cfg, z.x[c]);
    v += theta[c].cwiseAbs2().dot(d);
  }
  return v * z.dx;
}

inline double lyapunov_value(const StateProfile& z, const ModeLinearization& active, const KernelGrid& nominal_kernels,
                             const LyapunovConfig& cfg) {
  const ModeField field(active, z.cells());
  const BacksteppingOperator op(nominal_kernels, z.L, z.cells());
  return lyapunov_value(z, field, op, cfg);
}

/// Evaluator bound to a simulator's mode fields, usable as a LyapunovHook.
class LyapunovEvaluator {
 public:
  LyapunovEvaluator(const Simulator& sim, const LyapunovConfig& cfg)
      : sim_(&sim), op_(sim.kernels(), sim.scenario().params.L, sim.scenario().n_cells), cfg_(cfg) {}

  double operator()(const StateProfile& z, int mode_index) const {
    return lyapunov_value(z, sim_->fields()[static_cast<std::size_t>(mode_index)], op_, cfg_);
  }
  LyapunovHook hook() const {
    return [this](const StateProfile& z, int mode) { return (*this)(z, mode); };
  }
  const LyapunovConfig& config() const { return cfg_; }

 private:
  const Simulator* sim_;
  BacksteppingOperator op_;
  LyapunovConfig cfg_;
};

struct LyapunovSelection {
  LyapunovConfig cfg;
  bool certified = false;
  double worst_relative_increase = 0.0;  // for the returned nu, after the transient
  std::vector<double> nu_tried;
};

inline double q_weight(const Vec3& Q) { return Q.squaredNorm(); }

/// a = 1.1 sum q^2 (over the nominal Q, or the worst mode when
/// across_all_modes), floored at 1e-6; nu scanned 1, 1/2, 1/4, ... >= 1e-4
/// until V0 along the nominal closed loop is nonincreasing after one
/// transport period L / min|lambda|, with slack 1e-3 relative per step.
inline LyapunovSelection select_lyapunov_params(const Scenario& scenario, bool across_all_modes = false) {
  Scenario sc = scenario;
  sc.loop = LoopMode::kClosed;
  sc.nominal_only = true;
  sc.snapshot_every = 0.0;
  // The check window must extend past the transient whatever the run horizon.
  const double t_transient =
      sc.params.L / linearize(sc.params, sc.chain.modes.nominal).speeds.cwiseAbs().minCoeff();
  sc.horizon = std::max(sc.horizon, 1.5 * t_transient);
  const Simulator sim(sc);
  const auto& nominal = sim.nominal();

  double qsum = q_weight(nominal.Q);
  if (across_all_modes) {
    for (const auto& f : sim.fields()) qsum = std::max(qsum, q_weight(f.mode.Q));
  }
  LyapunovSelection out;
  out.cfg.a = qsum > 0.0 ? 1.1 * qsum : 1e-6;

  const Trace tr = sim.run(sim.path_for(sc.seed), initial_condition(sc));
  const ModeField& field = sim.fields()[static_cast<std::size_t>(sim.nominal_index())];
  const BacksteppingOperator op(sim.kernels(), sc.params.L, sc.n_cells);
  StateProfile profile = StateProfile::zeros(sc.params.L, sc.n_cells);

  for (double nu = 1.0; nu >= 1e-4; nu *= 0.5) {
    out.nu_tried.push_back(nu);
    LyapunovConfig cfg{nu, out.cfg.a};
    double prev = -1.0, worst = 0.0;
    for (const auto& snap : tr.snapshots) {
      if (snap.t <= t_transient) continue;
      profile.z = snap.z;
      const double v = lyapunov_value(profile, field, op, cfg);
      if (prev > 0.0) worst = std::max(worst, (v - prev) / prev);
      prev = v;
    }
    out.cfg.nu = nu;
    out.worst_relative_increase = worst;
    if (worst <= 1e-3) {
      out.certified = true;
      return out;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decay fits

struct DecayFit {
  double rate = 0.0;       // -slope of log(value)
  double prefactor = 0.0;  // exp(intercept)
  double r_squared = 0.0;
  std::size_t points = 0;
};

/// Least squares of log(value) against t over samples with t in [t_a, t_b].
inline DecayFit fit_decay_rate(const std::vector<double>& t, const std::vector<double>& value, double t_a, double t_b) {
  if (t.size() != value.size()) throw std::invalid_argument("fit_decay_rate: series lengths differ");
  double st = 0, sy = 0, stt = 0, sty = 0;
  std::vector<std::pair<double, double>> pts;
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (t[k] < t_a || t[k] > t_b) continue;
    if (!(value[k] > 0.0)) {
      std::ostringstream msg;
      msg << "fit_decay_rate: nonpositive value " << value[k] << " at t = " << t[k] << " inside the fit window";
      throw NumericalError(msg.str());
    }
    pts.emplace_back(t[k], std::log(value[k]));
  }
  if (pts.size() < 2) throw NumericalError("fit_decay_rate: fewer than two samples in the fit window");
  const auto n = static_cast<double>(pts.size());
  for (const auto& [x, y] : pts) {
    st += x;
    sy += y;
    stt += x * x;
    sty += x * y;
  }
  const double sxx = stt - st * st / n;
  if (!(sxx > 0.0)) throw NumericalError("fit_decay_rate: degenerate time window");
  const double slope = (sty - st * sy / n) / sxx;
  const double intercept = (sy - slope * st) / n;
  double ss_res = 0.0, ss_tot = 0.0;
  const double mean_y = sy / n;
  for (const auto& [x, y] : pts) {
    const double e = y - (intercept + slope * x);
    ss_res += e * e;
    ss_tot += (y - mean_y) * (y - mean_y);
  }
  DecayFit fit;
  fit.rate = -slope;
  fit.prefactor = std::exp(intercept);
  // A constant series is fitted exactly.
  fit.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  fit.points = pts.size();
  return fit;
}

// ---------------------------------------------------------------------------
// Monte Carlo ensembles

struct EnsembleResult {
  std::vector<double> t;
  std::vector<double> mean_sq;
  std::vector<double> stderr_;
  std::optional<double> zeta;          // fitted decay rate, unset when undefined
  std::optional<double> varsigma;      // envelope: max_t mean_sq(t) e^{zeta t} / mean_sq(0) on the window
  std::optional<double> prefactor;     // regression prefactor relative to mean_sq(0)
  double r_squared = 0.0;
  double window_a = 0.0, window_b = 0.0;
  int n_realizations = 0;
  std::uint64_t base_seed = 0;
};

/// Worker count from MIXSIM_THREADS (default: hardware concurrency), capped
/// by the amount of work.
inline int worker_count(int work) {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("MIXSIM_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) n = v;
  }
  return std::max(1, std::min(n, work));
}

/// Realization k uses seed base_seed + k. Per-time statistics are merged in
/// realization order, so the result does not depend on the thread count.
inline EnsembleResult mean_square_ensemble(const Simulator& sim, int n_realizations, std::uint64_t base_seed,
                                           std::optional<std::pair<double, double>> window = std::nullopt) {
  if (n_realizations < 1) throw ConfigError("mean_square_ensemble: need at least one realization");
  const auto& sc = sim.scenario();
  if (window && !(window->first >= 0.0 && window->first < window->second && window->second <= sc.horizon)) {
    throw ConfigError("analysis.fit_window must satisfy 0 <= start < end <= sim.horizon");
  }
  const StateProfile z0 = initial_condition(sc);
  std::vector<std::vector<double>> sq(static_cast<std::size_t>(n_realizations));
  std::vector<double> times;
  std::mutex err_mutex;
  std::exception_ptr first_error;
  std::string error_text;
  std::atomic<int> next{0};

  auto worker = [&]() {
    for (int k = next++; k < n_realizations; k = next++) {
      const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(k);
      try {
        const Trace tr = sim.run(sim.path_for(seed), z0);
        auto& out = sq[static_cast<std::size_t>(k)];
        out.resize(tr.l2.size());
        for (std::size_t i = 0; i < tr.l2.size(); ++i) out[i] = tr.l2[i] * tr.l2[i];
        if (k == 0) times = tr.t;
      } catch (const std::exception& e) {
        std::lock_guard lock(err_mutex);
        if (!first_error) {
          first_error = std::current_exception();
          error_text = "realization with seed " + std::to_string(seed) + " failed: " + e.what();
        }
        next = n_realizations;
      }
    }
  };
  const int workers = worker_count(n_realizations);
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (first_error) throw NumericalError(error_text);

  EnsembleResult r;
  r.n_realizations = n_realizations;
  r.base_seed = base_seed;
  r.t = times;
  const std::size_t nt = times.size();
  r.mean_sq.assign(nt, 0.0);
  r.stderr_.assign(nt, 0.0);
  for (std::size_t i = 0; i < nt; ++i) {
    double mean = 0.0;
    for (const auto& s : sq) mean += s[i];
    mean /= n_realizations;
    double var = 0.0;
    for (const auto& s : sq) var += (s[i] - mean) * (s[i] - mean);
    r.mean_sq[i] = mean;
    r.stderr_[i] = n_realizations > 1 ? std::sqrt(var / (n_realizations - 1) / n_realizations) : 0.0;
  }

  const double horizon = sc.horizon;
  const auto [wa, wb] = window.value_or(std::pair{0.125 * horizon, 0.75 * horizon});
  r.window_a = wa;
  r.window_b = wb;
  if (nt == 0 || !(r.mean_sq.front() > 0.0)) return r;
  bool positive = true;
  std::size_t in_window = 0;
  for (std::size_t i = 0; i < nt; ++i) {
    if (r.t[i] < wa || r.t[i] > wb) continue;
    ++in_window;
    if (!(r.mean_sq[i] > 0.0)) positive = false;
  }
  if (!positive || in_window < 2) return r;
  const DecayFit fit = fit_decay_rate(r.t, r.mean_sq, wa, wb);
  r.zeta = fit.rate;
  r.r_squared = fit.r_squared;
  r.prefactor = fit.prefactor / r.mean_sq.front();
  double env = 0.0;
  for (std::size_t i = 0; i < nt; ++i) {
    if (r.t[i] >= wa && r.t[i] <= wb) env = std::max(env, r.mean_sq[i] * std::exp(fit.rate * r.t[i]) / r.mean_sq.front());
  }
  r.varsigma = env;
  return r;
}

// ---------------------------------------------------------------------------
// Perturbation terms of the switched target system

struct FTermNorms {
  double s2 = 0.0;
  double f1 = 0.0, f2 = 0.0, f3 = 0.0, f4 = 0.0;
  double max() const { return std::max({f1, f2, f3, f4}); }
};

namespace detail {

// d/dx and d/dxi of a nodal field at (i, j): central where both neighbours
// exist inside the triangle, second-order one-sided otherwise.
template <class T>
T d_dxi(const std::vector<T>& f, int i, int j, double h) {
  auto at = [&](int a, int b) -> const T& { return f[KernelGrid::index(a, b)]; };
  if (j + 1 <= i && j - 1 >= 0) return (at(i, j + 1) - at(i, j - 1)) / (2 * h);
  if (j + 2 <= i) return (-3.0 * at(i, j) + 4.0 * at(i, j + 1) - at(i, j + 2)) / (2 * h);
  return (3.0 * at(i, j) - 4.0 * at(i, j - 1) + at(i, j - 2)) / (2 * h);
}

// Near the corner (L, L) no x-stencil fits inside the triangle; there
// d/dx = d/ds along the diagonal direction (1, 1) minus d/dxi. Needs j >= 2.
template <class T>
T d_dx(const std::vector<T>& f, int n, int i, int j, double h) {
  auto at = [&](int a, int b) -> const T& { return f[KernelGrid::index(a, b)]; };
  if (i + 1 <= n && i - 1 >= j) return (at(i + 1, j) - at(i - 1, j)) / (2 * h);
  if (i + 2 <= n) return (-3.0 * at(i, j) + 4.0 * at(i + 1, j) - at(i + 2, j)) / (2 * h);
  if (i - 2 >= j) return (3.0 * at(i, j) - 4.0 * at(i - 1, j) + at(i - 2, j)) / (2 * h);
  const T diag = (3.0 * at(i, j) - 4.0 * at(i - 1, j - 1) + at(i - 2, j - 2)) / (2 * h);
  return diag - d_dxi(f, i, j, h);
}

}  // namespace detail

/// Sup-norms over the kernel grid nodes of
///   f1 = Smp_j(x) + Lm_j K0(x, x) + K0(x, x) Lp_j
///   f2 = -K0(x, 0) Lp_j Q_j + N0(x, 0) Lm_j
///   f3 = Lm_j K0_x - K0_xi Lp_j - K0 Spp_j(xi) - N0 Smp_j(xi)
///   f4 = Lm_j (N0_x + N0_xi) - K0 Spm_j(xi)
/// with nominal kernels and mode-j coefficients. Row vectors use the
/// Euclidean norm. Needs n >= 2.
inline FTermNorms f_term_norms(const KernelGrid& g, const ModeLinearization& mode) {
  require_riemann(mode, "f_term_norms");
  FTermNorms out;
  out.s2 = mode.s2;
  const int n = g.n;
  const double h = g.h;
  const Vec3 lp = mode.lambda_plus();
  const double lm = mode.lambda_minus();
  const Vec3 lpq = lp.cwiseProduct(mode.Q);
  for (int i = 0; i <= n; ++i) {
    const double x = i * h;
    const Row3 kd = g.k(i, i);
    const Row3 f1 = mode.sigma.mp(x) + lm * kd + kd.cwiseProduct(lp.transpose());
    out.f1 = std::max(out.f1, f1.norm());
    const double f2 = -g.k(i, 0).dot(lpq) + g.nk(i, 0) * lm;
    out.f2 = std::max(out.f2, std::abs(f2));
    if (i < 2) continue;
    for (int j = 0; j <= i; ++j) {
      const double xi = j * h;
      const Row3 kx = detail::d_dx(g.K, n, i, j, h);
      const Row3 kxi = detail::d_dxi(g.K, i, j, h);
      const double nx = detail::d_dx(g.N, n, i, j, h);
      const double nxi = detail::d_dxi(g.N, i, j, h);
      const Row3 f3 = lm * kx - kxi.cwiseProduct(lp.transpose()) - g.k(i, j) * mode.sigma.pp(xi) -
                      g.nk(i, j) * mode.sigma.mp(xi);
      const double f4 = lm * (nx + nxi) - g.k(i, j).dot(mode.sigma.pm(xi));
      out.f3 = std::max(out.f3, f3.norm());
      out.f4 = std::max(out.f4, std::abs(f4));
    }
  }
  return out;
}

inline std::vector<FTermNorms> f_term_norms(const KernelGrid& g, const std::vector<ModeLinearization>& modes) {
  std::vector<FTermNorms> out;
  out.reserve(modes.size());
  for (const auto& m : modes) out.push_back(f_term_norms(g, m));
  return out;
}

/// Linear-bound estimate max_i |f_ij| <= M0 |s2_j - s2_0| + floor, with floor
/// the nominal-mode value (discretization residual). `slope_ls` is the
/// least-squares slope through the origin of (max_i |f_ij| - floor) against
/// |ds|, `m0_envelope` the smallest M0 for which the bound holds on the set.
struct LinearBoundFit {
  double floor = 0.0;
  double slope_ls = 0.0;
  double r_squared = 0.0;  // uncentred, regression through the origin
  double m0_envelope = 0.0;
  bool finite = false;
};

inline LinearBoundFit fit_linear_bound(const std::vector<FTermNorms>& norms, double nominal_s2, double floor) {
  LinearBoundFit fit;
  fit.floor = floor;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (const auto& f : norms) {
    const double ds = std::abs(f.s2 - nominal_s2);
    if (ds == 0.0) continue;
    const double y = std::max(f.max() - floor, 0.0);
    sxy += ds * y;
    sxx += ds * ds;
    syy += y * y;
    fit.m0_envelope = std::max(fit.m0_envelope, y / ds);
  }
  if (sxx > 0.0) {
    fit.slope_ls = sxy / sxx;
    double ss_res = 0.0;
    for (const auto& f : norms) {
      const double ds = std::abs(f.s2 - nominal_s2);
      if (ds == 0.0) continue;
      const double e = std::max(f.max() - floor, 0.0) - fit.slope_ls * ds;
      ss_res += e * e;
    }
    fit.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  }
  fit.finite = std::isfinite(fit.slope_ls) && std::isfinite(fit.m0_envelope);
  return fit;
}

// ---------------------------------------------------------------------------
// Transport residual of the beta channel

struct BetaResidual {
  double sup = 0.0;
  double l2 = 0.0;  // sqrt(int int r^2 dx dt / (T_window))
  std::size_t time_levels = 0;
};

/// beta = 4th component of K0(T0 z) per snapshot; residual of
/// beta_t + lambda4 beta_x = 0 with the forward-in-time, downwind-in-space
/// differences the plant scheme uses for that channel, over consecutive
/// snapshots whose start time lies in [t_a, t_b]. Snapshots must be dense
/// (one per time step).
inline BetaResidual target_beta_residual(const Trace& tr, const ModeLinearization& nominal, const KernelGrid& kernels,
                                         double t_a = 0.0, double t_b = std::numeric_limits<double>::infinity()) {
  BetaResidual out;
  if (tr.snapshots.size() < 2) throw ConfigError("target_beta_residual: need at least two snapshots");
  for (std::size_t s = 1; s < tr.snapshots.size(); ++s) {
    const double gap = tr.snapshots[s].t - tr.snapshots[s - 1].t;
    if (std::abs(gap - tr.dt) > 1e-9 * std::max(1.0, tr.dt)) {
      throw ConfigError("target_beta_residual: snapshot cadence too sparse for time differencing (need one per step)");
    }
  }
  const int n = tr.n_cells;
  const double dx = tr.L / n;
  const ModeField field(nominal, n);
  const BacksteppingOperator op(kernels, tr.L, n);
  StateProfile prof = StateProfile::zeros(tr.L, n);
  auto beta_of = [&](const Snapshot& snap) {
    prof.z = snap.z;
    const auto theta = backstepping_state(prof, field, op);
    std::vector<double> b(theta.size());
    for (std::size_t c = 0; c < b.size(); ++c) b[c] = theta[c](3);
    return b;
  };
  const double l4 = -nominal.lambda_minus();
  std::vector<double> prev = beta_of(tr.snapshots.front());
  double acc = 0.0, span = 0.0;
  for (std::size_t s = 1; s < tr.snapshots.size(); ++s) {
    std::vector<double> cur = beta_of(tr.snapshots[s]);
    const double t0 = tr.snapshots[s - 1].t;
    if (t0 >= t_a && t0 <= t_b) {
      for (int c = 0; c + 1 < n; ++c) {
        const double r = (cur[c] - prev[c]) / tr.dt + l4 * (prev[c + 1] - prev[c]) / dx;
        out.sup = std::max(out.sup, std::abs(r));
        acc += r * r * dx * tr.dt;
      }
      span += tr.dt;
      ++out.time_levels;
    }
    prev = std::move(cur);
  }
  out.l2 = span > 0.0 ? std::sqrt(acc / span) : 0.0;
  return out;
}

/// The same residual with the kernels replaced by zero (beta = w4).
inline KernelGrid zero_kernels_like(const KernelGrid& g) {
  KernelGrid z(g.n, g.L);
  z.converged = true;
  return z;
}

}  // namespace mixsim
