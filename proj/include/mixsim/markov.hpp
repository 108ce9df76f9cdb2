#pragma once

// Continuous-time Markov chain on AV spacing modes: transition rates,
// forward (Kolmogorov) probability evolution and exact path sampling by
// thinning against the uniform rate bound.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <vector>

#include "mixsim/errors.hpp"
#include "mixsim/traffic_model.hpp"

namespace mixsim {

/// Time-dependent transition-rate table tau_ij(t) (1/s), tau_ii = 0.
class RateTable {
 public:
  enum class Kind { kConstant, kCosine };

  /// Constant rates; the diagonal of `rates` is ignored.
  static RateTable constant(Eigen::MatrixXd rates) {
    RateTable t;
    t.kind_ = Kind::kConstant;
    t.n_ = static_cast<int>(rates.rows());
    if (rates.rows() != rates.cols()) throw ConfigError("markov.rate_matrix must be square");
    rates.diagonal().setZero();
    if ((rates.array() < 0.0).any()) throw ConfigError("markov.rate_matrix entries must be >= 0");
    t.constant_ = std::move(rates);
    return t;
  }

  /// Endpoint states leave at 2r towards every other state, interior states
  /// reach the endpoints at 0.1r and each other at r (1 + 2 cos^2(s (i + 5j) t))
  /// with 1-based indices i, j. Bounded by 3r.
  static RateTable cosine(double r_scale, double s_scale, int n_states) {
    if (n_states < 2) throw ConfigError("cosine rate table needs at least 2 states");
    if (!(r_scale >= 0.0)) throw ConfigError("markov.r_scale must be >= 0");
    RateTable t;
    t.kind_ = Kind::kCosine;
    t.n_ = n_states;
    t.r_ = r_scale;
    t.s_ = s_scale;
    return t;
  }

  int size() const { return n_; }
  Kind kind() const { return kind_; }

  double operator()(int i, int j, double t) const {
    if (i == j) return 0.0;
    if (kind_ == Kind::kConstant) return constant_(i, j);
    const bool i_end = i == 0 || i == n_ - 1;
    const bool j_end = j == 0 || j == n_ - 1;
    if (i_end) return 2.0 * r_;
    if (j_end) return 0.1 * r_;
    const double c = std::cos(s_ * static_cast<double>((i + 1) + 5 * (j + 1)) * t);
    return r_ * (1.0 + 2.0 * c * c);
  }

  /// Uniform bound tau* on every entry.
  double bound() const {
    if (kind_ == Kind::kConstant) return n_ > 0 ? constant_.maxCoeff() : 0.0;
    return 3.0 * r_;
  }

  /// Generator G(t): off-diagonal tau_ij, diagonal -sum_k tau_ik.
  Eigen::MatrixXd generator(double t) const {
    Eigen::MatrixXd g(n_, n_);
    for (int i = 0; i < n_; ++i) {
      double out = 0.0;
      for (int j = 0; j < n_; ++j) {
        g(i, j) = (*this)(i, j, t);
        out += g(i, j);
      }
      g(i, i) = -out;
    }
    return g;
  }

 private:
  Kind kind_ = Kind::kConstant;
  int n_ = 0;
  double r_ = 0.0, s_ = 0.0;
  Eigen::MatrixXd constant_;
};

inline RateTable cosine_rate_table(double r_scale, double s_scale, int n_states) {
  return RateTable::cosine(r_scale, s_scale, n_states);
}

struct ChainSpec {
  SpacingModeSet modes;
  RateTable rates;
  Eigen::VectorXd initial_distribution;

  int size() const { return static_cast<int>(modes.size()); }
  double tau_star() const { return rates.bound(); }

  void validate() const {
    modes.validate();
    if (rates.size() != size()) throw ConfigError("markov: rate table size does not match modes.states");
    if (initial_distribution.size() != size()) {
      throw ConfigError("markov.initial_probabilities must have one entry per state");
    }
    if ((initial_distribution.array() < 0.0).any()) throw ConfigError("markov.initial_probabilities must be >= 0");
    if (std::abs(initial_distribution.sum() - 1.0) > 1e-12) {
      throw ConfigError("markov.initial_probabilities must sum to 1");
    }
  }

  static ChainSpec reference() {
    ChainSpec c;
    c.modes = SpacingModeSet::reference();
    c.rates = RateTable::cosine(10.0, 0.001, 5);
    c.initial_distribution.resize(5);
    c.initial_distribution << 0.02, 0.32, 0.32, 0.32, 0.02;
    return c;
  }
};

/// Transition matrices P(0, t) on a time grid. Entries are the raw integrator
/// output (rows are not renormalized).
struct ProbabilityTrace {
  std::vector<double> t;
  std::vector<Eigen::MatrixXd> P;

  /// Marginal state distribution p(t) = p0^T P(0, t), renormalized for reporting.
  Eigen::VectorXd marginal(std::size_t k, const Eigen::VectorXd& initial) const {
    Eigen::VectorXd p = (initial.transpose() * P[k]).transpose();
    const double s = p.sum();
    return s > 0.0 ? Eigen::VectorXd(p / s) : p;
  }
};

/// RK4 on dP/dt = P G(t), P(0, 0) = I. Records every `record_every` seconds
/// (0 records every step); the final time is always recorded.
inline ProbabilityTrace kolmogorov_forward(const ChainSpec& chain, double horizon, double dt, double record_every = 0.0) {
  const double tau_star = chain.tau_star();
  if (!(dt > 0.0)) throw ConfigError("kolmogorov_forward: dt must be positive");
  if (tau_star > 0.0 && dt > 0.1 / tau_star * (1.0 + 1e-12)) {
    std::ostringstream msg;
    msg << "kolmogorov_forward: dt = " << dt << " s exceeds the stability margin 0.1/tau* = " << 0.1 / tau_star << " s";
    throw ConfigError(msg.str());
  }
  if (!(horizon >= 0.0)) throw ConfigError("kolmogorov_forward: horizon must be >= 0");
  const int n = chain.size();
  const auto steps = static_cast<long>(std::ceil(horizon / dt - 1e-9));
  const double h = steps > 0 ? horizon / static_cast<double>(steps) : 0.0;
  const long stride = record_every > 0.0 ? std::max<long>(1, std::lround(record_every / std::max(h, 1e-300))) : 1;

  ProbabilityTrace trace;
  Eigen::MatrixXd P = Eigen::MatrixXd::Identity(n, n);
  trace.t.push_back(0.0);
  trace.P.push_back(P);
  for (long k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * h;
    const Eigen::MatrixXd g0 = chain.rates.generator(t);
    const Eigen::MatrixXd gh = chain.rates.generator(t + 0.5 * h);
    const Eigen::MatrixXd g1 = chain.rates.generator(t + h);
    const Eigen::MatrixXd k1 = P * g0;
    const Eigen::MatrixXd k2 = (P + 0.5 * h * k1) * gh;
    const Eigen::MatrixXd k3 = (P + 0.5 * h * k2) * gh;
    const Eigen::MatrixXd k4 = (P + h * k3) * g1;
    P += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if ((k + 1) % stride == 0 || k + 1 == steps) {
      trace.t.push_back(static_cast<double>(k + 1) * h);
      trace.P.push_back(P);
    }
  }
  return trace;
}

/// One realization of the spacing process: right-continuous, piecewise
/// constant, only genuine mode changes are stored.
struct ModePath {
  std::vector<double> jump_times{0.0};
  std::vector<int> mode_indices{0};
  double horizon = 0.0;

  static ModePath constant(int mode, double horizon) { return {{0.0}, {mode}, horizon}; }

  std::size_t jumps() const { return jump_times.size() - 1; }

  void validate(int n_modes) const {
    if (jump_times.empty() || jump_times.size() != mode_indices.size()) {
      throw ConfigError("mode path: jump_times and mode_indices must be non-empty and of equal length");
    }
    if (jump_times.front() != 0.0) throw ConfigError("mode path must start at t = 0");
    for (std::size_t k = 1; k < jump_times.size(); ++k) {
      if (!(jump_times[k] > jump_times[k - 1])) throw ConfigError("mode path jump times must be strictly increasing");
    }
    for (int m : mode_indices) {
      if (m < 0 || m >= n_modes) throw ConfigError("mode path index out of range");
    }
  }
};

/// Mode active at time t; at a jump time the post-jump mode.
inline int mode_at(const ModePath& path, double t) {
  if (t < 0.0 || t > path.horizon) throw std::out_of_range("mode_at: t outside [0, horizon]");
  const auto it = std::upper_bound(path.jump_times.begin(), path.jump_times.end(), t);
  const auto k = static_cast<std::size_t>(it - path.jump_times.begin()) - 1;
  return path.mode_indices[k];
}

/// Platform-independent uniform in [0, 1) from the top 53 bits of mt19937_64;
/// std:: distributions are implementation defined and would break bit-exact
/// reproducibility across standard libraries.
class UniformStream {
 public:
  explicit UniformStream(std::uint64_t seed) : engine_(seed) {}
  double next() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

 private:
  std::mt19937_64 engine_;
};

/// Ogata thinning: candidates arrive at rate tau* r; at a candidate in state i
/// the move i -> j is accepted with probability tau_ij(t) / (tau* r).
inline ModePath sample_path(const ChainSpec& chain, std::uint64_t seed, double horizon) {
  if (!(horizon >= 0.0)) throw ConfigError("sample_path: horizon must be >= 0");
  const int n = chain.size();
  UniformStream rng(seed);

  int state = n - 1;
  {
    const double u = rng.next();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      acc += chain.initial_distribution(i);
      if (u < acc) {
        state = i;
        break;
      }
    }
  }
  ModePath path = ModePath::constant(state, horizon);
  const double bound = chain.tau_star() * n;
  if (!(bound > 0.0)) return path;

  double t = 0.0;
  while (true) {
    const double gap = -std::log1p(-rng.next()) / bound;
    t += gap;
    if (t > horizon) break;
    if (!(gap > 0.0)) continue;
    const double target = rng.next() * bound;
    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
      acc += chain.rates(state, j, t);
      if (target < acc) {
        state = j;
        path.jump_times.push_back(t);
        path.mode_indices.push_back(j);
        break;
      }
    }
  }
  return path;
}

}  // namespace mixsim
