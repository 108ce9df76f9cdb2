#pragma once

// Two-class ARZ model with area-occupancy coupling: equilibria, linearization
// around (rho1*, rho2*) for a given AV spacing s2, and the per-mode Riemann
// coordinates (diagonal transport, boundary maps, in-domain couplings).

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixsim/errors.hpp"
#include "mixsim/units.hpp"

namespace mixsim {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Row3 = Eigen::RowVector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Physical constants of both vehicle classes and the road, SI units.
/// Class 1 is human driven, class 2 autonomous.
struct TrafficParams {
  double V1 = 0, V2 = 0;            // free-flow speed (m/s)
  double iota1 = 0, iota2 = 0;      // relaxation time (s)
  double gamma1 = 1, gamma2 = 1;    // pressure exponent
  double AObar1 = 1, AObar2 = 1;    // max area occupancy
  double a1 = 0;                    // HV impact area (m^2)
  double d = 0;                     // vehicle width (m)
  double l = 0;                     // vehicle length (m)
  double s1 = 0;                    // HV spacing (m)
  double rho1_star = 0, rho2_star = 0;  // equilibrium densities (veh/m)
  double L = 0;                     // road length (m)
  double W = 0;                     // road width (m)

  /// Footprint d*(l + s) of a vehicle keeping spacing s.
  double impact_area(double spacing) const { return d * (l + spacing); }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("traffic.") + name + " must be > 0");
    };
    positive(V1, "V1");
    positive(V2, "V2");
    positive(iota1, "iota1");
    positive(iota2, "iota2");
    positive(a1, "a1");
    positive(d, "d");
    positive(s1, "s1");
    positive(L, "L");
    positive(W, "W");
    if (!(l >= 0.0)) throw ConfigError("traffic.l must be >= 0");
    if (!(rho1_star >= 0.0) || !(rho2_star >= 0.0)) throw ConfigError("traffic.rho*_star must be >= 0");
    if (!(AObar1 > 0.0 && AObar1 <= 1.0)) throw ConfigError("traffic.AObar1 must lie in (0, 1]");
    if (!(AObar2 > 0.0 && AObar2 <= 1.0)) throw ConfigError("traffic.AObar2 must lie in (0, 1]");
    if (!(gamma1 >= 1.0)) throw ConfigError("traffic.gamma1 must be >= 1");
    if (!(gamma2 >= 1.0)) throw ConfigError("traffic.gamma2 must be >= 1");
  }

  /// Mixed HV/AV congestion on a 1 km two-lane segment: 150/75 veh/km,
  /// 80/60 km/h, relaxation 30/60 s, nominal AV spacing 20 m.
  static TrafficParams reference() {
    TrafficParams p;
    p.V1 = units::kmh(80.0);
    p.V2 = units::kmh(60.0);
    p.iota1 = 30.0;
    p.iota2 = 60.0;
    p.gamma1 = 2.5;
    p.gamma2 = 2.0;
    p.AObar1 = 0.9;
    p.AObar2 = 0.85;
    p.d = 2.0;
    p.l = 0.0;
    p.s1 = 5.0;
    p.a1 = p.impact_area(p.s1);
    p.rho1_star = units::veh_per_km(150.0);
    p.rho2_star = units::veh_per_km(75.0);
    p.L = 1000.0;
    p.W = 6.0;
    return p;
  }
};

/// Ordered set of admissible AV spacings together with the nominal value the
/// controller is designed for.
struct SpacingModeSet {
  std::vector<double> states;  // m, strictly ascending
  double nominal = 0;
  double lower = 0, upper = 0;

  std::size_t size() const { return states.size(); }

  void validate() const {
    if (states.empty()) throw ConfigError("modes.states must not be empty");
    for (std::size_t i = 1; i < states.size(); ++i) {
      if (!(states[i] > states[i - 1])) throw ConfigError("modes.states must be strictly ascending");
    }
    if (!(lower <= states.front()) || !(states.back() <= upper)) {
      throw ConfigError("modes.states must lie within [lower, upper]");
    }
    if (!(lower < nominal && nominal < upper)) throw ConfigError("modes.nominal must lie strictly inside (lower, upper)");
  }

  static SpacingModeSet reference() { return {{18.0, 19.6, 20.0, 20.4, 22.0}, 20.0, 18.0, 22.0}; }
};

// ---------------------------------------------------------------------------
// Fundamental diagram and equilibria

inline double area_occupancy(double rho1, double rho2, double a1, double a2, double W) {
  if (rho1 < 0.0 || rho2 < 0.0) throw std::domain_error("area_occupancy: negative density");
  if (!(W > 0.0)) throw std::domain_error("area_occupancy: road width must be positive");
  return (a1 * rho1 + a2 * rho2) / W;
}

enum class VehicleClass { kHuman = 1, kAutonomous = 2 };

/// Modified Greenshields speed. Not clamped: AO above the class maximum
/// yields a negative speed, which later classifies the mode as invalid.
inline double equilibrium_speed(VehicleClass cls, double AO, const TrafficParams& p) {
  if (AO < 0.0) throw std::domain_error("equilibrium_speed: negative area occupancy");
  if (cls == VehicleClass::kHuman) return p.V1 * (1.0 - std::pow(AO / p.AObar1, p.gamma1));
  return p.V2 * (1.0 - std::pow(AO / p.AObar2, p.gamma2));
}

struct Equilibrium {
  double a2 = 0;  // AV impact area (m^2)
  double AO = 0;
  double v1 = 0, v2 = 0;  // m/s
  double q1 = 0, q2 = 0;  // veh/s
};

inline Equilibrium equilibrium(const TrafficParams& p, double s2) {
  if (!(s2 > 0.0)) throw std::domain_error("equilibrium: AV spacing must be positive");
  Equilibrium e;
  e.a2 = p.impact_area(s2);
  e.AO = area_occupancy(p.rho1_star, p.rho2_star, p.a1, e.a2, p.W);
  e.v1 = equilibrium_speed(VehicleClass::kHuman, e.AO, p);
  e.v2 = equilibrium_speed(VehicleClass::kAutonomous, e.AO, p);
  e.q1 = e.v1 * p.rho1_star;
  e.q2 = e.v2 * p.rho2_star;
  return e;
}

/// beta(m, n) = -dV_{e,m}/drho_n at the equilibrium densities (analytic).
inline Mat2 beta_coefficients(const TrafficParams& p, double s2) {
  const double a2 = p.impact_area(s2);
  const double AO = area_occupancy(p.rho1_star, p.rho2_star, p.a1, a2, p.W);
  const std::array<double, 2> V{p.V1, p.V2};
  const std::array<double, 2> gamma{p.gamma1, p.gamma2};
  const std::array<double, 2> AObar{p.AObar1, p.AObar2};
  const std::array<double, 2> area{p.a1, a2};
  Mat2 beta;
  for (int m = 0; m < 2; ++m) {
    if (gamma[m] < 1.0) throw ModelError("beta_coefficients: pressure exponent below 1 is singular at AO = 0");
    const double slope = V[m] * gamma[m] * std::pow(AO / AObar[m], gamma[m] - 1.0) / AObar[m];
    for (int n = 0; n < 2; ++n) beta(m, n) = slope * area[n] / p.W;
  }
  return beta;
}

struct JacobianPair {
  Mat4 transport;  // J_lambda
  Mat4 source;     // J
};

/// Linearized system z_t + transport z_x = source z, state (rho1, v1, rho2, v2).
inline JacobianPair assemble_jacobians(const TrafficParams& p, const Equilibrium& e, const Mat2& beta) {
  const double r1 = p.rho1_star, r2 = p.rho2_star;
  const double v1 = e.v1, v2 = e.v2;
  JacobianPair jac;
  jac.transport << v1, r1, 0.0, 0.0,
      0.0, v1 - beta(0, 0) * r1, beta(0, 1) * (v1 - v2), -beta(0, 1) * r2,
      0.0, 0.0, v2, r2,
      beta(1, 0) * (v2 - v1), -beta(1, 0) * r1, 0.0, v2 - beta(1, 1) * r2;
  jac.source << 0.0, 0.0, 0.0, 0.0,
      -beta(0, 0) / p.iota1, -1.0 / p.iota1, -beta(0, 1) / p.iota1, 0.0,
      0.0, 0.0, 0.0, 0.0,
      -beta(1, 0) / p.iota2, 0.0, -beta(1, 1) / p.iota2, -1.0 / p.iota2;
  return jac;
}

struct CharacteristicSpeeds {
  std::array<double, 4> lambda{};  // (v1*, v2*, lambda3, lambda4)
  double Delta = 0;
};

inline CharacteristicSpeeds characteristic_speeds(const TrafficParams& p, const Equilibrium& e, const Mat2& beta) {
  const double r1 = p.rho1_star, r2 = p.rho2_star;
  const double cal_v1 = beta(0, 0), cal_v2 = beta(1, 1);
  const double gap = cal_v2 * r2 - cal_v1 * r1 + e.v1 - e.v2;
  const double arg = gap * gap + 4.0 * beta(0, 1) * beta(1, 0) * r1 * r2;
  if (arg < 0.0) throw ModelError("characteristic_speeds: negative discriminant, system not hyperbolic");
  CharacteristicSpeeds cs;
  cs.Delta = std::sqrt(arg);
  const double mean = e.v1 + e.v2 - cal_v1 * r1 - cal_v2 * r2;
  cs.lambda = {e.v1, e.v2, 0.5 * (mean + cs.Delta), 0.5 * (mean - cs.Delta)};
  return cs;
}

enum class Regime { kFreeFlow, kCongested, kInvalid };

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::kFreeFlow: return "free-flow";
    case Regime::kCongested: return "congested";
    case Regime::kInvalid: return "invalid";
  }
  return "?";
}

inline Regime classify_regime(const std::array<double, 4>& lambda) {
  const bool downstream = lambda[0] > 0.0 && lambda[1] > 0.0 && lambda[2] > 0.0;
  if (!downstream) return Regime::kInvalid;
  if (lambda[3] < 0.0) return Regime::kCongested;
  if (lambda[3] > 0.0) return Regime::kFreeFlow;
  return Regime::kInvalid;
}

struct Diagonalization {
  Mat4 basis;      // columns: eigenvectors for (lambda1, lambda2, lambda3, lambda4)
  Mat4 basis_inv;
  Mat4 source_hat; // basis^-1 * source * basis
};

/// Eigenvectors from the null space of (transport - lambda_k I), each scaled
/// so that its largest-magnitude entry is +1 (first index wins ties).
inline Diagonalization diagonalize(const Mat4& transport, const Mat4& source, const std::array<double, 4>& lambda) {
  double scale = 0.0;
  for (double l : lambda) scale = std::max(scale, std::abs(l));
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      if (std::abs(lambda[i] - lambda[j]) < 1e-9 * scale) {
        std::ostringstream msg;
        msg << "diagonalize: near-degenerate characteristic speeds lambda" << i + 1 << " = " << lambda[i]
            << ", lambda" << j + 1 << " = " << lambda[j];
        throw ModelError(msg.str());
      }
    }
  }
  Diagonalization out;
  for (int k = 0; k < 4; ++k) {
    const Mat4 shifted = transport - lambda[k] * Mat4::Identity();
    Eigen::JacobiSVD<Mat4> svd(shifted, Eigen::ComputeFullV);
    Vec4 v = svd.matrixV().col(3);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < 4; ++i) {
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    }
    out.basis.col(k) = v / v(arg);
  }
  Eigen::FullPivLU<Mat4> lu(out.basis);
  if (!lu.isInvertible()) throw ModelError("diagonalize: eigenvector basis is singular");
  out.basis_inv = lu.inverse();
  out.source_hat = out.basis_inv * source * out.basis;
  return out;
}

// Riemann variables are ordered by transport speed (lambda2, lambda3, lambda1 |
// lambda4): w_k collects eigen-component kRiemannOrder[k].
inline constexpr std::array<int, 4> kRiemannOrder{1, 2, 0, 3};

/// Coefficients of the in-domain coupling M(x) = E(x) Jp E(x)^-1 - diag(Jp),
/// with Jp the permuted source_hat and E(x) = diag(exp(-decay_k x)).
struct SigmaField {
  Mat4 coupling = Mat4::Zero();  // permuted source_hat with zeroed diagonal
  Vec4 decay = Vec4::Zero();

  double entry(int k, int l, double x) const {
    if (k == l) return 0.0;
    return coupling(k, l) * std::exp((decay(l) - decay(k)) * x);
  }
  Mat4 full(double x) const {
    Mat4 m;
    for (int k = 0; k < 4; ++k)
      for (int l = 0; l < 4; ++l) m(k, l) = entry(k, l, x);
    return m;
  }
  /// Sigma^{++}(x), 3x3 with zero diagonal.
  Mat3 pp(double x) const {
    Mat3 m;
    for (int k = 0; k < 3; ++k)
      for (int l = 0; l < 3; ++l) m(k, l) = entry(k, l, x);
    return m;
  }
  /// Sigma^{+-}(x), 3x1.
  Vec3 pm(double x) const { return {entry(0, 3, x), entry(1, 3, x), entry(2, 3, x)}; }
  /// Sigma^{-+}(x), 1x3.
  Row3 mp(double x) const { return {entry(3, 0, x), entry(3, 1, x), entry(3, 2, x)}; }
};

/// Everything derived from one AV spacing value.
struct ModeLinearization {
  double s2 = 0;
  Equilibrium eq;
  Mat2 beta = Mat2::Zero();
  Mat4 Jlambda = Mat4::Zero();
  Mat4 Jsource = Mat4::Zero();
  std::array<double, 4> lambda{};
  double Delta = 0;
  Regime regime = Regime::kInvalid;

  // Riemann data, only filled for congested modes.
  bool has_riemann = false;
  Mat4 Vbasis = Mat4::Identity();
  Mat4 Vinv = Mat4::Identity();
  Mat4 Jhat = Mat4::Zero();
  Vec4 speeds = Vec4::Zero();   // (lambda2, lambda3, lambda1, lambda4)
  Vec4 decay = Vec4::Zero();    // Jhat_kk / speed in Riemann order
  SigmaField sigma;
  Vec4 kappa = Vec4::Zero();
  Vec3 Q = Vec3::Zero();
  Row3 R = Row3::Zero();
  double L = 0;

  Vec3 lambda_plus() const { return speeds.head<3>(); }
  double lambda_minus() const { return -speeds(3); }
  double max_abs_speed() const {
    double m = 0.0;
    for (double l : lambda) m = std::max(m, std::abs(l));
    return m;
  }
};

inline void require_riemann(const ModeLinearization& mode, const char* who) {
  if (!mode.has_riemann) {
    std::ostringstream msg;
    msg << who << ": mode s2 = " << mode.s2 << " m is " << regime_name(mode.regime)
        << "; Riemann coordinates need the congested regime";
    throw ModelError(msg.str());
  }
}

struct BoundaryMaps {
  Vec3 Q;
  Vec4 kappa;
  Row3 R;
};

/// Left map w+(0) = Q w-(0) and right map w-(L) = R w+(L) + Ubar, obtained by
/// substituting z = V P^T E(x)^-1 w into the physical boundary rows
/// rho1(0) = 0, rho2(0) = 0, flux(0) = 0 and flux(L) = U.
inline BoundaryMaps compute_boundary_maps(const TrafficParams& p, const Equilibrium& e, const Mat4& basis,
                                          const Vec4& decay, double L) {
  BoundaryMaps bm;
  const Eigen::RowVector4d flux_row(e.v1, p.rho1_star, e.v2, p.rho2_star);
  bm.kappa = (flux_row * basis).transpose();
  if (std::abs(bm.kappa(3)) < 1e-14 * bm.kappa.cwiseAbs().maxCoeff()) {
    throw ModelError("boundary_maps: kappa4 vanishes, outflow boundary is not controllable");
  }
  Mat3 A;
  A.row(0) = basis.block<1, 3>(0, 0);  // rho1 row
  A.row(1) = basis.block<1, 3>(2, 0);  // rho2 row
  A.row(2) = bm.kappa.head<3>().transpose();
  const Vec3 b(basis(0, 3), basis(2, 3), bm.kappa(3));
  Eigen::FullPivLU<Mat3> lu(A);
  if (!lu.isInvertible()) throw ModelError("boundary_maps: left boundary block is singular");
  const Vec3 u = -lu.solve(b);  // eigen-components 1..3 per unit eigen-component 4
  bm.Q = Vec3(u(1), u(2), u(0));
  // u_{order(k)}(L) = exp(decay_k L) w_k(L)
  for (int k = 0; k < 3; ++k) {
    bm.R(k) = -bm.kappa(kRiemannOrder[k]) / bm.kappa(3) * std::exp((decay(k) - decay(3)) * L);
  }
  return bm;
}

/// Builds the full per-mode linearization. Non-congested modes are returned
/// with has_riemann = false (the caller decides whether that is an error).
inline ModeLinearization linearize(const TrafficParams& p, double s2) {
  ModeLinearization m;
  m.s2 = s2;
  m.L = p.L;
  m.eq = equilibrium(p, s2);
  m.beta = beta_coefficients(p, s2);
  const auto jac = assemble_jacobians(p, m.eq, m.beta);
  m.Jlambda = jac.transport;
  m.Jsource = jac.source;
  const auto cs = characteristic_speeds(p, m.eq, m.beta);
  m.lambda = cs.lambda;
  m.Delta = cs.Delta;
  m.regime = classify_regime(m.lambda);
  if (m.regime != Regime::kCongested) return m;

  const auto dg = diagonalize(m.Jlambda, m.Jsource, m.lambda);
  m.Vbasis = dg.basis;
  m.Vinv = dg.basis_inv;
  m.Jhat = dg.source_hat;
  Mat4 permuted;
  for (int k = 0; k < 4; ++k) {
    m.speeds(k) = m.lambda[kRiemannOrder[k]];
    for (int l = 0; l < 4; ++l) permuted(k, l) = m.Jhat(kRiemannOrder[k], kRiemannOrder[l]);
  }
  for (int k = 0; k < 4; ++k) m.decay(k) = permuted(k, k) / m.speeds(k);
  m.sigma.coupling = permuted;
  m.sigma.coupling.diagonal().setZero();
  m.sigma.decay = m.decay;
  const auto bm = compute_boundary_maps(p, m.eq, m.Vbasis, m.decay, p.L);
  m.kappa = bm.kappa;
  m.Q = bm.Q;
  m.R = bm.R;
  m.has_riemann = true;
  return m;
}

inline BoundaryMaps boundary_maps(const ModeLinearization& mode) {
  require_riemann(mode, "boundary_maps");
  return {mode.Q, mode.kappa, mode.R};
}

struct RiemannTransform {
  Mat4 T;     // w = T z
  Mat4 Tinv;  // z = Tinv w
};

inline RiemannTransform riemann_transform_at(const ModeLinearization& mode, double x) {
  require_riemann(mode, "riemann_transform_at");
  RiemannTransform rt;
  for (int k = 0; k < 4; ++k) {
    const double e = std::exp(-mode.decay(k) * x);
    rt.T.row(k) = e * mode.Vinv.row(kRiemannOrder[k]);
    rt.Tinv.col(k) = mode.Vbasis.col(kRiemannOrder[k]) / e;
  }
  return rt;
}

struct SigmaBlocks {
  Mat3 pp;
  Vec3 pm;
  Row3 mp;
  Mat4 full;  // whole coupling matrix of the w-system (zero diagonal)
};

inline SigmaBlocks sigma_matrices(const ModeLinearization& mode, double x) {
  require_riemann(mode, "sigma_matrices");
  return {mode.sigma.pp(x), mode.sigma.pm(x), mode.sigma.mp(x), mode.sigma.full(x)};
}

/// Extreme squared singular values of T(x) over the sample points: the
/// constants in m_w |z|^2 <= |w|^2 <= M_w |z|^2.
struct NormBounds {
  double lower = std::numeric_limits<double>::infinity();
  double upper = 0.0;
};

inline NormBounds transform_norm_bounds(const ModeLinearization& mode, const std::vector<double>& xs) {
  NormBounds nb;
  for (double x : xs) {
    const auto rt = riemann_transform_at(mode, x);
    Eigen::JacobiSVD<Mat4> svd(rt.T);
    const auto& s = svd.singularValues();
    nb.upper = std::max(nb.upper, s(0) * s(0));
    nb.lower = std::min(nb.lower, s(3) * s(3));
  }
  return nb;
}

}  // namespace mixsim
