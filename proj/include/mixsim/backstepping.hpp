#pragma once

// Backstepping kernels K (1x3) and N (scalar) on the triangle 0 <= xi <= x <= L,
// and the nominal full-state boundary controller built from them.
//
// Kernel equations (Lp = diag(lambda+), Lm = -lambda4 > 0):
//   -Lm K_x + K_xi Lp = -K Spp(xi) - Smp(xi) N
//    Lm (N_x + N_xi)  =  K Spm(xi)
//   (-Lm - lambda+_m) k_m(x, x) = Smp_m(x)
//   -Lm N(x, 0) + K(x, 0) Lp Q = 0
// solved by successive approximations along characteristics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <vector>

#include "mixsim/errors.hpp"
#include "mixsim/traffic_model.hpp"

namespace mixsim {

/// Coefficients of the kernel equations, detached from the traffic model so
/// synthetic problems can be posed directly.
struct KernelProblem {
  Vec3 lambda_plus = Vec3::Ones();
  double lambda_minus = 1.0;
  SigmaField sigma;
  Vec3 Q = Vec3::Zero();
  double L = 1.0;

  static KernelProblem from_mode(const ModeLinearization& mode) {
    require_riemann(mode, "KernelProblem");
    return {mode.lambda_plus(), mode.lambda_minus(), mode.sigma, mode.Q, mode.L};
  }

  /// Imposed diagonal trace k_m(x, x).
  Row3 diagonal_trace(double x) const {
    const Row3 smp = sigma.mp(x);
    Row3 k;
    for (int m = 0; m < 3; ++m) k(m) = smp(m) / (-lambda_minus - lambda_plus(m));
    return k;
  }
};

/// Nodal kernel values on a uniform triangular grid, node (i, j) at
/// (x, xi) = (i h, j h), 0 <= j <= i <= n.
struct KernelGrid {
  int n = 0;
  double L = 0.0;
  double h = 0.0;
  std::vector<Row3> K;
  std::vector<double> N;
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;                // last sup-norm change
  std::vector<double> residual_history; // one entry per sweep

  KernelGrid() = default;
  KernelGrid(int n_, double L_) : n(n_), L(L_), h(L_ / n_) {
    const auto count = static_cast<std::size_t>((n + 1) * (n + 2) / 2);
    K.assign(count, Row3::Zero());
    N.assign(count, 0.0);
  }

  static std::size_t index(int i, int j) { return static_cast<std::size_t>(i) * (i + 1) / 2 + j; }
  std::size_t node_count() const { return K.size(); }

  Row3& k(int i, int j) { return K[index(i, j)]; }
  const Row3& k(int i, int j) const { return K[index(i, j)]; }
  double& nk(int i, int j) { return N[index(i, j)]; }
  double nk(int i, int j) const { return N[index(i, j)]; }

  Row3 k_at(double x, double xi) const { return interpolate(K, x, xi); }
  double n_at(double x, double xi) const { return interpolate(N, x, xi); }

  /// Bilinear inside full cells; the cells cut by the diagonal use linear
  /// interpolation on their lower triangle so no value above xi = x is read.
  template <class T>
  T interpolate(const std::vector<T>& field, double x, double xi) const {
    x = std::clamp(x, 0.0, L);
    xi = std::clamp(xi, 0.0, x);
    const double a = x / h, b = xi / h;
    const int i = std::min(static_cast<int>(a), n - 1);
    int j = std::min(static_cast<int>(b), i);
    const double fa = a - i;
    double fb = b - j;
    if (j < i) {
      return (1.0 - fa) * (1.0 - fb) * field[index(i, j)] + fa * (1.0 - fb) * field[index(i + 1, j)] +
             (1.0 - fa) * fb * field[index(i, j + 1)] + fa * fb * field[index(i + 1, j + 1)];
    }
    fb = std::min(fb, fa);
    return (1.0 - fa) * field[index(i, i)] + (fa - fb) * field[index(i + 1, i)] + fb * field[index(i + 1, i + 1)];
  }
};

struct KernelSettings {
  int n = 64;
  double tol = 1e-8;
  int max_iter = 200;
};

namespace detail {

inline double sup_change(const KernelGrid& a, const KernelGrid& b) {
  double change = 0.0;
  for (std::size_t q = 0; q < a.node_count(); ++q) {
    change = std::max(change, (a.K[q] - b.K[q]).cwiseAbs().maxCoeff());
    change = std::max(change, std::abs(a.N[q] - b.N[q]));
  }
  return change;
}

// N along the diagonal characteristics, started from the base condition.
inline void sweep_n(const KernelProblem& pb, KernelGrid& g) {
  const Vec3 lpq = pb.lambda_plus.cwiseProduct(pb.Q);
  for (int i = 0; i <= g.n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const int i0 = i - j;
      double value = g.k(i0, 0).dot(lpq) / pb.lambda_minus;
      if (j > 0) {
        double integral = 0.0;
        for (int s = 0; s <= j; ++s) {
          const double xi_s = s * g.h;
          const double f = g.k(i0 + s, s).dot(pb.sigma.pm(xi_s));
          integral += (s == 0 || s == j) ? 0.5 * f : f;
        }
        value += integral * g.h / pb.lambda_minus;
      }
      g.nk(i, j) = value;
    }
  }
}

}  // namespace detail

/// Successive approximations: each sweep integrates k_m backwards along
/// (-Lm, lambda+_m) from the diagonal using the previous iterate, then N
/// along (1, 1) from the base. Throws KernelError if max_iter sweeps do not
/// bring the sup-norm change below tol.
inline KernelGrid solve_kernels(const KernelProblem& pb, int n, double tol = 1e-8, int max_iter = 200) {
  if (n < 16) throw ConfigError("solve_kernels: grid resolution must be >= 16");
  for (int m = 0; m < 3; ++m) {
    const double den = pb.lambda_minus + pb.lambda_plus(m);
    if (std::abs(den) < 1e-12 * std::max(1.0, pb.lambda_minus)) {
      throw ModelError("solve_kernels: lambda- + lambda+_m vanishes, diagonal condition is degenerate");
    }
  }
  KernelGrid cur(n, pb.L);
  const double h = cur.h;

  // Initial iterate: diagonal data carried unchanged along the characteristics.
  for (int i = 0; i <= n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const double x = i * h, xi = j * h;
      for (int m = 0; m < 3; ++m) {
        const double s_end = (x - xi) / (pb.lambda_minus + pb.lambda_plus(m));
        cur.k(i, j)(m) = pb.diagonal_trace(x - pb.lambda_minus * s_end)(m);
      }
    }
  }
  detail::sweep_n(pb, cur);

  KernelGrid next = cur;
  for (int it = 1; it <= max_iter; ++it) {
    for (int i = 0; i <= n; ++i) {
      for (int j = 0; j <= i; ++j) {
        const double x = i * h, xi = j * h;
        if (i == j) {
          next.k(i, j) = pb.diagonal_trace(x);
          continue;
        }
        Row3 value;
        for (int m = 0; m < 3; ++m) {
          const double lm = pb.lambda_minus, lp = pb.lambda_plus(m);
          const double s_end = (x - xi) / (lm + lp);
          const double span = std::max(lm, lp) * s_end;
          const int steps = std::max(1, static_cast<int>(std::ceil(span / h - 1e-9)));
          const double ds = s_end / steps;
          double integral = 0.0;
          for (int q = 0; q <= steps; ++q) {
            const double s = q * ds;
            const double px = std::max(x - lm * s, 0.0);
            const double pxi = std::min(xi + lp * s, px);
            const Row3 kk = cur.k_at(px, pxi);
            const double nn = cur.n_at(px, pxi);
            const double f = -(kk * pb.sigma.pp(pxi))(m) - pb.sigma.mp(pxi)(m) * nn;
            integral += (q == 0 || q == steps) ? 0.5 * f : f;
          }
          integral *= ds;
          value(m) = pb.diagonal_trace(x - lm * s_end)(m) - integral;
        }
        next.k(i, j) = value;
      }
    }
    detail::sweep_n(pb, next);

    const double change = detail::sup_change(next, cur);
    next.iterations = it;
    next.residual = change;
    next.residual_history = cur.residual_history;
    next.residual_history.push_back(change);
    std::swap(cur, next);
    if (change < tol) {
      cur.converged = true;
      return cur;
    }
  }
  std::ostringstream msg;
  msg << "solve_kernels: no convergence after " << max_iter << " sweeps (last change " << cur.residual << ")";
  throw KernelError(msg.str(), cur.residual, cur.iterations);
}

inline KernelGrid solve_kernels(const ModeLinearization& nominal, const KernelSettings& s = {}) {
  return solve_kernels(KernelProblem::from_mode(nominal), s.n, s.tol, s.max_iter);
}

struct KernelResidual {
  double pde_K = 0;
  double pde_N = 0;
  double bc_diag = 0;
  double bc_base = 0;
};

/// Sup-norm residuals of the kernel relations under finite-difference
/// substitution: central differences on interior nodes for the two PDEs, the
/// imposed diagonal trace on diagonal nodes, and for the base relation the
/// traces K(x, 0), N(x, 0) reconstructed by linear extrapolation from the
/// rows xi = h, 2h (the nodal base values satisfy it by construction).
inline KernelResidual kernel_residual(const KernelGrid& g, const KernelProblem& pb) {
  KernelResidual r;
  const double h = g.h;
  for (int i = 2; i < g.n; ++i) {
    for (int j = 1; j < i; ++j) {
      const double xi = j * h;
      const Row3 kx = (g.k(i + 1, j) - g.k(i - 1, j)) / (2 * h);
      const Row3 kxi = (g.k(i, j + 1) - g.k(i, j - 1)) / (2 * h);
      const double nx = (g.nk(i + 1, j) - g.nk(i - 1, j)) / (2 * h);
      const double nxi = (g.nk(i, j + 1) - g.nk(i, j - 1)) / (2 * h);
      const Row3 res_k = -pb.lambda_minus * kx + kxi.cwiseProduct(pb.lambda_plus.transpose()) +
                         g.k(i, j) * pb.sigma.pp(xi) + pb.sigma.mp(xi) * g.nk(i, j);
      const double res_n = pb.lambda_minus * (nx + nxi) - g.k(i, j).dot(pb.sigma.pm(xi));
      r.pde_K = std::max(r.pde_K, res_k.cwiseAbs().maxCoeff());
      r.pde_N = std::max(r.pde_N, std::abs(res_n));
    }
  }
  for (int i = 0; i <= g.n; ++i) {
    const double x = i * h;
    const Row3 smp = pb.sigma.mp(x);
    for (int m = 0; m < 3; ++m) {
      const double res = (-pb.lambda_minus - pb.lambda_plus(m)) * g.k(i, i)(m) - smp(m);
      r.bc_diag = std::max(r.bc_diag, std::abs(res));
    }
  }
  const Vec3 lpq = pb.lambda_plus.cwiseProduct(pb.Q);
  for (int i = 2; i <= g.n; ++i) {
    const Row3 k0 = 2.0 * g.k(i, 1) - g.k(i, 2);
    const double n0 = 2.0 * g.nk(i, 1) - g.nk(i, 2);
    r.bc_base = std::max(r.bc_base, std::abs(-pb.lambda_minus * n0 + k0.dot(lpq)));
  }
  return r;
}

inline KernelResidual kernel_residual(const KernelGrid& g, const ModeLinearization& mode) {
  return kernel_residual(g, KernelProblem::from_mode(mode));
}

// ---------------------------------------------------------------------------
// Cell-centred grids used by the controller, the simulator and the analysis.

inline std::vector<double> cell_centers(double L, int n_cells) {
  std::vector<double> x(static_cast<std::size_t>(n_cells));
  const double dx = L / n_cells;
  for (int k = 0; k < n_cells; ++k) x[static_cast<std::size_t>(k)] = (k + 0.5) * dx;
  return x;
}

/// Volterra operator theta = (w+, w- - int_0^x K(x, xi) w+ + N(x, xi) w- dxi)
/// on a cell-centred grid. Trapezoid over the centres, with the half cell
/// [0, x_0] closed by the value at x_0.
class BacksteppingOperator {
 public:
  BacksteppingOperator() = default;
  BacksteppingOperator(const KernelGrid& kernels, double L, int n_cells)
      : n_(n_cells), dx_(L / n_cells) {
    const auto x = cell_centers(L, n_cells);
    offsets_.resize(static_cast<std::size_t>(n_) + 1, 0);
    for (int k = 0; k < n_; ++k) offsets_[k + 1] = offsets_[k] + static_cast<std::size_t>(k + 1);
    K_.resize(offsets_.back());
    N_.resize(offsets_.back());
    for (int k = 0; k < n_; ++k) {
      for (int m = 0; m <= k; ++m) {
        K_[offsets_[k] + m] = kernels.k_at(x[k], x[m]);
        N_[offsets_[k] + m] = kernels.n_at(x[k], x[m]);
      }
    }
  }

  int cells() const { return n_; }

  std::vector<Vec4> apply(const std::vector<Vec4>& w) const {
    std::vector<Vec4> theta = w;
    for (int k = 0; k < n_; ++k) {
      double integral = 0.0;
      for (int m = 0; m <= k; ++m) {
        const double weight = m == k ? 0.5 * dx_ : dx_;
        const auto& wm = w[m];
        integral += weight * (K_[offsets_[k] + m].dot(wm.head<3>()) + N_[offsets_[k] + m] * wm(3));
      }
      theta[k](3) = w[k](3) - integral;
    }
    return theta;
  }

 private:
  int n_ = 0;
  double dx_ = 0.0;
  std::vector<std::size_t> offsets_;
  std::vector<Row3> K_;
  std::vector<double> N_;
};

/// Nominal full-state feedback
///   Ubar = -R0 w+(L) + int_0^L K(L, xi) w+(xi) + N(L, xi) w-(xi) dxi,
/// evaluated on the nominal Riemann variables w = T0(x) z, and U = u_scale Ubar.
struct Controller {
  Row3 R0 = Row3::Zero();
  std::vector<Row3> K_L;
  std::vector<double> N_L;
  double u_scale = 0.0;
  ModeLinearization nominal;
  int n_cells = 0;
  double dx = 0.0;
  std::vector<Mat4> T0;  // nominal transform at cell centres

  /// Ubar from nominal Riemann variables. w+(L) is the linear extrapolation
  /// of the last two cells to the boundary face.
  double ubar(const std::vector<Vec4>& w) const {
    const int n = n_cells;
    const Vec3 w_last = w[n - 1].head<3>();
    const Vec3 w_prev = n > 1 ? Vec3(w[n - 2].head<3>()) : w_last;
    const Vec3 w_plus_L = 1.5 * w_last - 0.5 * w_prev;
    double integral = 0.0;
    for (int k = 0; k < n; ++k) integral += K_L[k].dot(w[k].head<3>()) + N_L[k] * w[k](3);
    return -R0.dot(w_plus_L) + integral * dx;
  }
};

inline Controller build_controller(const ModeLinearization& nominal, const KernelGrid& kernels, int n_cells) {
  require_riemann(nominal, "build_controller");
  if (!kernels.converged) throw NumericalError("build_controller: kernels did not converge");
  if (n_cells < 2) throw ConfigError("build_controller: need at least 2 cells");
  if (nominal.kappa(3) == 0.0) throw ModelError("build_controller: kappa4 = 0");
  Controller c;
  c.nominal = nominal;
  c.R0 = nominal.R;
  c.n_cells = n_cells;
  c.dx = nominal.L / n_cells;
  c.u_scale = nominal.kappa(3) * std::exp(nominal.decay(3) * nominal.L);
  if (!std::isfinite(c.u_scale) || c.u_scale == 0.0) throw ModelError("build_controller: degenerate input scaling");
  const auto x = cell_centers(nominal.L, n_cells);
  c.K_L.resize(x.size());
  c.N_L.resize(x.size());
  c.T0.resize(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    c.K_L[k] = kernels.k_at(nominal.L, x[k]);
    c.N_L[k] = kernels.n_at(nominal.L, x[k]);
    c.T0[k] = riemann_transform_at(nominal, x[k]).T;
  }
  return c;
}

/// Physical boundary input U (veh/s) for the deviation profile z.
/// The nominal transform is used whatever mode the plant is in.
inline double control_input(const Controller& c, const std::vector<Vec4>& z, double /*t*/ = 0.0) {
  if (static_cast<int>(z.size()) != c.n_cells) {
    throw std::invalid_argument("control_input: state grid does not match the controller grid");
  }
  std::vector<Vec4> w(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) w[k] = c.T0[k] * z[k];
  return c.u_scale * c.ubar(w);
}

}  // namespace mixsim
