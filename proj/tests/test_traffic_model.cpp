#include <catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <random>

#include "mixsim/traffic_model.hpp"

using namespace mixsim;
using Catch::Approx;

namespace {

const TrafficParams kRef = TrafficParams::reference();

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// Independent Greenshields evaluation straight from the definitions.
double greenshields(double V, double AO, double AObar, double gamma) { return V * (1.0 - std::pow(AO / AObar, gamma)); }

// z -> physical boundary rows: rho1, rho2 and total flux deviation.
Eigen::RowVector4d flux_row(const ModeLinearization& m) {
  return {m.eq.v1, kRef.rho1_star, m.eq.v2, kRef.rho2_star};
}

}  // namespace

TEST_CASE("area occupancy from impact areas") {
  CHECK(area_occupancy(0.15, 0.075, 10, 40, 6) == Approx(0.75).epsilon(1e-15));
  CHECK(area_occupancy(0, 0, 10, 40, 6) == 0.0);
  CHECK(area_occupancy(0.15, 0, 10, 40, 6) == Approx(0.25).epsilon(1e-15));
  CHECK_THROWS_AS(area_occupancy(-0.01, 0.0, 10, 40, 6), std::domain_error);
}

TEST_CASE("equilibrium speeds") {
  const double v1 = equilibrium_speed(VehicleClass::kHuman, 0.75, kRef);
  CHECK(rel(units::to_kmh(v1), 29.16) < 0.015);
  CHECK(equilibrium_speed(VehicleClass::kAutonomous, kRef.AObar2, kRef) == Approx(0.0).margin(1e-15));
  CHECK(equilibrium_speed(VehicleClass::kAutonomous, 0.0, kRef) == kRef.V2);
  // Above jam occupancy the speed is negative and is not clamped.
  CHECK(equilibrium_speed(VehicleClass::kHuman, 0.95, kRef) < 0.0);
}

TEST_CASE("nominal equilibrium") {
  const auto e = equilibrium(kRef, 20.0);
  CHECK(e.a2 == Approx(40.0));
  CHECK(e.AO == Approx(0.75));
  CHECK(e.v1 == Approx(greenshields(kRef.V1, 0.75, kRef.AObar1, kRef.gamma1)).epsilon(1e-14));
  CHECK(e.v2 == Approx(greenshields(kRef.V2, 0.75, kRef.AObar2, kRef.gamma2)).epsilon(1e-14));
  CHECK(rel(units::to_kmh(e.v1), 29.16) < 0.015);
  CHECK(rel(units::to_kmh(e.v2), 13.32) < 0.015);
  CHECK(e.q1 == Approx(e.v1 * kRef.rho1_star));
  CHECK(e.q2 == Approx(e.v2 * kRef.rho2_star));

  SECTION("empty road") {
    auto p = kRef;
    p.rho1_star = p.rho2_star = 0.0;
    const auto z = equilibrium(p, 20.0);
    CHECK(z.v1 == p.V1);
    CHECK(z.v2 == p.V2);
    CHECK(z.q1 == 0.0);
    CHECK(z.q2 == 0.0);
  }
  SECTION("spacing at AV jam occupancy") {
    const double a2 = (kRef.AObar2 * kRef.W - kRef.a1 * kRef.rho1_star) / kRef.rho2_star;
    const double s2 = a2 / kRef.d - kRef.l;
    const auto j = equilibrium(kRef, s2);
    CHECK(j.v2 == Approx(0.0).margin(1e-12));
    CHECK(j.q2 == Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("beta coefficients match finite differences") {
  for (double s2 : SpacingModeSet::reference().states) {
    const Mat2 b = beta_coefficients(kRef, s2);
    const double a2 = kRef.impact_area(s2);
    const double h = 1e-6;
    for (int n = 0; n < 2; ++n) {
      double rp1 = kRef.rho1_star, rp2 = kRef.rho2_star, rm1 = rp1, rm2 = rp2;
      (n == 0 ? rp1 : rp2) += h;
      (n == 0 ? rm1 : rm2) -= h;
      const double AOp = (kRef.a1 * rp1 + a2 * rp2) / kRef.W;
      const double AOm = (kRef.a1 * rm1 + a2 * rm2) / kRef.W;
      const double d1 = -(greenshields(kRef.V1, AOp, kRef.AObar1, kRef.gamma1) -
                          greenshields(kRef.V1, AOm, kRef.AObar1, kRef.gamma1)) / (2 * h);
      const double d2 = -(greenshields(kRef.V2, AOp, kRef.AObar2, kRef.gamma2) -
                          greenshields(kRef.V2, AOm, kRef.AObar2, kRef.gamma2)) / (2 * h);
      CHECK(rel(b(0, n), d1) < 1e-6);
      CHECK(rel(b(1, n), d2) < 1e-6);
    }
    CHECK((b.array() > 0.0).all());
  }
  SECTION("single class ratio and width scaling") {
    auto p = kRef;
    p.rho2_star = 0.0;
    const Mat2 b = beta_coefficients(p, 20.0);
    CHECK(b(0, 1) / b(0, 0) == Approx(p.impact_area(20.0) / p.a1).epsilon(1e-14));
    auto w = kRef;
    w.W *= 2.0;
    w.rho1_star *= 2.0;  // keep AO fixed so only the explicit 1/W factor acts
    w.rho2_star *= 2.0;
    const Mat2 b1 = beta_coefficients(kRef, 20.0);
    const Mat2 b2 = beta_coefficients(w, 20.0);
    CHECK((b2 - 0.5 * b1).norm() < 1e-14 * b1.norm());
  }
}

TEST_CASE("Jacobians and characteristic speeds") {
  for (double s2 : SpacingModeSet::reference().states) {
    const auto m = linearize(kRef, s2);
    CHECK(m.Jsource.row(0).isZero());
    CHECK(m.Jsource.row(2).isZero());
    CHECK((m.Jsource * Vec4::Zero()).isZero());

    Eigen::EigenSolver<Mat4> es(m.Jlambda);
    std::vector<double> numeric;
    for (int k = 0; k < 4; ++k) {
      CHECK(std::abs(es.eigenvalues()(k).imag()) < 1e-12);
      numeric.push_back(es.eigenvalues()(k).real());
    }
    std::vector<double> closed(m.lambda.begin(), m.lambda.end());
    std::sort(numeric.begin(), numeric.end());
    std::sort(closed.begin(), closed.end());
    const double scale = std::max(std::abs(closed.front()), std::abs(closed.back()));
    for (int k = 0; k < 4; ++k) CHECK(std::abs(numeric[k] - closed[k]) < 1e-8 * scale);

    CHECK(m.Jlambda.trace() == Approx(m.lambda[0] + m.lambda[1] + m.lambda[2] + m.lambda[3]).epsilon(1e-9));
    CHECK(m.lambda[0] == m.eq.v1);
    CHECK(m.lambda[1] == m.eq.v2);
    // lambda4 <= min(l1, l2) <= lambda3 <= max(l1, l2)
    CHECK(m.lambda[3] <= std::min(m.lambda[0], m.lambda[1]));
    CHECK(std::min(m.lambda[0], m.lambda[1]) <= m.lambda[2]);
    CHECK(m.lambda[2] <= std::max(m.lambda[0], m.lambda[1]));
    CHECK(m.regime == Regime::kCongested);
  }
}

TEST_CASE("decoupled classes") {
  // Zero cross sensitivities: feed the closed form directly.
  auto e = equilibrium(kRef, 20.0);
  Mat2 beta;
  beta << 3.0, 0.0, 0.0, 2.0;
  const auto cs = characteristic_speeds(kRef, e, beta);
  std::vector<double> got{cs.lambda[2], cs.lambda[3]};
  std::vector<double> want{e.v1 - 3.0 * kRef.rho1_star, e.v2 - 2.0 * kRef.rho2_star};
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  CHECK(got[0] == Approx(want[0]).epsilon(1e-12));
  CHECK(got[1] == Approx(want[1]).epsilon(1e-12));

  Mat2 bad;
  bad << 3.0, 1.0, -5000.0, 2.0;  // 4 b12 b21 rho1 rho2 dominates the square
  CHECK_THROWS_AS(characteristic_speeds(kRef, e, bad), ModelError);
}

TEST_CASE("regime classification") {
  CHECK(classify_regime({1, 2, 1.5, -0.5}) == Regime::kCongested);
  CHECK(classify_regime({1, 2, 1.5, 0.5}) == Regime::kFreeFlow);
  CHECK(classify_regime({1, 2, 1.5, 0.0}) == Regime::kInvalid);
  CHECK(classify_regime({1, 2, -0.1, -0.5}) == Regime::kInvalid);
  auto p = kRef;
  p.rho1_star = p.rho2_star = 0.0;
  CHECK(linearize(p, 20.0).regime == Regime::kFreeFlow);
  CHECK_FALSE(linearize(p, 20.0).has_riemann);
}

TEST_CASE("diagonalization") {
  const auto m = linearize(kRef, 20.0);
  const Mat4 D = m.Vinv * m.Jlambda * m.Vbasis;
  const double lmax = m.max_abs_speed();
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (i != j) CHECK(std::abs(D(i, j)) < 1e-9 * lmax);
    }
    CHECK(D(i, i) == Approx(m.lambda[i]).epsilon(1e-9));
    // Largest-magnitude entry of each column is +1.
    Eigen::Index arg;
    m.Vbasis.col(i).cwiseAbs().maxCoeff(&arg);
    CHECK(m.Vbasis(arg, i) == 1.0);
  }

  SECTION("similarity oracle for Jhat") {
    // Eigenvectors from a general-purpose solver, matched to lambda by value.
    // The diagonal of V^-1 J V does not depend on the column scaling.
    Eigen::EigenSolver<Mat4> es(m.Jlambda);
    Mat4 W;
    for (int k = 0; k < 4; ++k) {
      int best = 0;
      for (int c = 1; c < 4; ++c) {
        if (std::abs(es.eigenvalues()(c).real() - m.lambda[k]) < std::abs(es.eigenvalues()(best).real() - m.lambda[k])) best = c;
      }
      W.col(k) = es.eigenvectors().col(best).real();
    }
    const Mat4 oracle = W.fullPivLu().solve(m.Jsource * W);
    // Round-off floor grows with the conditioning of the eigenbasis.
    Eigen::JacobiSVD<Mat4> svd(W);
    const double cond = svd.singularValues()(0) / svd.singularValues()(3);
    const double floor = 1e-14 * cond * m.Jsource.norm();
    for (int k = 0; k < 4; ++k) {
      CHECK(std::abs(m.Jhat(k, k) - oracle(k, k)) <= 1e-8 * std::abs(oracle(k, k)) + floor);
    }
  }
  SECTION("scaling Jlambda keeps the basis") {
    std::array<double, 4> l2{};
    for (int k = 0; k < 4; ++k) l2[k] = 2.0 * m.lambda[k];
    const auto d2 = diagonalize(2.0 * m.Jlambda, m.Jsource, l2);
    CHECK((d2.basis - m.Vbasis).norm() < 1e-9);
  }
  SECTION("degenerate speeds rejected") {
    const std::array<double, 4> dup{1.0, 1.0, 2.0, -1.0};
    CHECK_THROWS_AS(diagonalize(Mat4::Identity(), Mat4::Zero(), dup), ModelError);
  }
}

TEST_CASE("Riemann transform") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ux(0.0, kRef.L), uz(-1.0, 1.0);
  for (double s2 : SpacingModeSet::reference().states) {
    const auto m = linearize(kRef, s2);
    const auto t0 = riemann_transform_at(m, 0.0);
    for (int k = 0; k < 4; ++k) CHECK((t0.T.row(k) - m.Vinv.row(kRiemannOrder[k])).norm() < 1e-14);
    for (int r = 0; r < 10; ++r) {
      const double x = ux(rng);
      const auto rt = riemann_transform_at(m, x);
      CHECK((rt.T * rt.Tinv - Mat4::Identity()).norm() < 1e-9);
      const Vec4 z(uz(rng), uz(rng), uz(rng), uz(rng));
      CHECK((rt.Tinv * (rt.T * z) - z).norm() < 1e-9 * z.norm());
      const Mat4 lam = rt.T * m.Jlambda * rt.Tinv;
      const Mat4 want = m.speeds.asDiagonal();
      CHECK((lam - want).norm() < 1e-8 * m.max_abs_speed());
    }
    const auto nb = transform_norm_bounds(m, {0.0, 250.0, 500.0, 750.0, 1000.0});
    CHECK(std::isfinite(nb.lower));
    CHECK(nb.lower > 0.0);
    CHECK(std::isfinite(nb.upper));
    CHECK(nb.upper >= nb.lower);
  }
}

TEST_CASE("coupling matrices of the w-system") {
  const auto m = linearize(kRef, 20.0);
  for (int s = 0; s <= 20; ++s) {
    const double x = kRef.L * s / 20.0;
    const auto blocks = sigma_matrices(m, x);
    CHECK(blocks.full.diagonal().isZero(0.0));
    // Finite-difference oracle: M = T J Tinv - T Jlambda dTinv/dx.
    const double h = 1e-6 * kRef.L;
    const auto rt = riemann_transform_at(m, x);
    // The transform is analytic in x, so the stencil may straddle the ends.
    const Mat4 dTinv = (riemann_transform_at(m, x + h).Tinv - riemann_transform_at(m, x - h).Tinv) / (2 * h);
    const Mat4 M = rt.T * m.Jsource * rt.Tinv - rt.T * m.Jlambda * dTinv;
    CHECK(M.diagonal().cwiseAbs().maxCoeff() <= 1e-8 * M.norm() + 1e-18);
    Mat4 off = M;
    off.diagonal().setZero();
    CHECK((off - blocks.full).norm() <= 1e-5 * off.norm() + 1e-18);
    CHECK((blocks.pp - blocks.full.topLeftCorner<3, 3>()).isZero());
    CHECK((blocks.pm - blocks.full.topRightCorner<3, 1>()).isZero());
    CHECK((blocks.mp - blocks.full.bottomLeftCorner<1, 3>()).isZero());
  }

  SECTION("no source gives no coupling") {
    SigmaField zero;
    zero.coupling.setZero();
    zero.decay.setZero();
    CHECK(zero.full(123.0).isZero());
  }
}

TEST_CASE("boundary maps reproduce the physical boundary conditions") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double s2 : SpacingModeSet::reference().states) {
    const auto m = linearize(kRef, s2);
    const auto bm = boundary_maps(m);
    CHECK(std::isfinite(bm.kappa(3)));
    CHECK(bm.kappa(3) != 0.0);
    const auto row = flux_row(m);
    for (int r = 0; r < 5; ++r) {
      const double b0 = u(rng);
      Vec4 w0;
      w0 << bm.Q * b0, b0;
      const Vec4 z0 = riemann_transform_at(m, 0.0).Tinv * w0;
      const double scale = w0.norm() * m.Vbasis.norm();
      CHECK(std::abs(z0(0)) < 1e-8 * scale);
      CHECK(std::abs(z0(2)) < 1e-8 * scale);
      CHECK(std::abs(row.dot(z0)) < 1e-8 * scale * row.norm());

      const Vec3 wp(u(rng), u(rng), u(rng));
      Vec4 wL;
      wL << wp, bm.R.dot(wp);
      const Vec4 zL = riemann_transform_at(m, kRef.L).Tinv * wL;
      CHECK(std::abs(row.dot(zL)) < 1e-8 * row.norm() * std::max(1.0, zL.norm()));
    }
  }
}

TEST_CASE("parameter validation") {
  auto p = kRef;
  p.AObar1 = 1.2;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = kRef;
  p.gamma2 = 0.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = kRef;
  p.W = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK_NOTHROW(kRef.validate());
  CHECK(kRef.a1 == kRef.impact_area(kRef.s1));

  SpacingModeSet ms{{18, 19.6, 20, 20.4, 22}, 20, 18, 22};
  CHECK_NOTHROW(ms.validate());
  ms.states = {18, 20, 19.6};
  CHECK_THROWS_AS(ms.validate(), ConfigError);
  ms = SpacingModeSet::reference();
  ms.nominal = 22;
  CHECK_THROWS_AS(ms.validate(), ConfigError);
}

TEST_CASE("unit parsing") {
  CHECK(units::parse_quantity("80 km/h", units::Dimension::kSpeed, "V1") == Approx(80.0 / 3.6));
  CHECK(units::parse_quantity("150 veh/km", units::Dimension::kDensity, "rho") == Approx(0.15));
  CHECK(units::parse_quantity("1 min", units::Dimension::kTime, "t") == 60.0);
  CHECK(units::parse_quantity(" 42 ", units::Dimension::kLength, "L") == 42.0);
  CHECK_THROWS_AS(units::parse_quantity("80 km/h", units::Dimension::kLength, "L"), ConfigError);
  CHECK_THROWS_AS(units::parse_quantity("80 furlong", units::Dimension::kLength, "L"), ConfigError);
  CHECK_THROWS_AS(units::parse_quantity("fast", units::Dimension::kSpeed, "V1"), ConfigError);
}
