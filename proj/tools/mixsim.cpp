// mixsim: batch front end for the mixed-traffic boundary control experiments.
//
//   mixsim <equilibrium|kernels|simulate|montecarlo|markov> --config PATH [--out DIR] [--seed N] [flags]
//
// Exit codes: 0 success, 1 configuration error, 2 model validity error,
// 3 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "mixsim/analysis.hpp"
#include "mixsim/backstepping.hpp"
#include "mixsim/config.hpp"
#include "mixsim/io.hpp"
#include "mixsim/markov.hpp"
#include "mixsim/simulation.hpp"
#include "mixsim/traffic_model.hpp"
#include "mixsim/units.hpp"

namespace fs = std::filesystem;
using namespace mixsim;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Common {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
};

fs::path prepare_out(const std::string& dir) {
  fs::path p(dir);
  fs::create_directories(p);
  return p;
}

void finish(const Common& c, const std::string& command, std::uint64_t seed,
            std::chrono::steady_clock::time_point start) {
  io::RunManifest m;
  m.config_path = c.config;
  m.command = command;
  m.seed = seed;
  m.output_dir = c.out;
  m.tool_version = kVersion;
  m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  io::write_manifest(c.out, m);
}

std::string g(double v) { return io::fmt(v); }

int cmd_equilibrium(const Common& c, bool require_congested) {
  const auto start = std::chrono::steady_clock::now();
  const auto rc = load_config(c.config);
  const auto& sc = rc.scenario;
  bool all_congested = true;
  std::printf("%8s %8s %8s %10s %10s %10s %10s %10s %10s  %s\n", "s2[m]", "a2[m2]", "AO", "v1*[km/h]", "v2*[km/h]",
              "lam1", "lam2", "lam3", "lam4", "regime");
  const auto out = prepare_out(c.out);
  io::CsvWriter csv(out / "equilibrium.csv",
                    {"mode_s2", "a2", "AO", "v1", "v2", "lambda1", "lambda2", "lambda3", "lambda4", "congested"});
  for (double s2 : sc.chain.modes.states) {
    const auto m = linearize(sc.params, s2);
    const bool congested = m.regime == Regime::kCongested;
    all_congested = all_congested && congested;
    std::printf("%8.3f %8.3f %8.5f %10.4f %10.4f %10.4f %10.4f %10.4f %10.4f  %s\n", s2, m.eq.a2, m.eq.AO,
                units::to_kmh(m.eq.v1), units::to_kmh(m.eq.v2), m.lambda[0], m.lambda[1], m.lambda[2], m.lambda[3],
                regime_name(m.regime));
    csv.row({s2, m.eq.a2, m.eq.AO, m.eq.v1, m.eq.v2, m.lambda[0], m.lambda[1], m.lambda[2], m.lambda[3],
             congested ? 1.0 : 0.0});
  }
  finish(c, "equilibrium", sc.seed, start);
  if (require_congested && !all_congested) {
    std::fprintf(stderr, "error: at least one mode is not in the congested regime\n");
    return static_cast<int>(ExitCode::kModel);
  }
  return 0;
}

int cmd_kernels(const Common& c, std::optional<int> n_opt, std::optional<double> tol_opt, std::optional<int> iter_opt) {
  const auto start = std::chrono::steady_clock::now();
  const auto rc = load_config(c.config);
  const auto& sc = rc.scenario;
  KernelSettings ks = sc.kernels;
  if (n_opt) ks.n = *n_opt;
  if (tol_opt) ks.tol = *tol_opt;
  if (iter_opt) ks.max_iter = *iter_opt;
  if (ks.n < 16) throw ConfigError("--n must be >= 16");

  std::optional<ModeLinearization> nominal;
  KernelProblem pb;
  if (rc.synthetic_kernels) {
    pb = *rc.synthetic_kernels;
  } else {
    nominal = linearize(sc.params, sc.chain.modes.nominal);
    pb = KernelProblem::from_mode(*nominal);
  }
  const auto grid = solve_kernels(pb, ks.n, ks.tol, ks.max_iter);
  const auto res = kernel_residual(grid, pb);

  const auto out = prepare_out(c.out);
  {
    io::CsvWriter csv(out / "kernels.csv", {"x", "xi", "k1", "k2", "k3", "n_kernel"});
    for (int i = 0; i <= grid.n; ++i) {
      for (int j = 0; j <= i; ++j) {
        const auto& k = grid.k(i, j);
        csv.row({i * grid.h, j * grid.h, k(0), k(1), k(2), grid.nk(i, j)});
      }
    }
  }
  std::ostringstream rep;
  rep << "n " << grid.n << "\niterations " << grid.iterations << "\nlast_change " << g(grid.residual)
      << "\npde_K " << g(res.pde_K) << "\npde_N " << g(res.pde_N) << "\nbc_diag " << g(res.bc_diag)
      << "\nbc_base " << g(res.bc_base) << "\n";
  if (nominal) {
    io::CsvWriter csv(out / "perturbation_terms.csv", {"mode_s2", "f1", "f2", "f3", "f4"});
    std::vector<FTermNorms> norms;
    for (double s2 : sc.chain.modes.states) {
      const auto m = linearize(sc.params, s2);
      require_riemann(m, "kernels");
      norms.push_back(f_term_norms(grid, m));
      const auto& f = norms.back();
      csv.row({f.s2, f.f1, f.f2, f.f3, f.f4});
    }
    const double floor = f_term_norms(grid, *nominal).max();
    const auto fit = fit_linear_bound(norms, sc.chain.modes.nominal, floor);
    rep << "f_floor " << g(fit.floor) << "\nM0_ls " << g(fit.slope_ls) << "\nM0_r2 " << g(fit.r_squared)
        << "\nM0_envelope " << g(fit.m0_envelope) << "\n";
    const auto ctl = build_controller(*nominal, grid, sc.n_cells);
    rep << "controller_cells " << ctl.n_cells << "\nu_scale " << g(ctl.u_scale) << "\nR0 " << g(ctl.R0(0)) << ' '
        << g(ctl.R0(1)) << ' ' << g(ctl.R0(2)) << "\n";
  }
  io::write_text(out / "kernel_report.txt", rep.str());
  std::cout << rep.str();
  finish(c, "kernels", sc.seed, start);
  return 0;
}

int cmd_simulate(const Common& c, const std::string& loop, const std::string& pin_path, bool nominal,
                 std::optional<double> horizon) {
  const auto start = std::chrono::steady_clock::now();
  auto rc = load_config(c.config);
  auto& sc = rc.scenario;
  if (c.seed) sc.seed = *c.seed;
  if (!loop.empty()) sc.loop = loop == "open" ? LoopMode::kOpen : LoopMode::kClosed;
  if (horizon) sc.horizon = *horizon;
  if (nominal) sc.nominal_only = true;
  if (!pin_path.empty()) sc.pinned_path = load_mode_path_csv(pin_path, sc.horizon);

  const Simulator sim(sc);
  LyapunovConfig lcfg;
  bool certified = true;
  if (rc.analysis.lyapunov) {
    lcfg = *rc.analysis.lyapunov;
  } else {
    const auto sel = select_lyapunov_params(sc);
    lcfg = sel.cfg;
    certified = sel.certified;
  }
  const LyapunovEvaluator lyap(sim, lcfg);
  const Trace tr = sim.run(sim.path_for(sc.seed), initial_condition(sc), lyap.hook());

  const auto out = prepare_out(c.out);
  {
    io::CsvWriter csv(out / "trace.csv", {"t", "l2_norm", "control_U", "mode_index", "lyapunov_V"});
    for (std::size_t k = 0; k < tr.size(); ++k) {
      csv.row({tr.t[k], tr.l2[k], tr.U[k], static_cast<double>(tr.mode_index[k]), tr.lyapunov[k]});
    }
  }
  {
    io::CsvWriter csv(out / "snapshots.csv", {"t", "x", "rho1_dev", "v1_dev", "rho2_dev", "v2_dev"});
    for (const auto& s : tr.snapshots) {
      for (std::size_t cidx = 0; cidx < s.z.size(); ++cidx) {
        const auto& z = s.z[cidx];
        csv.row({s.t, tr.x[cidx], z(0), z(1), z(2), z(3)});
      }
    }
  }
  std::ostringstream sum;
  sum << "loop " << loop_name(sc.loop) << "\nseed " << sc.seed << "\nn_cells " << sc.n_cells << "\ndt " << g(tr.dt)
      << "\nsteps " << tr.size() - 1 << "\nl2_initial " << g(tr.l2.front()) << "\nl2_final " << g(tr.l2.back())
      << "\nl2_ratio " << g(tr.l2.front() > 0 ? tr.l2.back() / tr.l2.front() : 0.0) << "\nlyapunov_nu "
      << g(lcfg.nu) << "\nlyapunov_a " << g(lcfg.a) << "\nlyapunov_certified " << (certified ? 1 : 0) << "\n";
  io::write_text(out / "summary.txt", sum.str());
  std::cout << sum.str();
  finish(c, "simulate", sc.seed, start);
  return 0;
}

int cmd_montecarlo(const Common& c, std::optional<int> n_opt, const std::string& loop) {
  const auto start = std::chrono::steady_clock::now();
  auto rc = load_config(c.config);
  auto& sc = rc.scenario;
  if (c.seed) sc.seed = *c.seed;
  if (!loop.empty()) sc.loop = loop == "open" ? LoopMode::kOpen : LoopMode::kClosed;
  const int n = n_opt.value_or(rc.analysis.n_realizations);
  if (n < 1) throw ConfigError("--n must be >= 1");
  const Simulator sim(sc);
  const auto ens = mean_square_ensemble(sim, n, sc.seed, rc.analysis.fit_window);

  const auto out = prepare_out(c.out);
  {
    io::CsvWriter csv(out / "ensemble.csv", {"t", "mean_sq", "stderr"});
    for (std::size_t k = 0; k < ens.t.size(); ++k) csv.row({ens.t[k], ens.mean_sq[k], ens.stderr_[k]});
  }
  std::ostringstream sum;
  sum << "n_realizations " << ens.n_realizations << "\nbase_seed " << ens.base_seed << "\nfit_window " << g(ens.window_a)
      << " " << g(ens.window_b) << "\n";
  if (ens.zeta) {
    sum << "zeta " << g(*ens.zeta) << "\nvarsigma " << g(*ens.varsigma) << "\nprefactor " << g(*ens.prefactor)
        << "\nr_squared " << g(ens.r_squared) << "\n";
  } else {
    sum << "zeta undefined\n";
  }
  if (!ens.mean_sq.empty()) {
    sum << "mean_sq_initial " << g(ens.mean_sq.front()) << "\nmean_sq_final " << g(ens.mean_sq.back()) << "\n";
  }
  io::write_text(out / "ensemble_summary.txt", sum.str());
  std::cout << sum.str();
  finish(c, "montecarlo", sc.seed, start);
  return 0;
}

int cmd_markov(const Common& c, std::optional<double> horizon_opt, std::optional<double> dt_opt) {
  const auto start = std::chrono::steady_clock::now();
  const auto rc = load_config(c.config);
  const auto& chain = rc.scenario.chain;
  const double horizon = horizon_opt.value_or(rc.scenario.horizon);
  const double tau = chain.tau_star();
  const double dt = dt_opt ? *dt_opt : rc.markov.dt.value_or(tau > 0.0 ? 0.1 / tau : 0.01);
  const auto trace = kolmogorov_forward(chain, horizon, dt, rc.markov.record_every);

  const auto out = prepare_out(c.out);
  std::vector<std::string> header{"t"};
  for (int k = 1; k <= chain.size(); ++k) header.push_back("p_" + std::to_string(k));
  io::CsvWriter csv(out / "probability.csv", header);
  double worst_row = 0.0;
  for (std::size_t k = 0; k < trace.t.size(); ++k) {
    const Eigen::VectorXd p = (chain.initial_distribution.transpose() * trace.P[k]).transpose();
    std::vector<double> row{trace.t[k]};
    for (int i = 0; i < p.size(); ++i) row.push_back(p(i));
    csv.row(row);
    worst_row = std::max(worst_row, (trace.P[k].rowwise().sum().array() - 1.0).abs().maxCoeff());
  }
  std::ostringstream sum;
  sum << "horizon " << g(horizon) << "\ndt " << g(dt) << "\nmax_row_sum_error " << g(worst_row) << "\n";
  io::write_text(out / "markov_summary.txt", sum.str());
  std::cout << sum.str();
  finish(c, "markov", rc.scenario.seed, start);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Markov-switching mixed-traffic boundary control experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON configuration file")->required();
    sub->add_option("--out", common.out, "output directory (created if absent)");
    sub->add_option("--seed", common.seed, "base random seed (overrides sim.seed)");
  };

  auto* eq = app.add_subcommand("equilibrium", "equilibria, characteristic speeds and regime per mode");
  add_common(eq);
  bool require_congested = false;
  eq->add_flag("--require-congested", require_congested, "exit 2 unless every mode is congested");

  auto* kern = app.add_subcommand("kernels", "solve the nominal backstepping kernels");
  add_common(kern);
  std::optional<int> kn, kiter;
  std::optional<double> ktol;
  kern->add_option("--n", kn, "triangle grid resolution");
  kern->add_option("--tol", ktol, "successive approximation tolerance");
  kern->add_option("--max-iter", kiter, "maximum number of sweeps");

  auto* sim = app.add_subcommand("simulate", "single open- or closed-loop run");
  add_common(sim);
  std::string loop, pin_path;
  bool nominal = false;
  std::optional<double> sim_horizon;
  sim->add_option("--loop", loop, "open or closed")->check(CLI::IsMember({"open", "closed"}));
  sim->add_option("--pin-path", pin_path, "CSV of t,mode_index rows fixing the mode path");
  sim->add_flag("--nominal", nominal, "freeze the plant at the nominal spacing");
  sim->add_option("--horizon", sim_horizon, "simulated time (s)");

  auto* mc = app.add_subcommand("montecarlo", "mean-square ensemble of stochastic closed-loop runs");
  add_common(mc);
  std::optional<int> mc_n;
  std::string mc_loop;
  mc->add_option("--n", mc_n, "number of realizations");
  mc->add_option("--loop", mc_loop, "open or closed")->check(CLI::IsMember({"open", "closed"}));

  auto* mk = app.add_subcommand("markov", "Kolmogorov forward probabilities of the spacing chain");
  add_common(mk);
  std::optional<double> mk_horizon, mk_dt;
  mk->add_option("--horizon", mk_horizon, "time horizon (s)");
  mk->add_option("--dt", mk_dt, "integration step (s), at most 0.1/tau*");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*eq) return cmd_equilibrium(common, require_congested);
    if (*kern) return cmd_kernels(common, kn, ktol, kiter);
    if (*sim) return cmd_simulate(common, loop, pin_path, nominal, sim_horizon);
    if (*mc) return cmd_montecarlo(common, mc_n, mc_loop);
    if (*mk) return cmd_markov(common, mk_horizon, mk_dt);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return static_cast<int>(ExitCode::kConfig);
  } catch (const ModelError& e) {
    std::fprintf(stderr, "model error: %s\n", e.what());
    return static_cast<int>(ExitCode::kModel);
  } catch (const std::domain_error& e) {
    std::fprintf(stderr, "model error: %s\n", e.what());
    return static_cast<int>(ExitCode::kModel);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return static_cast<int>(ExitCode::kNumerical);
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return static_cast<int>(ExitCode::kConfig);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(ExitCode::kNumerical);
  }
  return 0;
}
