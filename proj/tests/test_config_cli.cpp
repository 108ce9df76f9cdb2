#include <catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "mixsim/config.hpp"

using namespace mixsim;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

const std::string kConfigDir = MIXSIM_CONFIG_DIR;
const std::string kCli = MIXSIM_CLI_PATH;

std::string config(const std::string& name) { return kConfigDir + "/" + name; }

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mixsim_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

/// Runs the CLI with stdout/stderr discarded; returns the exit status.
int cli(const std::string& args) {
  const std::string cmd = "'" + kCli + "' " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::vector<std::vector<double>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);  // header
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

std::map<std::string, double> read_report(const fs::path& p) {
  std::ifstream in(p);
  std::map<std::string, double> kv;
  std::string key;
  double v = 0.0;
  while (in >> key >> v) kv[key] = v;
  return kv;
}

// Smallest valid document; callers splice extra sections in.
std::string minimal(const std::string& extra = "") {
  return R"({"traffic": {"V1": "80 km/h", "V2": "60 km/h", "iota1": "30 s", "iota2": "60 s",
    "gamma1": 2.5, "gamma2": 2.0, "AObar1": 0.9, "AObar2": 0.85, "a1": "10 m^2", "d": "2 m",
    "s1": "5 m", "rho1_star": "150 veh/km", "rho2_star": "75 veh/km", "L": "1 km", "W": "6 m"},
  "modes": {"states": ["18 m", "19.6 m", "20 m", "20.4 m", "22 m"], "nominal": "20 m"})" +
         extra + "}";
}

}  // namespace

TEST_CASE("configuration parsing") {
  SECTION("reference file") {
    const auto rc = load_config(config("mixed_traffic_baseline.json"));
    const auto& sc = rc.scenario;
    CHECK(sc.params.V1 == Approx(80.0 / 3.6));
    CHECK(sc.params.rho1_star == Approx(0.15));
    CHECK(sc.params.L == Approx(1000.0));
    CHECK(sc.chain.size() == 5);
    CHECK(sc.chain.modes.nominal == 20.0);
    CHECK(sc.n_cells == 100);
    CHECK(sc.horizon == Approx(400.0));
    CHECK(sc.loop == LoopMode::kClosed);
    CHECK(rc.analysis.n_realizations == 50);
    REQUIRE(rc.analysis.fit_window.has_value());
    CHECK(rc.analysis.fit_window->first == Approx(50.0));
    CHECK(rc.analysis.fit_window->second == Approx(300.0));
  }
  SECTION("defaults") {
    const auto rc = parse_config(minimal());
    CHECK(rc.scenario.n_cells == 100);
    CHECK(rc.scenario.cfl == 0.9);
    CHECK(rc.scenario.ic.amplitude == Vec4::Constant(0.1));
    CHECK(rc.scenario.chain.initial_distribution.sum() == Approx(1.0));
    CHECK_FALSE(rc.synthetic_kernels.has_value());
  }
  SECTION("plain numbers are SI") {
    const auto rc = parse_config(minimal(R"(, "sim": {"horizon": 12.5, "n_cells": 64})"));
    CHECK(rc.scenario.horizon == 12.5);
    CHECK(rc.scenario.n_cells == 64);
  }
  SECTION("errors") {
    CHECK_THROWS_AS(parse_config(minimal(R"(, "sim": {"horizon": "10 kg"})")), ConfigError);
    CHECK_THROWS_AS(parse_config(minimal(R"(, "sim": {"n_cells": 8})")), ConfigError);
    CHECK_THROWS_AS(parse_config(minimal(R"(, "kernels": {"n": 8})")), ConfigError);
    CHECK_THROWS_AS(parse_config(minimal(R"(, "ic": {"amplitudes": [0.1, 0.1, 0.6, 0.1]})")), ConfigError);
    try {
      (void)parse_config(minimal(R"(, "sim": {"horizn": 10})"));
      FAIL("unknown key accepted");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("horizn") != std::string::npos);
    }
    try {
      (void)parse_config("{\n  \"traffic\": {\n    \"V1\": ,\n", "broken.json");
      FAIL("malformed JSON accepted");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("broken.json") != std::string::npos);
      CHECK(msg.find("line 3") != std::string::npos);
    }
    CHECK_THROWS_AS(load_config("/nonexistent/mixsim.json"), ConfigError);
  }
  SECTION("pinned mode path") {
    const auto dir = scratch("path");
    spit(dir / "path.csv", "t,mode_index\n0,2\n12.5,4\n30,0\n");
    const auto p = load_mode_path_csv((dir / "path.csv").string(), 100.0);
    CHECK(p.jump_times == std::vector<double>{0.0, 12.5, 30.0});
    CHECK(p.mode_indices == std::vector<int>{2, 4, 0});
    CHECK(p.horizon == 100.0);
    spit(dir / "bad.csv", "0,2\n5,x\n");
    CHECK_THROWS_AS(load_mode_path_csv((dir / "bad.csv").string(), 100.0), ConfigError);
  }
}

TEST_CASE("cli exit codes") {
  const auto dir = scratch("codes");
  CHECK(cli("equilibrium --config " + config("mixed_traffic_baseline.json") + " --out " + (dir / "eq").string() +
            " --require-congested") == 0);
  CHECK(read_csv(dir / "eq" / "equilibrium.csv").size() == 5);
  CHECK(fs::exists(dir / "eq" / "manifest.json"));
  CHECK(cli("equilibrium --config " + config("zero_density.json") + " --out " + (dir / "z").string() +
            " --require-congested") == 2);
  spit(dir / "bad.json", "{\"traffic\": {");
  CHECK(cli("equilibrium --config " + (dir / "bad.json").string() + " --out " + (dir / "b").string()) == 1);
  CHECK(cli("equilibrium --config " + (dir / "missing.json").string()) == 1);
  CHECK(cli("simulate --config " + config("two_state.json") + " --loop sideways") == 1);
  CHECK(cli("kernels --config " + config("mixed_traffic_baseline.json") + " --n 8 --out " + (dir / "k").string()) == 1);
}

TEST_CASE("cli kernels") {
  const auto dir = scratch("kernels");
  const auto base = config("mixed_traffic_baseline.json");
  REQUIRE(cli("kernels --config " + base + " --n 16 --out " + (dir / "n16").string()) == 0);
  REQUIRE(cli("kernels --config " + base + " --n 32 --out " + (dir / "n32").string()) == 0);
  const auto a = read_report(dir / "n16" / "kernel_report.txt");
  const auto b = read_report(dir / "n32" / "kernel_report.txt");
  CHECK(a.at("pde_K") / b.at("pde_K") >= 1.5);
  CHECK(a.at("bc_base") / b.at("bc_base") >= 1.5);
  CHECK(b.at("bc_diag") < 1e-10);
  CHECK(read_csv(dir / "n32" / "kernels.csv").size() == 33 * 34 / 2);
  CHECK(fs::exists(dir / "n32" / "perturbation_terms.csv"));

  REQUIRE(cli("kernels --config " + config("zero_coupling.json") + " --out " + (dir / "zero").string()) == 0);
  for (const auto& row : read_csv(dir / "zero" / "kernels.csv")) {
    for (std::size_t k = 2; k < row.size(); ++k) CHECK(row[k] == 0.0);
  }
}

TEST_CASE("cli markov") {
  const auto dir = scratch("markov");
  REQUIRE(cli("markov --config " + config("mixed_traffic_baseline.json") + " --out " + (dir / "ref").string()) == 0);
  const auto ref = read_csv(dir / "ref" / "probability.csv");
  REQUIRE(ref.size() > 2);
  for (const auto& row : ref) {
    double sum = 0.0;
    for (std::size_t k = 1; k < row.size(); ++k) sum += row[k];
    CHECK(sum == Approx(1.0).margin(1e-8));
  }
  CHECK(ref.back()[0] == Approx(400.0));

  REQUIRE(cli("markov --config " + config("two_state.json") + " --out " + (dir / "two").string()) == 0);
  const double a = 0.3, b = 0.7;
  for (const auto& row : read_csv(dir / "two" / "probability.csv")) {
    const double p1 = b / (a + b) + (0.5 - b / (a + b)) * std::exp(-(a + b) * row[0]);
    CHECK(std::abs(row[1] - p1) < 1e-6);
  }
}

TEST_CASE("cli simulate and montecarlo") {
  const auto dir = scratch("sim");
  const auto base = config("mixed_traffic_baseline.json");

  SECTION("a single-segment pinned path reproduces the nominal run") {
    spit(dir / "path.csv", "t,mode_index\n0,2\n");
    REQUIRE(cli("simulate --config " + base + " --horizon 30 --nominal --out " + (dir / "nom").string()) == 0);
    REQUIRE(cli("simulate --config " + base + " --horizon 30 --pin-path " + (dir / "path.csv").string() + " --out " +
                (dir / "pin").string()) == 0);
    CHECK(slurp(dir / "nom" / "trace.csv") == slurp(dir / "pin" / "trace.csv"));
    CHECK(slurp(dir / "nom" / "snapshots.csv") == slurp(dir / "pin" / "snapshots.csv"));
    const auto trace = read_csv(dir / "nom" / "trace.csv");
    REQUIRE(!trace.empty());
    CHECK(trace.front().size() == 5);
    for (const auto& row : trace) {
      CHECK(row[1] >= 0.0);
      CHECK(row[4] >= 0.0);
    }
  }
  SECTION("one realization has zero standard error") {
    REQUIRE(cli("montecarlo --config " + config("two_state.json") + " --n 1 --out " + (dir / "mc1").string()) == 0);
    for (const auto& row : read_csv(dir / "mc1" / "ensemble.csv")) CHECK(row[2] == 0.0);
  }
  SECTION("identical seed gives byte-identical output") {
    const auto two = config("two_state.json");
    for (const char* run : {"r1", "r2"}) {
      REQUIRE(cli("simulate --config " + two + " --seed 5 --out " + (dir / run / "sim").string()) == 0);
      REQUIRE(cli("montecarlo --config " + two + " --seed 5 --n 4 --out " + (dir / run / "mc").string()) == 0);
    }
    for (const char* f : {"sim/trace.csv", "sim/snapshots.csv", "mc/ensemble.csv"}) {
      const auto a = slurp(dir / "r1" / f);
      CHECK(!a.empty());
      CHECK(a == slurp(dir / "r2" / f));
    }
    REQUIRE(cli("simulate --config " + two + " --seed 6 --out " + (dir / "r3").string()) == 0);
    CHECK(slurp(dir / "r1" / "sim" / "trace.csv") != slurp(dir / "r3" / "trace.csv"));
  }
  SECTION("fit window beyond the horizon is a configuration error") {
    REQUIRE(cli("montecarlo --config " + base + " --n 1 --out " + (dir / "w").string() + " --seed 1") == 0);
    const auto short_cfg = dir / "short.json";
    std::string text = slurp(config("two_state.json"));
    const auto pos = text.find("\"15 s\"");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 6, "\"50 s\"");
    spit(short_cfg, text);
    CHECK(cli("montecarlo --config " + short_cfg.string() + " --n 1 --out " + (dir / "w2").string()) == 1);
  }
}
