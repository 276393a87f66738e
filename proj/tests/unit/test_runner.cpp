#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "sifg/binary_io.hpp"
#include "sifg/runner.hpp"

using namespace sifg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("sifg_runner_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string small_config(const fs::path& out, const std::string& seeds = "[1]", const std::string& extra = "") {
  return R"({
    // two well separated modes
    "name": "tiny",
    "target": {"kind": "gaussian_mixture", "weights": [0.5, 0.5],
               "means": [[-2, 0], [2, 0]], "stds": [0.5, 0.5]},
    "sampler": {"method": "sifg", "h": 0.01, "eta": 0.001, "outer_iterations": 20,
                "inner_iterations": 2, "sigma0": 0.1, "net": {"hidden": [8, 8]})" + extra + R"(},
    "particles": {"n": 64, "init": {"kind": "gaussian", "mean": 0, "var": 1}},
    "metrics": {"kl_every": 10, "moments_every": 5, "modes": true, "ground_truth_samples": 200},
    "output": {"dir": ")" + out.string() + R"(", "formats": ["csv", "samples"], "wall_clock": false},
    "seeds": )" + seeds + "}";
}

std::string error_of(const std::string& text) {
  try {
    runner::parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config round trip and echo") {
  const auto cfg = runner::parse_config(small_config("out"));
  CHECK(cfg.samplers.size() == 1);
  CHECK(cfg.samplers[0].name == "sifg");
  CHECK(cfg.samplers[0].config.h == 0.01);
  CHECK(cfg.n_particles == 64);
  CHECK(cfg.init.mean == Vector::Zero(2));
  const auto echo = runner::to_json(cfg);
  CHECK(runner::to_json(runner::parse_config(echo.dump())) == echo);
  CHECK(echo["samplers"]["sifg"].contains("lb"));
  CHECK(echo["samplers"]["sifg"].contains("optimizer"));
}

TEST_CASE("config errors name the field") {
  const fs::path out = "out";
  CHECK(error_of(small_config(out, "[1]", R"(, "lb": 0.01, "ub": 1.5)")).find("ub must be < 1") != std::string::npos);

  std::string no_h = small_config(out);
  no_h.replace(no_h.find("\"h\": 0.01,"), 10, "");
  CHECK(error_of(no_h).find("sampler.h") != std::string::npos);

  CHECK(error_of(small_config(out, "[1]", R"(, "step_size": 0.1)")).find("step_size") != std::string::npos);
  CHECK(error_of(small_config(out, "[]")).find("seeds") != std::string::npos);
  CHECK(error_of(small_config(out, "[1]", R"(, "h": -1)")) != "");
  CHECK(error_of("{ not json").find("JSON") != std::string::npos);
}

TEST_CASE("sampler-specific keys") {
  const std::string l2gf = R"({"name": "t", "target": {"kind": "monomial_gamma", "dim": 2},
    "sampler": {"method": "l2gf", "h": 0.001, "eta": 0.001, "outer_iterations": 3, "inner_iterations": 2,
                "particle_update": "adam"},
    "particles": {"n": 8, "init": {"kind": "gaussian", "mean": 0, "var": 1}},
    "output": {"dir": "x"}, "seeds": [1]})";
  const auto cfg = runner::parse_config(l2gf);
  CHECK(cfg.samplers[0].config.particle_update == flow::ParticleUpdate::adam);
  CHECK(runner::to_json(cfg)["samplers"]["l2gf"]["particle_update"] == "adam");
  std::string bad = l2gf;
  bad.replace(bad.find("\"adam\""), 6, "\"rk4\"");
  CHECK(error_of(bad).find("particle_update") != std::string::npos);

  // particle_update belongs to l2gf only; the oracle score trains no network
  CHECK(error_of(small_config("out", "[1]", R"(, "particle_update": "adam")")).find("particle_update") !=
        std::string::npos);
  const std::string oracle = R"({"name": "t", "target": {"kind": "analytic_gaussian", "mean": [0, 0], "var": 1},
    "sampler": {"method": "sifg", "h": 0.01, "outer_iterations": 3, "sigma0": 0.2, "score": "gaussian_oracle"},
    "particles": {"n": 8, "init": {"kind": "gaussian", "mean": 0, "var": 1}},
    "output": {"dir": "x"}, "seeds": [1]})";
  CHECK(error_of(oracle) == "");
  std::string with_eta = oracle;
  with_eta.replace(with_eta.find("\"sigma0\""), 8, "\"eta\": 0.1, \"sigma0\"");
  CHECK(error_of(with_eta).find("eta") != std::string::npos);
}

TEST_CASE("run_experiment fans out over seeds and lists every file") {
  const auto dir = scratch("fanout");
  const auto cfg = runner::parse_config(small_config(dir, "[1, 2, 3]"));
  const auto manifests = runner::run_experiment(cfg);
  REQUIRE(manifests.size() == 1);
  const auto m = runner::load_manifest(dir / "sifg" / "manifest.json");
  CHECK(m.runs.size() == 3);
  CHECK(!m.finished_at.empty());
  CHECK(m.code_version == runner::kCodeVersion);

  std::set<std::string> listed{"manifest.json"};
  for (const auto& r : m.runs) {
    CHECK(r.status == "ok");
    listed.insert(r.metrics_csv.string());
    listed.insert(r.samples.string());
    const Matrix s = io::read_samples(dir / "sifg" / r.samples);
    CHECK(s.rows() == 2);
    CHECK(s.cols() == 64);
  }
  std::set<std::string> present;
  for (const auto& e : fs::directory_iterator(dir / "sifg")) present.insert(e.path().filename().string());
  CHECK(present == listed);
  CHECK(present.size() == 7);
}

TEST_CASE("metrics csv schema and determinism") {
  const auto a = scratch("det_a");
  const auto b = scratch("det_b");
  runner::run_experiment(runner::parse_config(small_config(a)));
  runner::run_experiment(runner::parse_config(small_config(b)));
  const std::string csv = slurp(a / "sifg" / "metrics_1.csv");
  CHECK(csv == slurp(b / "sifg" / "metrics_1.csv"));
  CHECK(slurp(a / "sifg" / "samples_1.bin") == slurp(b / "sifg" / "samples_1.bin"));
  CHECK(csv.substr(0, csv.find('\n')) == "iteration,kl,amari,m2,m4,m5,grad_norm,sigma,coverage_1,coverage_2,wall_ms");

  const auto table = runner::read_metrics_csv(a / "sifg" / "metrics_1.csv");
  std::vector<double> iterations;
  for (const auto& v : table.values("iteration")) iterations.push_back(*v);
  CHECK(iterations == std::vector<double>{0, 5, 10, 15, 20});
  const auto kl = table.values("kl");
  CHECK(kl[0].has_value());
  CHECK(!kl[1].has_value());
  CHECK(kl[2].has_value());
  for (const auto& v : table.values("amari")) CHECK(!v.has_value());
  for (const auto& v : table.values("wall_ms")) CHECK(!v.has_value());
  CHECK(!table.values("grad_norm")[0].has_value());
  CHECK(table.values("grad_norm")[1].has_value());
}

TEST_CASE("compare_runs statistics and cadence checks") {
  const auto dir = scratch("compare");
  auto cfg = runner::parse_config(small_config(dir / "two", "[4, 5]"));
  const auto two = runner::run_experiment(cfg).front();
  cfg = runner::parse_config(small_config(dir / "one", "[4]"));
  const auto one = runner::run_experiment(cfg).front();

  const auto single = runner::compare_runs({one});
  const auto t4 = runner::read_metrics_csv(dir / "one" / "sifg" / "metrics_4.csv");
  const auto m2 = *single.metric("m2");
  const auto& values = t4.values("m2");
  for (std::size_t r = 0; r < single.rows.size(); ++r) {
    CHECK(single.rows[r].mean[m2] == values[r]);
    CHECK(single.rows[r].stddev[m2] == 0.0);
  }

  const auto pair = runner::compare_runs({two});
  const auto a = runner::read_metrics_csv(dir / "two" / "sifg" / "metrics_4.csv").values("m2");
  const auto b = runner::read_metrics_csv(dir / "two" / "sifg" / "metrics_5.csv").values("m2");
  const auto* last = pair.find("sifg", 20);
  REQUIRE(last != nullptr);
  const double x = *a.back(), y = *b.back();
  CHECK(*last->mean[m2] == doctest::Approx(0.5 * (x + y)).epsilon(1e-15));
  CHECK(*last->stddev[m2] == doctest::Approx(std::abs(x - y) / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(pair.to_csv().substr(0, 24) == "method,iteration,kl_mean");

  std::string other = small_config(dir / "other", "[4]");
  other.replace(other.find("\"moments_every\": 5"), 18, "\"moments_every\": 4");
  const auto mismatched = runner::run_experiment(runner::parse_config(other)).front();
  CHECK_THROWS_AS(runner::compare_runs({one, mismatched}), ConfigError);
}

TEST_CASE("ica dataset files round trip") {
  const auto dir = scratch("ica");
  const auto data = targets::ica_synthesize(3, 25, 9);
  runner::write_ica_dataset(dir / "ica.json", data, 9);
  const auto back = runner::read_ica_dataset(dir / "ica.json");
  CHECK(back.model.observations == data.model.observations);
  CHECK(back.w_true == data.w_true);

  const std::string cfg_text = R"({
    "target": {"kind": "bayesian_ica", "dataset": "ica.json"},
    "sampler": {"method": "svgd", "h": 0.01, "outer_iterations": 3},
    "particles": {"n": 5, "init": {"kind": "gaussian", "mean": 0, "var": 1}},
    "metrics": {"kl_every": 1},
    "output": {"dir": "x"},
    "seeds": [1]})";
  const auto cfg = runner::parse_config(cfg_text, dir);
  CHECK(runner::particle_dim(cfg.target) == 9);
  const auto result = runner::run_single(cfg, cfg.samplers[0], 1);
  CHECK(result.records.size() == 4);
  CHECK(result.records.back().amari.has_value());
  CHECK(!result.records.back().kl_estimate.has_value());
}

TEST_CASE("samples file layout") {
  const auto dir = scratch("samples");
  Matrix s(2, 3);
  s << 1, 2, 3, 4, 5, 6;
  io::write_samples(dir / "s.bin", s);
  const std::string raw = slurp(dir / "s.bin");
  const auto newline = raw.find('\n');
  const auto header = nlohmann::json::parse(raw.substr(0, newline));
  CHECK(header["n"] == 3);
  CHECK(header["d"] == 2);
  CHECK(header["endianness"] == "little");
  CHECK(header["dtype"] == "f64");
  REQUIRE(raw.size() == newline + 1 + 6 * sizeof(double));
  double second;
  std::memcpy(&second, raw.data() + newline + 1 + sizeof(double), sizeof(double));
  CHECK(second == 4.0);
  CHECK(io::read_samples(dir / "s.bin") == s);
}
