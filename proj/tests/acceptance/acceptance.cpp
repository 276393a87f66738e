// Acceptance suite: one PASS/FAIL line per criterion. Criteria 3-6, 10 and 12
// run the shipped experiment configs end to end, so a full pass takes a while
// on a single core. Exit status is nonzero if any criterion fails.
//
//   acceptance [--out DIR] [--only 1,2,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "sifg/allocator.hpp"
#include "sifg/flow.hpp"
#include "sifg/metrics.hpp"
#include "sifg/nn.hpp"
#include "sifg/rng.hpp"
#include "sifg/runner.hpp"
#include "sifg/targets.hpp"

namespace fs = std::filesystem;
using namespace sifg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  return rng::gaussian_columns(seed, rng::Purpose::test, 0, rows, cols, scale);
}

fs::path g_out = "acceptance_out";

// ---------------------------------------------------------------------------
// Experiment runs shared by several criteria.

struct SamplerRuns {
  std::vector<std::uint64_t> seeds;
  std::vector<runner::MetricsTable> tables;  // one per seed
  std::vector<std::string> status;
};

struct Experiment {
  runner::ExperimentConfig cfg;
  std::map<std::string, SamplerRuns> samplers;
  std::vector<runner::RunManifest> manifests;
  double minutes = 0.0;
};

std::map<std::string, Experiment> g_experiments;

const Experiment& experiment(const std::string& name) {
  auto it = g_experiments.find(name);
  if (it != g_experiments.end()) return it->second;
  Experiment e;
  e.cfg = runner::load_config(fs::path(SIFG_SOURCE_DIR) / "configs" / (name + ".json"));
  e.cfg.output.dir = g_out / name;
  const auto t0 = std::chrono::steady_clock::now();
  e.manifests = runner::run_experiment(e.cfg);
  e.minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  for (const auto& m : e.manifests) {
    SamplerRuns runs;
    for (const auto& r : m.runs) {
      runs.seeds.push_back(r.seed);
      runs.tables.push_back(runner::read_metrics_csv(m.path.parent_path() / r.metrics_csv));
      runs.status.push_back(r.status);
    }
    e.samplers[m.sampler] = std::move(runs);
  }
  std::printf("  [ran %s: %zu samplers x %zu seeds in %.1f min]\n", name.c_str(), e.manifests.size(),
              e.cfg.seeds.size(), e.minutes);
  std::fflush(stdout);
  return g_experiments.emplace(name, std::move(e)).first->second;
}

// Values of a column at rows where it is present, with their iterations.
std::vector<std::pair<std::uint64_t, double>> series(const runner::MetricsTable& t, const std::string& col) {
  std::vector<std::pair<std::uint64_t, double>> out;
  const auto it = t.values("iteration");
  const auto v = t.values(col);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] && it[i]) out.emplace_back(static_cast<std::uint64_t>(*it[i]), *v[i]);
  }
  return out;
}

double value_at(const runner::MetricsTable& t, const std::string& col, std::uint64_t iteration) {
  for (const auto& [k, v] : series(t, col)) {
    if (k == iteration) return v;
  }
  return std::nan("");
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::vector<double> across_seeds(const SamplerRuns& r, const std::string& col, std::uint64_t iteration) {
  std::vector<double> out;
  for (const auto& t : r.tables) out.push_back(value_at(t, col, iteration));
  return out;
}

std::string join(const std::vector<double>& v, const char* f = "%.3f") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(f, v[i]);
  return s;
}

// ---------------------------------------------------------------------------

// Signs of every hidden pre-activation over the batch. A finite-difference
// stencil is only an oracle where this pattern does not change.
std::vector<bool> activation_pattern(const nn::ScoreNet& net, const Matrix& x) {
  std::vector<bool> out;
  Matrix h = x;
  const auto& layers = net.params.layers;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    const Matrix a = (layers[l].weight * h).colwise() + layers[l].bias;
    for (Eigen::Index i = 0; i < a.size(); ++i) out.push_back(a(i) >= 0.0);
    h = net.activation.value(a);
  }
  return out;
}

Outcome dsm_gradients() {
  // 100 (net, batch, sigma) triples over both activations and both signs.
  // When the central stencil crosses a leaky-relu kink, the second-order
  // one-sided stencil on the smooth side is used instead.
  double worst = 0.0;
  std::size_t coords = 0, one_sided = 0, skipped = 0;
  for (std::uint64_t t = 0; t < 100; ++t) {
    rng::Stream s(1000 + t, rng::Purpose::test);
    const int d = 1 + static_cast<int>(s.below(4));
    const int width = 2 + static_cast<int>(s.below(7));
    const std::vector<int> dims = t % 3 == 0 ? std::vector<int>{d, width, d}
                                             : std::vector<int>{d, width, width, d};
    const auto act = t % 2 == 0 ? nn::Activation::make_tanh() : nn::Activation::make_leaky_relu(0.1);
    const auto sign = t % 4 < 2 ? nn::DsmSign::derivation : nn::DsmSign::literal;
    const auto net = nn::net_init(dims, act, 2000 + t);
    const Eigen::Index batch = 1 + static_cast<Eigen::Index>(s.below(16));
    const double sigma = 0.05 + s.uniform();
    const Matrix z = normal_matrix(d, batch, 3000 + t);
    const Matrix x = z + sigma * normal_matrix(d, batch, 4000 + t);

    const Vector analytic = nn::dsm_loss_and_grad(net, x, z, sigma, sign).grads.flatten();
    const Vector base = net.params.flatten();
    const auto pattern = activation_pattern(net, x);
    nn::ScoreNet probe = net;
    const double step = 1e-5;
    auto at = [&](Eigen::Index k, double offset, bool* same) {
      Vector p = base;
      p[k] += offset;
      probe.params.assign_flat(p);
      if (same) *same = *same && activation_pattern(probe, x) == pattern;
      return nn::dsm_loss_and_grad(probe, x, z, sigma, sign).loss;
    };
    for (Eigen::Index k = 0; k < base.size(); ++k) {
      if (std::abs(analytic[k]) <= 1e-8) continue;
      bool smooth = true;
      double fd = (at(k, step, &smooth) - at(k, -step, &smooth)) / (2.0 * step);
      if (!smooth) {
        ++one_sided;
        bool right = true, left = true;
        const double f0 = at(k, 0.0, nullptr);
        const double r1 = at(k, step, &right), r2 = at(k, 2.0 * step, &right);
        const double l1 = at(k, -step, &left), l2 = at(k, -2.0 * step, &left);
        fd = right ? (-3.0 * f0 + 4.0 * r1 - r2) / (2.0 * step) : (3.0 * f0 - 4.0 * l1 + l2) / (2.0 * step);
        if (!right && !left) {
          ++skipped;
          continue;
        }
      }
      ++coords;
      worst = std::max(worst, std::abs(analytic[k] - fd) / std::max(std::abs(analytic[k]), std::abs(fd)));
    }
  }
  return {worst < 1e-4 && skipped == 0,
          fmt("max rel err %.2e over %zu coordinates of 100 triples, %zu one-sided at kinks, %zu unresolved (tol 1e-4)",
              worst, coords, one_sided, skipped)};
}

Outcome dsm_learns_smoothed_score() {
  const int d = 2;
  const Eigen::Index n = 2000;
  const double sigma = 0.5;
  const Matrix z = normal_matrix(d, n, 11);
  auto net = nn::net_init(std::vector<int>{d, 32, 32, d}, nn::Activation::make_tanh(), 12);
  nn::OptimizerSpec spec;
  spec.kind = nn::OptimizerKind::adam;
  auto opt = nn::optimizer_init(spec, net);
  for (std::uint64_t k = 0; k < 500; ++k) {
    const Matrix x = z + rng::gaussian_columns(13, rng::Purpose::test, k, d, n, sigma);
    const auto lg = nn::dsm_loss_and_grad(net, x, z, sigma);
    nn::apply_optimizer_step(net, lg.grads, opt, 1e-2);
  }
  // fresh perturbed samples from mu-hat = N(0, (1 + sigma^2) I)
  const Matrix fresh = normal_matrix(d, n, 14) + sigma * normal_matrix(d, n, 15);
  const Matrix f = nn::net_forward_batch(net, fresh);
  double mse = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector s = targets::analytic_smoothed_gaussian_score(Vector::Zero(d), 1.0, sigma, fresh.col(i));
    mse += (f.col(i) - s).squaredNorm();
  }
  mse /= static_cast<double>(n);
  return {mse < 0.05 * d, fmt("mse %.4f (tol %.2f)", mse, 0.05 * d)};
}

Outcome mode_recovery() {
  const auto& e = experiment("gmm2d");
  const std::uint64_t last = e.cfg.samplers.front().config.outer_iterations;
  const std::size_t m = static_cast<std::size_t>(e.cfg.target.mixture.means.cols());
  bool pass = true;
  std::string detail;
  for (const char* name : {"sifg", "l2gf"}) {
    const auto& r = e.samplers.at(name);
    for (std::size_t s = 0; s < r.tables.size(); ++s) {
      std::vector<double> cov;
      for (std::size_t j = 1; j <= m; ++j) cov.push_back(value_at(r.tables[s], "coverage_" + std::to_string(j), last));
      const double lo = *std::min_element(cov.begin(), cov.end());
      const bool ok = std::string(name) == "sifg" ? lo >= 0.05 : lo < 0.01;
      pass = pass && ok;
      detail += fmt("%s seed %llu [%s]%s; ", name, static_cast<unsigned long long>(r.seeds[s]), join(cov, "%.3f").c_str(),
                    ok ? "" : " !");
    }
  }
  return {pass, detail + "need sifg >= 0.05 on every mode, l2gf some mode < 0.01"};
}

Outcome kl_decay_10d() {
  const auto& e = experiment("gmm10d");
  const auto& sifg = e.samplers.at("sifg");
  const auto& l2gf = e.samplers.at("l2gf");
  const double k0 = mean(across_seeds(sifg, "kl", 0));
  const double kN = mean(across_seeds(sifg, "kl", 2000));
  const double lN = mean(across_seeds(l2gf, "kl", 2000));
  const bool pass = kN <= 0.5 * k0 && kN <= lN;
  return {pass, fmt("sifg mean kl %.3f -> %.3f (need <= %.3f); l2gf final %.3f", k0, kN, 0.5 * k0, lN)};
}

Outcome monomial_gamma() {
  const auto& e = experiment("monomial_gamma");
  const auto& sifg = e.samplers.at("sifg");
  const auto& l2gf = e.samplers.at("l2gf");
  // seed-mean kl averaged within each 200-iteration window
  std::vector<double> windows;
  for (std::uint64_t w = 0; w < 10; ++w) {
    std::vector<double> vals;
    for (const auto& t : sifg.tables) {
      for (const auto& [k, v] : series(t, "kl")) {
        if (k >= 200 * w && k < 200 * (w + 1)) vals.push_back(v);
      }
    }
    windows.push_back(mean(vals));
  }
  const auto sifg_final = across_seeds(sifg, "kl", 2000);
  const double final_mean = mean(sifg_final);
  bool decreasing = true;
  for (std::size_t w = 0; w + 1 < windows.size() && windows[w] > 2.0 * final_mean; ++w) {
    decreasing = decreasing && windows[w + 1] < windows[w];
  }
  const double s_std = sample_std(sifg_final);
  const double l_std = sample_std(across_seeds(l2gf, "kl", 2000));
  return {decreasing && s_std <= l_std,
          fmt("sifg window kl [%s], final %.3f, decreasing %s; final std sifg %.4f vs l2gf %.4f",
              join(windows).c_str(), final_mean, decreasing ? "yes" : "no", s_std, l_std)};
}

Outcome ica_amari() {
  const auto& e = experiment("ica_synth_d2");
  const auto& sifg = e.samplers.at("sifg");
  const std::uint64_t last = e.cfg.samplers.front().config.outer_iterations;
  const auto a0 = across_seeds(sifg, "amari", 0);
  const auto aN = across_seeds(sifg, "amari", last);
  const double m0 = mean(a0), mN = mean(aN);
  return {mN <= 0.5 * m0, fmt("sifg mean amari %.4f -> %.4f (need <= %.4f); per seed final [%s]", m0, mN, 0.5 * m0,
                              join(aN, "%.3f").c_str())};
}

Outcome sigma_adaptation() {
  const Vector mu = Vector::Zero(2);
  targets::GaussianTarget target(mu, 0.01);
  flow::SamplerConfig cfg;
  cfg.method = flow::Method::adasifg;
  cfg.score_mode = flow::ScoreMode::gaussian_oracle;
  cfg.h = 1e-3;
  cfg.sigma0 = 0.3;
  cfg.lb = 0.01;
  cfg.ub = 0.5;
  cfg.eta_sigma = 1e-3;
  cfg.outer_iterations = 300;
  cfg.seed = 21;

  // sign oracle: one step over 10^4 perturbation draws
  auto probe = flow::init_state({normal_matrix(2, 10000, 22, 0.1)}, cfg);
  probe = flow::adasifg_step(std::move(probe), target, cfg);
  const double g = probe.last_sigma_grad;

  auto state = flow::init_state({normal_matrix(2, 1000, 23)}, cfg);
  bool inside = true;
  for (std::uint64_t k = 0; k < cfg.outer_iterations; ++k) {
    state = flow::adasifg_step(std::move(state), target, cfg);
    inside = inside && state.sigma >= cfg.lb && state.sigma <= cfg.ub;
  }
  const bool pass = g < 0.0 && state.sigma <= 0.15 && inside;
  return {pass, fmt("g-hat %.4f (need < 0); sigma 0.3 -> %.4f after %llu steps (need <= 0.15); in [lb, ub] %s", g,
                    state.sigma, static_cast<unsigned long long>(cfg.outer_iterations), inside ? "yes" : "no")};
}

Outcome ada_reduces_to_plain() {
  auto cfg = runner::load_config(fs::path(SIFG_SOURCE_DIR) / "configs" / "gmm2d.json");
  auto target = runner::build_target(cfg.target, 1).target;
  cfg.n_particles = 200;
  flow::SamplerConfig plain = cfg.samplers.front().config;
  plain.method = flow::Method::sifg;
  plain.seed = 5;
  flow::SamplerConfig ada = plain;
  ada.method = flow::Method::adasifg;
  ada.eta_sigma = 0.0;
  const auto init = runner::initial_particles(cfg, 5);
  auto a = flow::init_state(init, plain);
  auto b = flow::init_state(init, ada);
  std::uint64_t first_diff = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    a = flow::sifg_step(std::move(a), *target, plain);
    b = flow::adasifg_step(std::move(b), *target, ada);
    const bool same = a.ensemble.particles == b.ensemble.particles &&
                      a.net.params.flatten() == b.net.params.flatten() && a.sigma == b.sigma;
    if (!same && first_diff == 0) first_diff = k + 1;
  }
  return {first_diff == 0, first_diff == 0 ? "particles, net and sigma bit-identical for 100 steps"
                                           : fmt("first difference at step %llu",
                                                 static_cast<unsigned long long>(first_diff))};
}

Outcome svgd_stein() {
  // The mean velocity is the average over source particles j of
  //   g_j = (1/n) sum_i [k(x_j, x_i) s(x_j) + grad_{x_j} k(x_j, x_i)],
  // whose expectation vanishes under pi; its standard error is std(g)/sqrt(n).
  const Eigen::Index n = 10000;
  targets::GaussianTarget target(Vector::Zero(2), 1.0);
  const Matrix x = normal_matrix(2, n, 31);
  const Matrix score = target.score_batch(x);
  const double bw = flow::median_bandwidth(x);
  const Matrix v = flow::svgd_velocity(x, score, bw);
  const Vector m = v.rowwise().mean();
  Matrix g = Matrix::Zero(2, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double ksum = 0.0;
    Vector grad = Vector::Zero(2);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vector diff = x.col(j) - x.col(i);
      const double k = std::exp(-diff.squaredNorm() / bw);
      ksum += k;
      grad -= (2.0 / bw) * k * diff;
    }
    g.col(j) = (ksum * score.col(j) + grad) / static_cast<double>(n);
  }
  const Vector gm = g.rowwise().mean();
  const Vector var = (g.colwise() - gm).array().square().rowwise().sum() / static_cast<double>(n - 1);
  const double se = std::sqrt(var.sum() / static_cast<double>(n));
  const double decomposition_gap = (gm - m).norm();

  flow::SamplerConfig cfg;
  cfg.method = flow::Method::svgd;
  cfg.h = 0.05;
  targets::GaussianTarget shifted(Vector::Constant(2, 0.7), 0.5);
  Matrix z(2, 1);
  z << 0.3, -1.2;
  const Matrix moved = flow::svgd_step({z}, shifted, cfg).particles;
  const Matrix expected = z + cfg.h * shifted.score_batch(z);
  const bool exact = moved == expected;
  return {m.norm() < 3.0 * se && exact && decomposition_gap < 1e-10,
          fmt("|mean velocity| %.2e vs 3 se %.2e; single particle step exact %s", m.norm(), 3.0 * se,
              exact ? "yes" : "no")};
}

Outcome moment_boundedness() {
  bool pass = true;
  std::string detail;
  for (const char* name : {"gmm2d", "gmm10d", "monomial_gamma", "ica_synth_d2", "ica_synth_d5"}) {
    const auto& e = experiment(name);
    double worst = 0.0;
    bool finite = true;
    std::string worst_at;
    for (const auto& [sampler, runs] : e.samplers) {
      for (std::size_t s = 0; s < runs.tables.size(); ++s) {
        std::vector<double> seen;
        for (const auto& [k, v] : series(runs.tables[s], "m5")) {
          finite = finite && std::isfinite(v);
          seen.push_back(v);
          std::vector<double> sorted = seen;
          std::sort(sorted.begin(), sorted.end());
          const std::size_t h = sorted.size() / 2;
          const double med = sorted.size() % 2 ? sorted[h] : 0.5 * (sorted[h - 1] + sorted[h]);
          if (v / med > worst) {
            worst = v / med;
            worst_at = fmt("%s seed %llu it %llu", sampler.c_str(), static_cast<unsigned long long>(runs.seeds[s]),
                           static_cast<unsigned long long>(k));
          }
        }
      }
    }
    const bool ok = finite && worst < 10.0;
    pass = pass && ok;
    detail += fmt("%s max m5/median %.2f (%s)%s; ", name, worst, worst_at.c_str(), ok ? "" : " !");
  }
  return {pass, detail + "tol 10"};
}

Outcome estimator_calibration() {
  const Matrix p = normal_matrix(1, 10000, 41);
  const Matrix q = normal_matrix(1, 10000, 42).array() + 1.0;
  const double kl = metrics::knn_kl(p, q);
  Matrix w(2, 2);
  w << 1, 1, 0, 1;
  const double am = metrics::amari_distance(w, Matrix::Identity(2, 2));
  const double m5 = metrics::moment(normal_matrix(1, 100000, 43), 5.0);
  const double exact = 8.0 * std::sqrt(2.0 / std::numbers::pi);
  const double rel = std::abs(m5 - exact) / exact;
  const bool pass = std::abs(kl - 0.5) <= 0.1 && am == 0.5 && rel <= 0.02;
  return {pass, fmt("knn_kl %.4f (0.5 +- 0.1); amari %.17g (0.5 exactly); E|Z|^5 %.4f vs %.4f, rel %.4f (tol 0.02)", kl,
                    am, m5, exact, rel)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
  auto cfg = runner::load_config(fs::path(SIFG_SOURCE_DIR) / "configs" / "ica_synth_d2.json");
  cfg.seeds = {1};
  cfg.output.wall_clock = false;
  std::vector<std::string> csvs;
  for (int threads : {1, 3, 1}) {
#ifdef _OPENMP
    omp_set_num_threads(threads);
#endif
    cfg.output.dir = g_out / "determinism" / ("threads_" + std::to_string(threads) + "_" + std::to_string(csvs.size()));
    std::string all;
    for (const auto& m : runner::run_experiment(cfg)) {
      all += slurp(m.path.parent_path() / m.runs.front().metrics_csv);
      all += slurp(m.path.parent_path() / m.runs.front().samples);
    }
    csvs.push_back(all);
  }
#ifdef _OPENMP
  omp_set_num_threads(1);
#endif
  const bool same = !csvs[0].empty() && csvs[0] == csvs[1] && csvs[0] == csvs[2];
  return {same, fmt("ica_synth_d2 seed 1, every sampler, threads 1/3/1: metrics and samples %s (%zu bytes)",
                    same ? "byte-identical" : "DIFFER", csvs[0].size())};
}

}  // namespace

int main(int argc, char** argv) {
  keep_heap_mapped();
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      g_out = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::fprintf(stderr, "usage: acceptance [--out DIR] [--only 1,2,...]\n");
      return 2;
    }
  }

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"dsm gradients match finite differences", dsm_gradients},
      {"dsm learns the analytic smoothed score", dsm_learns_smoothed_score},
      {"gmm2d mode recovery", mode_recovery},
      {"gmm10d kl decay and ordering", kl_decay_10d},
      {"monomial gamma kl decay and stability", monomial_gamma},
      {"synthetic ica amari drop", ica_amari},
      {"sigma adaptation direction and clipping", sigma_adaptation},
      {"ada-sifg with zero rate equals sifg", ada_reduces_to_plain},
      {"svgd stein check and single particle", svgd_stein},
      {"fifth moment stays bounded", moment_boundedness},
      {"estimator calibration", estimator_calibration},
      {"determinism across thread counts", determinism},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %2d: %s | %s | %.1fs\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
