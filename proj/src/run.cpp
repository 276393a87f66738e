#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "sifg/binary_io.hpp"
#include "sifg/rng.hpp"
#include "sifg/runner.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sifg::runner {

using nlohmann::json;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

bool due(std::uint64_t k, std::uint64_t every, std::uint64_t last) {
  return k == 0 || k == last || (every > 0 && k % every == 0);
}

Matrix ground_truth(const TargetSpec& spec, std::size_t count, std::uint64_t seed) {
  if (spec.kind == "gaussian_mixture") return targets::gmm_sample(spec.mixture, count, seed);
  if (spec.kind == "monomial_gamma") return targets::monomial_gamma_sample(spec.dim, count, seed);
  if (spec.kind == "analytic_gaussian") {
    Matrix s = rng::gaussian_columns(seed, rng::Purpose::ground_truth, 0, spec.mean.size(),
                                     static_cast<Eigen::Index>(count), std::sqrt(spec.var));
    return s.colwise() + spec.mean;
  }
  throw ConfigError("no exact sampler for target kind '" + spec.kind + "'");
}

double mean_amari(const Matrix& samples, const Matrix& w_true) {
  const Eigen::Index d = w_true.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < samples.cols(); ++i) {
    const Matrix w = samples.col(i).reshaped(d, d);
    total += metrics::amari_distance(w, w_true);
  }
  return total / static_cast<double>(samples.cols());
}

std::size_t mode_count(const ExperimentConfig& cfg) {
  return cfg.metrics.modes ? cfg.target.mixture.components() : 0;
}

}  // namespace

void write_ica_dataset(const std::filesystem::path& path, const targets::IcaDataset& data, std::uint64_t seed) {
  std::vector<std::vector<double>> obs;
  for (Eigen::Index n = 0; n < data.model.observations.cols(); ++n) {
    const auto c = data.model.observations.col(n);
    obs.emplace_back(c.data(), c.data() + c.size());
  }
  std::vector<std::vector<double>> w;
  for (Eigen::Index i = 0; i < data.w_true.rows(); ++i) {
    const Vector row = data.w_true.row(i).transpose();
    w.emplace_back(row.data(), row.data() + row.size());
  }
  const json j = {{"d", data.model.d()}, {"n_obs", data.model.n_obs()}, {"seed", seed},
                  {"observations", obs}, {"w_true", w}};
  write_text(path, j.dump() + "\n");
}

targets::IcaDataset read_ica_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open ICA dataset " + path.string());
  const json j = json::parse(in);
  const auto d = j.at("d").get<Eigen::Index>();
  const auto obs = j.at("observations").get<std::vector<std::vector<double>>>();
  const auto w = j.at("w_true").get<std::vector<std::vector<double>>>();
  targets::IcaDataset out;
  out.model.observations.resize(d, static_cast<Eigen::Index>(obs.size()));
  for (std::size_t n = 0; n < obs.size(); ++n) {
    if (static_cast<Eigen::Index>(obs[n].size()) != d) throw ConfigError(path.string() + ": observation has wrong length");
    out.model.observations.col(static_cast<Eigen::Index>(n)) = Eigen::Map<const Vector>(obs[n].data(), d);
  }
  if (static_cast<Eigen::Index>(w.size()) != d) throw ConfigError(path.string() + ": w_true has wrong shape");
  out.w_true.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    if (static_cast<Eigen::Index>(w[static_cast<std::size_t>(i)].size()) != d) {
      throw ConfigError(path.string() + ": w_true has wrong shape");
    }
    out.w_true.row(i) = Eigen::Map<const Vector>(w[static_cast<std::size_t>(i)].data(), d).transpose();
  }
  return out;
}

BuiltTarget build_target(const TargetSpec& spec, std::uint64_t run_seed) {
  BuiltTarget out;
  if (spec.kind == "gaussian_mixture") {
    out.target = std::make_unique<targets::GaussianMixtureTarget>(spec.mixture);
  } else if (spec.kind == "monomial_gamma") {
    out.target = std::make_unique<targets::MonomialGammaTarget>(spec.dim);
  } else if (spec.kind == "analytic_gaussian") {
    out.target = std::make_unique<targets::GaussianTarget>(spec.mean, spec.var);
  } else if (spec.kind == "bayesian_ica") {
    targets::IcaDataset data = spec.synthetic
                                   ? targets::ica_synthesize(spec.synthetic->d, spec.synthetic->n_obs, spec.synthetic->seed)
                                   : read_ica_dataset(*spec.dataset);
    data.model.prior_var = spec.prior_var;
    data.model.minibatch_size = spec.minibatch_size;
    out.w_true = data.w_true;
    out.target = std::make_unique<targets::IcaPosteriorTarget>(std::move(data.model), run_seed);
  } else {
    throw ConfigError("unknown target kind '" + spec.kind + "'");
  }
  return out;
}

flow::ParticleEnsemble initial_particles(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto d = cfg.init.mean.size();
  Matrix z = rng::gaussian_columns(seed, rng::Purpose::particle_init, 0, d,
                                   static_cast<Eigen::Index>(cfg.n_particles), std::sqrt(cfg.init.var));
  z.colwise() += cfg.init.mean;
  return {z};
}

RunResult run_single(const ExperimentConfig& cfg, const NamedSampler& sampler, std::uint64_t seed) {
  flow::SamplerConfig sc = sampler.config;
  sc.seed = seed;
  BuiltTarget built = build_target(cfg.target, seed);
  targets::Target& target = *built.target;

  const bool want_kl = cfg.metrics.kl_every > 0 && cfg.target.kind != "bayesian_ica";
  const bool want_amari = cfg.metrics.kl_every > 0 && built.w_true.has_value();
  const bool semi_implicit = sc.method == flow::Method::sifg || sc.method == flow::Method::adasifg;
  const Matrix truth = want_kl ? ground_truth(cfg.target, cfg.metrics.ground_truth_samples, seed) : Matrix();

  const auto start = std::chrono::steady_clock::now();
  RunResult result;
  flow::SamplerState state = flow::init_state(initial_particles(cfg, seed), sc);
  const std::uint64_t last = sc.outer_iterations;

  auto record = [&](std::uint64_t k) {
    const bool sample_due = due(k, cfg.metrics.kl_every, last);
    const bool diag_due = due(k, cfg.metrics.moments_every, last);
    metrics::MetricsRecord rec;
    rec.iteration = k;
    if (sample_due && (want_kl || want_amari || cfg.metrics.modes)) {
      const Matrix samples = flow::final_samples(state, sc);
      if (want_kl) rec.kl_estimate = metrics::knn_kl(samples, truth, cfg.metrics.knn_k);
      if (want_amari) rec.amari = mean_amari(samples, *built.w_true);
      if (cfg.metrics.modes) {
        rec.mode_coverage = metrics::mode_coverage(samples, cfg.target.mixture.means, cfg.target.mixture.stds,
                                                   cfg.metrics.mode_radius);
      }
    }
    if (diag_due) {
      for (int alpha : {2, 4, 5}) rec.moments[alpha] = metrics::moment(state.ensemble.particles, alpha);
      if (k > 0) rec.grad_norm_diag = flow::velocity_diag(state, target, sc);
      if (semi_implicit) rec.sigma = state.sigma;
    }
    rec.wall_clock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.records.push_back(std::move(rec));
  };

  try {
    for (std::uint64_t k = 0;; ++k) {
      if (due(k, cfg.metrics.kl_every, last) || due(k, cfg.metrics.moments_every, last)) record(k);
      if (k == last) break;
      state = flow::step(std::move(state), target, sc);
    }
  } catch (const flow::StepAbort& e) {
    result.status = "aborted";
    result.failed_iteration = e.iteration();
    result.message = e.what();
  }
  result.failed_steps = state.failed_steps;
  result.final_samples = flow::final_samples(state, sc);
  return result;
}

std::vector<std::string> csv_header(std::size_t modes) {
  std::vector<std::string> cols{"iteration", "kl", "amari", "m2", "m4", "m5", "grad_norm", "sigma"};
  for (std::size_t j = 1; j <= modes; ++j) cols.push_back("coverage_" + std::to_string(j));
  cols.emplace_back("wall_ms");
  return cols;
}

std::string metrics_csv(const std::vector<metrics::MetricsRecord>& records, std::size_t modes, bool wall_clock) {
  std::ostringstream out;
  const auto header = csv_header(modes);
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << "\n";
  auto field = [&out](const std::optional<double>& v) {
    out << ",";
    if (v) out << format_double(*v);
  };
  for (const auto& r : records) {
    out << r.iteration;
    field(r.kl_estimate);
    field(r.amari);
    for (int alpha : {2, 4, 5}) {
      const auto it = r.moments.find(alpha);
      field(it == r.moments.end() ? std::nullopt : std::optional<double>(it->second));
    }
    field(r.grad_norm_diag);
    field(r.sigma);
    for (std::size_t j = 0; j < modes; ++j) {
      field(r.mode_coverage ? std::optional<double>((*r.mode_coverage)[static_cast<Eigen::Index>(j)]) : std::nullopt);
    }
    field(wall_clock ? std::optional<double>(r.wall_clock_ms) : std::nullopt);
    out << "\n";
  }
  return out.str();
}

json to_json(const RunManifest& m) {
  json runs = json::array();
  for (const auto& r : m.runs) {
    json j = {{"seed", r.seed}, {"status", r.status}, {"failed_steps", r.failed_steps}};
    j["metrics_csv"] = r.metrics_csv.empty() ? json(nullptr) : json(r.metrics_csv.string());
    j["samples"] = r.samples.empty() ? json(nullptr) : json(r.samples.string());
    j["failed_iteration"] = r.failed_iteration ? json(*r.failed_iteration) : json(nullptr);
    if (!r.message.empty()) j["message"] = r.message;
    runs.push_back(j);
  }
  return {{"experiment", m.experiment},
          {"sampler", m.sampler},
          {"code_version", m.code_version},
          {"started_at", m.started_at},
          {"finished_at", m.finished_at.empty() ? json(nullptr) : json(m.finished_at)},
          {"config", m.config},
          {"runs", runs}};
}

RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  const json j = json::parse(in);
  RunManifest m;
  m.path = path;
  m.experiment = j.at("experiment").get<std::string>();
  m.sampler = j.at("sampler").get<std::string>();
  m.code_version = j.at("code_version").get<std::string>();
  m.started_at = j.at("started_at").get<std::string>();
  if (!j.at("finished_at").is_null()) m.finished_at = j.at("finished_at").get<std::string>();
  m.config = j.at("config");
  for (const auto& r : j.at("runs")) {
    SeedRun s;
    s.seed = r.at("seed").get<std::uint64_t>();
    s.status = r.at("status").get<std::string>();
    s.failed_steps = r.at("failed_steps").get<std::uint64_t>();
    if (!r.at("metrics_csv").is_null()) s.metrics_csv = r.at("metrics_csv").get<std::string>();
    if (!r.at("samples").is_null()) s.samples = r.at("samples").get<std::string>();
    if (!r.at("failed_iteration").is_null()) s.failed_iteration = r.at("failed_iteration").get<std::uint64_t>();
    s.message = r.value("message", "");
    m.runs.push_back(s);
  }
  return m;
}

std::vector<RunManifest> run_experiment(const ExperimentConfig& cfg) {
  std::vector<RunManifest> manifests;
  const std::size_t modes = mode_count(cfg);
  for (const auto& sampler : cfg.samplers) {
    ExperimentConfig echo = cfg;
    echo.samplers = {sampler};

    RunManifest manifest;
    manifest.experiment = cfg.name;
    manifest.sampler = sampler.name;
    manifest.config = to_json(echo);
    manifest.started_at = utc_now();
    const std::filesystem::path dir = cfg.output.dir / sampler.name;
    manifest.path = dir / "manifest.json";
    std::filesystem::create_directories(dir);
    for (const auto seed : cfg.seeds) {
      SeedRun run;
      run.seed = seed;
      manifest.runs.push_back(run);
    }
    write_text(manifest.path, to_json(manifest).dump(2) + "\n");

    std::vector<std::string> errors(cfg.seeds.size());
#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
      SeedRun& run = manifest.runs[s];
      try {
        const RunResult result = run_single(cfg, sampler, run.seed);
        if (cfg.output.csv) {
          run.metrics_csv = "metrics_" + std::to_string(run.seed) + ".csv";
          write_text(dir / run.metrics_csv, metrics_csv(result.records, modes, cfg.output.wall_clock));
        }
        if (cfg.output.samples) {
          run.samples = "samples_" + std::to_string(run.seed) + ".bin";
          io::write_samples(dir / run.samples, result.final_samples);
        }
        run.status = result.status;
        run.failed_iteration = result.failed_iteration;
        run.failed_steps = result.failed_steps;
        run.message = result.message;
      } catch (const std::exception& e) {
        errors[s] = e.what();
      }
    }
    for (const auto& e : errors) {
      if (!e.empty()) throw std::runtime_error("sampler " + sampler.name + ": " + e);
    }
    manifest.finished_at = utc_now();
    write_text(manifest.path, to_json(manifest).dump(2) + "\n");
    manifests.push_back(std::move(manifest));
  }
  return manifests;
}

// ---------------------------------------------------------------------------

std::optional<std::size_t> MetricsTable::column(const std::string& name) const {
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c] == name) return c;
  }
  return std::nullopt;
}

std::vector<std::optional<double>> MetricsTable::values(const std::string& name) const {
  const auto c = column(name);
  if (!c) throw UsageError("metrics table has no column '" + name + "'");
  std::vector<std::optional<double>> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r[*c]);
  return out;
}

MetricsTable read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open metrics file " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  MetricsTable t;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": empty metrics file");
  t.columns = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != t.columns.size()) throw ConfigError(path.string() + ": ragged row");
    std::vector<std::optional<double>> row;
    for (const auto& c : cells) row.push_back(c.empty() ? std::nullopt : std::optional<double>(std::stod(c)));
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string Summary::to_csv() const {
  std::ostringstream out;
  out << "method,iteration";
  for (const auto& m : metrics) out << "," << m << "_mean," << m << "_std";
  out << "\n";
  for (const auto& r : rows) {
    out << r.method << "," << r.iteration;
    for (std::size_t c = 0; c < metrics.size(); ++c) {
      out << ",";
      if (r.mean[c]) out << format_double(*r.mean[c]);
      out << ",";
      if (r.stddev[c]) out << format_double(*r.stddev[c]);
    }
    out << "\n";
  }
  return out.str();
}

const SummaryRow* Summary::find(const std::string& method, std::uint64_t iteration) const {
  for (const auto& r : rows) {
    if (r.method == method && r.iteration == iteration) return &r;
  }
  return nullptr;
}

std::optional<std::size_t> Summary::metric(const std::string& name) const {
  for (std::size_t c = 0; c < metrics.size(); ++c) {
    if (metrics[c] == name) return c;
  }
  return std::nullopt;
}

Summary compare_runs(const std::vector<RunManifest>& manifests) {
  if (manifests.empty()) throw UsageError("compare_runs: no manifests");
  Summary summary;
  std::vector<std::string> reference_columns;
  std::vector<std::uint64_t> reference_iterations;
  bool first = true;

  for (const auto& m : manifests) {
    std::vector<MetricsTable> tables;
    for (const auto& run : m.runs) {
      if (run.metrics_csv.empty()) continue;
      tables.push_back(read_metrics_csv(m.path.parent_path() / run.metrics_csv));
    }
    if (tables.empty()) throw ConfigError("manifest " + m.path.string() + " lists no metrics files");
    for (const auto& t : tables) {
      std::vector<std::uint64_t> iterations;
      for (const auto& r : t.rows) iterations.push_back(static_cast<std::uint64_t>(*r[0]));
      if (first) {
        reference_columns = t.columns;
        reference_iterations = iterations;
        for (const auto& c : t.columns) {
          if (c != "iteration" && c != "wall_ms") summary.metrics.push_back(c);
        }
        first = false;
      } else if (t.columns != reference_columns) {
        throw ConfigError("compare_runs: metric columns differ between runs");
      } else if (iterations != reference_iterations) {
        throw ConfigError("compare_runs: metric cadence differs between runs");
      }
    }

    for (std::size_t row = 0; row < reference_iterations.size(); ++row) {
      SummaryRow out;
      out.method = m.sampler;
      out.iteration = reference_iterations[row];
      for (const auto& name : summary.metrics) {
        const std::size_t c = *tables.front().column(name);
        std::vector<double> vals;
        for (const auto& t : tables) {
          if (t.rows[row][c]) vals.push_back(*t.rows[row][c]);
        }
        if (vals.empty()) {
          out.mean.emplace_back();
          out.stddev.emplace_back();
          continue;
        }
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double ss = 0.0;
        for (double v : vals) ss += (v - mean) * (v - mean);
        out.mean.emplace_back(mean);
        out.stddev.emplace_back(vals.size() > 1 ? std::sqrt(ss / static_cast<double>(vals.size() - 1)) : 0.0);
      }
      summary.rows.push_back(std::move(out));
    }
  }
  return summary;
}

}  // namespace sifg::runner
