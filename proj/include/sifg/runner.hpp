#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sifg/flow.hpp"
#include "sifg/metrics.hpp"
#include "sifg/targets.hpp"

namespace sifg::runner {

inline constexpr const char* kCodeVersion = "sifg 0.1.0";

struct SyntheticIcaSpec {
  std::size_t d = 2;
  std::size_t n_obs = 500;
  std::uint64_t seed = 0;
};

struct TargetSpec {
  std::string kind;  // gaussian_mixture | monomial_gamma | bayesian_ica | analytic_gaussian
  targets::GaussianMixture mixture;
  std::size_t dim = 0;  // monomial_gamma
  std::optional<std::filesystem::path> dataset;
  std::optional<SyntheticIcaSpec> synthetic;
  double prior_var = 100.0;
  std::size_t minibatch_size = 0;
  Vector mean;  // analytic_gaussian
  double var = 1.0;
};

struct InitSpec {
  Vector mean;
  double var = 1.0;
};

struct MetricsSpec {
  std::uint64_t kl_every = 0;       // sample-based metrics: kl, amari, coverage
  std::uint64_t moments_every = 0;  // m2/m4/m5, grad_norm, sigma
  bool modes = false;
  double mode_radius = 3.0;
  std::size_t ground_truth_samples = 5000;
  int knn_k = 5;
};

struct OutputSpec {
  std::filesystem::path dir;
  bool csv = true;
  bool samples = true;
  bool wall_clock = true;
};

struct NamedSampler {
  std::string name;
  flow::SamplerConfig config;
};

struct ExperimentConfig {
  std::string name;
  TargetSpec target;
  std::vector<NamedSampler> samplers;
  std::size_t n_particles = 0;
  InitSpec init;
  MetricsSpec metrics;
  OutputSpec output;
  std::vector<std::uint64_t> seeds;
};

/// Parses a JSON document (// and /* */ comments allowed). Relative dataset
/// paths resolve against base_dir. Unknown keys, missing required fields and
/// out-of-range values throw ConfigError naming the field.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Fully explicit JSON echo; parse_config(to_json(c)) reproduces c.
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Particle dimension implied by the target.
std::size_t particle_dim(const TargetSpec& spec);

struct BuiltTarget {
  std::unique_ptr<targets::Target> target;
  std::optional<Matrix> w_true;  // bayesian_ica only
};
BuiltTarget build_target(const TargetSpec& spec, std::uint64_t run_seed);

/// ICA dataset file: {"d", "n_obs", "seed", "observations": [[...] per
/// observation], "w_true": [[...] per row]}.
void write_ica_dataset(const std::filesystem::path& path, const targets::IcaDataset& data, std::uint64_t seed);
targets::IcaDataset read_ica_dataset(const std::filesystem::path& path);

flow::ParticleEnsemble initial_particles(const ExperimentConfig& cfg, std::uint64_t seed);

struct SeedRun {
  std::uint64_t seed = 0;
  std::filesystem::path metrics_csv;  // relative to the manifest directory
  std::filesystem::path samples;
  std::string status = "pending";     // pending | ok | aborted
  std::optional<std::uint64_t> failed_iteration;
  std::uint64_t failed_steps = 0;
  std::string message;
};

struct RunManifest {
  std::string experiment;
  std::string sampler;
  nlohmann::json config;
  std::string code_version = kCodeVersion;
  std::string started_at;
  std::string finished_at;
  std::vector<SeedRun> runs;
  std::filesystem::path path;  // manifest.json location
};

nlohmann::json to_json(const RunManifest& m);
RunManifest load_manifest(const std::filesystem::path& path);

/// Runs every configured sampler for every seed. Each sampler writes
/// <output.dir>/<sampler>/{manifest.json, metrics_<seed>.csv, samples_<seed>.bin}.
std::vector<RunManifest> run_experiment(const ExperimentConfig& cfg);

/// Runs one sampler for one seed and returns its metric trace without
/// touching the filesystem.
struct RunResult {
  std::vector<metrics::MetricsRecord> records;
  Matrix final_samples;
  std::string status = "ok";
  std::optional<std::uint64_t> failed_iteration;
  std::uint64_t failed_steps = 0;
  std::string message;
};
RunResult run_single(const ExperimentConfig& cfg, const NamedSampler& sampler, std::uint64_t seed);

/// CSV with the documented header; absent metrics are empty fields.
std::vector<std::string> csv_header(std::size_t modes);
std::string metrics_csv(const std::vector<metrics::MetricsRecord>& records, std::size_t modes, bool wall_clock);

struct MetricsTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::optional<double>>> rows;

  std::optional<std::size_t> column(const std::string& name) const;
  std::vector<std::optional<double>> values(const std::string& name) const;
};
MetricsTable read_metrics_csv(const std::filesystem::path& path);

struct SummaryRow {
  std::string method;
  std::uint64_t iteration = 0;
  std::vector<std::optional<double>> mean;
  std::vector<std::optional<double>> stddev;
};

struct Summary {
  std::vector<std::string> metrics;
  std::vector<SummaryRow> rows;

  std::string to_csv() const;
  /// Row for (method, iteration), if present.
  const SummaryRow* find(const std::string& method, std::uint64_t iteration) const;
  std::optional<std::size_t> metric(const std::string& name) const;
};

/// Aligns per-iteration mean and sample std across seeds for each manifest.
/// Throws ConfigError when the manifests' metric cadences or columns differ.
Summary compare_runs(const std::vector<RunManifest>& manifests);

}  // namespace sifg::runner
