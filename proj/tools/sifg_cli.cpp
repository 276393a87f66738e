#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "sifg/allocator.hpp"
#include "sifg/runner.hpp"
#include "sifg/targets.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

void apply_thread_env() {
  const char* env = std::getenv("SIFG_NUM_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) {
    throw sifg::ConfigError(std::string("SIFG_NUM_THREADS must be a positive integer, got '") + env + "'");
  }
#ifdef _OPENMP
  omp_set_num_threads(static_cast<int>(n));
#endif
}

}  // namespace

int main(int argc, char** argv) {
  sifg::keep_heap_mapped();
  CLI::App app{"Particle samplers driven by learned score differences"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::string out_dir;
  auto* run = app.add_subcommand("run", "Run every sampler in a config for every seed");
  run->add_option("config", config_path, "Experiment config (JSON, comments allowed)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed-override", seed_override, "Replace the config's seed list with this one seed");
  run->add_option("--out", out_dir, "Output directory (overrides output.dir)");

  std::vector<std::string> manifests;
  std::string summary_path;
  auto* compare = app.add_subcommand("compare", "Summarize runs across seeds as mean and std per iteration");
  compare->add_option("manifests", manifests, "manifest.json files")->required()->check(CLI::ExistingFile);
  compare->add_option("--out", summary_path, "Summary CSV")->required();

  std::size_t ica_d = 0, ica_n = 0;
  std::uint64_t ica_seed = 0;
  std::string ica_out;
  auto* synth = app.add_subcommand("synthesize-ica", "Write a synthetic ICA dataset with its mixing matrix");
  synth->add_option("--d", ica_d, "Number of sources")->required()->check(CLI::PositiveNumber);
  synth->add_option("--n", ica_n, "Number of observations")->required()->check(CLI::PositiveNumber);
  synth->add_option("--seed", ica_seed, "Seed")->required();
  synth->add_option("--out", ica_out, "Output path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    apply_thread_env();
    if (*run) {
      auto cfg = sifg::runner::load_config(config_path);
      if (seed_override) cfg.seeds = {*seed_override};
      if (!out_dir.empty()) cfg.output.dir = out_dir;
      for (const auto& m : sifg::runner::run_experiment(cfg)) {
        std::cout << m.path.string() << "\n";
        for (const auto& r : m.runs) {
          if (r.status != "ok") {
            std::cerr << m.sampler << " seed " << r.seed << ": " << r.status << " at iteration "
                      << r.failed_iteration.value_or(0) << ": " << r.message << "\n";
          }
        }
      }
    } else if (*compare) {
      std::vector<sifg::runner::RunManifest> loaded;
      for (const auto& p : manifests) loaded.push_back(sifg::runner::load_manifest(p));
      const auto summary = sifg::runner::compare_runs(loaded);
      std::ofstream out(summary_path, std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write " + summary_path);
      out << summary.to_csv();
    } else if (*synth) {
      const auto data = sifg::targets::ica_synthesize(ica_d, ica_n, ica_seed);
      sifg::runner::write_ica_dataset(ica_out, data, ica_seed);
    }
  } catch (const sifg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
