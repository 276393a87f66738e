// Python bindings. Point sets cross the boundary as (n, d) arrays, one point
// per row; the core stores them as d x n.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <numeric>

#include "sifg/allocator.hpp"
#include "sifg/flow.hpp"
#include "sifg/metrics.hpp"
#include "sifg/nn.hpp"
#include "sifg/runner.hpp"
#include "sifg/targets.hpp"

namespace py = pybind11;
using namespace sifg;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

Matrix cols(const RowMatrix& rows) { return rows.transpose(); }
RowMatrix rows(const Matrix& cols) { return cols.transpose(); }

// One sampler of an experiment config, stepped from Python.
class Sampler {
 public:
  Sampler(const std::string& config_text, const std::string& name, std::uint64_t seed, const std::string& base_dir)
      : cfg_(runner::parse_config(config_text, base_dir)) {
    auto it = std::find_if(cfg_.samplers.begin(), cfg_.samplers.end(),
                           [&](const runner::NamedSampler& s) { return name.empty() || s.name == name; });
    if (it == cfg_.samplers.end()) throw ConfigError("no sampler named '" + name + "'");
    sampler_ = it->config;
    sampler_.seed = seed;
    built_ = runner::build_target(cfg_.target, seed);
    state_ = flow::init_state(runner::initial_particles(cfg_, seed), sampler_);
  }

  void step(std::uint64_t count) {
    for (std::uint64_t i = 0; i < count; ++i) state_ = flow::step(std::move(state_), *built_.target, sampler_);
  }

  RowMatrix particles() const { return rows(state_.ensemble.particles); }
  RowMatrix samples() const { return rows(flow::final_samples(state_, sampler_)); }
  double sigma() const { return state_.sigma; }
  std::uint64_t iteration() const { return state_.iteration; }
  std::uint64_t failed_steps() const { return state_.failed_steps; }
  double grad_norm() const { return flow::velocity_diag(state_, *built_.target, sampler_); }
  std::string method() const { return flow::to_string(sampler_.method); }

 private:
  runner::ExperimentConfig cfg_;
  flow::SamplerConfig sampler_;
  runner::BuiltTarget built_;
  flow::SamplerState state_;
};

py::dict records_to_dict(const std::vector<metrics::MetricsRecord>& records) {
  auto column = [&](auto get) {
    std::vector<double> out;
    for (const auto& r : records) out.push_back(get(r));
    return out;
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  py::dict d;
  d["iteration"] = column([](const auto& r) { return static_cast<double>(r.iteration); });
  d["kl"] = column([&](const auto& r) { return r.kl_estimate.value_or(nan); });
  d["amari"] = column([&](const auto& r) { return r.amari.value_or(nan); });
  for (int alpha : {2, 4, 5}) {
    d[py::str("m" + std::to_string(alpha))] = column([&](const auto& r) {
      auto it = r.moments.find(alpha);
      return it == r.moments.end() ? nan : it->second;
    });
  }
  d["grad_norm"] = column([&](const auto& r) { return r.grad_norm_diag.value_or(nan); });
  d["sigma"] = column([&](const auto& r) { return r.sigma.value_or(nan); });
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  keep_heap_mapped();
  m.doc() = "Semi-implicit functional gradient flow samplers and baselines";
  m.attr("__version__") = runner::kCodeVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  // targets
  m.def(
      "gmm_logp_score",
      [](const Vector& weights, const RowMatrix& means, const Vector& stds, const Vector& x) {
        targets::GaussianMixture gm{weights, cols(means), stds};
        gm.validate();
        const auto r = targets::gmm_logp_score(gm, x);
        return py::make_tuple(r.logp, r.score);
      },
      py::arg("weights"), py::arg("means"), py::arg("stds"), py::arg("x"),
      "Log density and score of an isotropic Gaussian mixture; means is (m, d).");
  m.def(
      "monomial_gamma_logp_score",
      [](const Vector& x) {
        const auto r = targets::monomial_gamma_logp_score(x);
        return py::make_tuple(r.logp, r.score);
      },
      py::arg("x"));
  m.def(
      "ica_logp_score",
      [](const RowMatrix& observations, const Matrix& w, double prior_var) {
        targets::IcaModel model{cols(observations), prior_var, 0};
        std::vector<std::size_t> batch(model.n_obs());
        std::iota(batch.begin(), batch.end(), std::size_t{0});
        const auto r = targets::ica_logp_score(model, w, batch);
        return py::make_tuple(r.logp, r.score);
      },
      py::arg("observations"), py::arg("w"), py::arg("prior_var") = 100.0,
      "Full-batch ICA posterior log density and score; observations is (n_obs, d).");
  m.def(
      "ica_synthesize",
      [](std::size_t d, std::size_t n_obs, std::uint64_t seed) {
        const auto data = targets::ica_synthesize(d, n_obs, seed);
        return py::make_tuple(rows(data.model.observations), data.w_true);
      },
      py::arg("d"), py::arg("n_obs"), py::arg("seed"), "Returns (observations (n_obs, d), w_true).");
  m.def("analytic_smoothed_gaussian_score", &targets::analytic_smoothed_gaussian_score, py::arg("m"), py::arg("s2"),
        py::arg("sigma"), py::arg("x"));

  // metrics
  m.def(
      "knn_kl", [](const RowMatrix& p, const RowMatrix& q, int k) { return metrics::knn_kl(cols(p), cols(q), k); },
      py::arg("samples_p"), py::arg("samples_q"), py::arg("k") = 5);
  m.def("amari_distance", &metrics::amari_distance, py::arg("w_est"), py::arg("w_true"));
  m.def(
      "moment", [](const RowMatrix& x, double alpha) { return metrics::moment(cols(x), alpha); }, py::arg("particles"),
      py::arg("alpha"));
  m.def(
      "mode_coverage",
      [](const RowMatrix& samples, const RowMatrix& means, const Vector& stds, double radius) {
        return metrics::mode_coverage(cols(samples), cols(means), stds, radius);
      },
      py::arg("samples"), py::arg("means"), py::arg("stds"), py::arg("radius_mult") = 3.0);

  // nn
  py::class_<nn::ScoreNet>(m, "ScoreNet")
      .def(py::init([](const std::vector<int>& dims, const std::string& activation, double slope, std::uint64_t seed) {
             if (activation != "tanh" && activation != "leaky_relu") {
               throw ConfigError("activation must be 'tanh' or 'leaky_relu'");
             }
             const auto act = activation == "tanh" ? nn::Activation::make_tanh() : nn::Activation::make_leaky_relu(slope);
             return nn::net_init(dims, act, seed);
           }),
           py::arg("layer_dims"), py::arg("activation") = "tanh", py::arg("slope") = 0.01, py::arg("seed") = 0)
      .def_property_readonly("layer_dims", &nn::ScoreNet::layer_dims)
      .def_property_readonly("parameter_count", &nn::ScoreNet::parameter_count)
      .def_property(
          "params", [](const nn::ScoreNet& n) { return n.params.flatten(); },
          [](nn::ScoreNet& n, const Vector& flat) {
            if (flat.size() != static_cast<Eigen::Index>(n.parameter_count())) throw ConfigError("wrong parameter count");
            n.params.assign_flat(flat);
          })
      .def("forward", [](const nn::ScoreNet& n, const RowMatrix& x) { return rows(nn::net_forward_batch(n, cols(x))); })
      .def(
          "dsm_loss_and_grad",
          [](const nn::ScoreNet& n, const RowMatrix& x, const RowMatrix& z, double sigma) {
            const auto lg = nn::dsm_loss_and_grad(n, cols(x), cols(z), sigma);
            return py::make_tuple(lg.loss, lg.grads.flatten());
          },
          py::arg("x"), py::arg("z"), py::arg("sigma"), "Denoising score matching loss and flat parameter gradient.");

  // flow
  m.def(
      "svgd_velocity",
      [](const RowMatrix& x, const RowMatrix& scores, std::optional<double> bandwidth) {
        const Matrix xc = cols(x);
        return rows(flow::svgd_velocity(xc, cols(scores), bandwidth.value_or(flow::median_bandwidth(xc))));
      },
      py::arg("particles"), py::arg("scores"), py::arg("bandwidth") = py::none(),
      "SVGD velocity; the bandwidth defaults to the median heuristic.");
  m.def(
      "median_bandwidth", [](const RowMatrix& x) { return flow::median_bandwidth(cols(x)); }, py::arg("particles"));

  py::class_<Sampler>(m, "Sampler")
      .def(py::init<const std::string&, const std::string&, std::uint64_t, const std::string&>(), py::arg("config"),
           py::arg("name") = "", py::arg("seed") = 0, py::arg("base_dir") = "",
           "Builds one sampler of an experiment config given as JSON text; name defaults to the first sampler.")
      .def("step", &Sampler::step, py::arg("count") = 1, py::call_guard<py::gil_scoped_release>())
      .def_property_readonly("particles", &Sampler::particles)
      .def_property_readonly("samples", &Sampler::samples)
      .def_property_readonly("sigma", &Sampler::sigma)
      .def_property_readonly("iteration", &Sampler::iteration)
      .def_property_readonly("failed_steps", &Sampler::failed_steps)
      .def_property_readonly("method", &Sampler::method)
      .def("grad_norm", &Sampler::grad_norm);

  // runner
  m.def(
      "run_single",
      [](const std::string& config_text, const std::string& name, std::uint64_t seed, const std::string& base_dir) {
        const auto cfg = runner::parse_config(config_text, base_dir);
        for (const auto& s : cfg.samplers) {
          if (!name.empty() && s.name != name) continue;
          runner::RunResult r;
          {
            py::gil_scoped_release release;
            r = runner::run_single(cfg, s, seed);
          }
          py::dict out = records_to_dict(r.records);
          out["final_samples"] = rows(r.final_samples);
          out["status"] = r.status;
          out["failed_steps"] = r.failed_steps;
          return out;
        }
        throw ConfigError("no sampler named '" + name + "'");
      },
      py::arg("config"), py::arg("name") = "", py::arg("seed") = 0, py::arg("base_dir") = "",
      "Runs one sampler for one seed in memory and returns its metric columns.");
  m.def(
      "run_experiment",
      [](const std::filesystem::path& config_path, std::optional<std::filesystem::path> out_dir) {
        auto cfg = runner::load_config(config_path);
        if (out_dir) cfg.output.dir = *out_dir;
        std::vector<std::filesystem::path> manifests;
        {
          py::gil_scoped_release release;
          for (const auto& man : runner::run_experiment(cfg)) manifests.push_back(man.path);
        }
        return manifests;
      },
      py::arg("config_path"), py::arg("out_dir") = py::none(), "Runs a config file and returns the manifest paths.");
  m.def(
      "compare",
      [](const std::vector<std::filesystem::path>& manifests) {
        std::vector<runner::RunManifest> loaded;
        for (const auto& p : manifests) loaded.push_back(runner::load_manifest(p));
        return runner::compare_runs(loaded).to_csv();
      },
      py::arg("manifests"), "Across-seed summary CSV text for the given manifests.");
}
