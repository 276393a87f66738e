#include <fstream>
#include <set>
#include <sstream>

#include "sifg/runner.hpp"

namespace sifg::runner {

using nlohmann::json;

namespace {

// Strict view of one JSON object: every key must be read, and every error
// names the dotted field path.
class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    if (!has(key)) throw ConfigError("missing required field " + field(key));
    used_.insert(key);
    return j_.at(key);
  }

  template <class T>
  T req(const std::string& key) {
    return convert<T>(raw(key), key);
  }

  template <class T>
  T opt(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return req<T>(key);
  }

  FieldReader child(const std::string& key) { return FieldReader(raw(key), field(key)); }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) throw ConfigError("unknown key " + field(item.key()));
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(field(key) + ": " + msg);
  }

 private:
  template <class T>
  T convert(const json& v, const std::string& key) const {
    try {
      if constexpr (std::is_same_v<T, std::uint64_t> || std::is_same_v<T, std::size_t>) {
        if (!v.is_number_integer() || v.get<long long>() < 0) fail(key, "must be a non-negative integer");
      }
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) fail(key, "must be a number");
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      fail(key, std::string("wrong type (") + e.what() + ")");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

Vector to_vector(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())); }

std::vector<double> from_vector(const Vector& v) { return {v.data(), v.data() + v.size()}; }

nn::Activation parse_activation(FieldReader& r) {
  const auto name = r.opt<std::string>("activation", "tanh");
  if (name == "tanh") return nn::Activation::make_tanh();
  if (name == "leaky_relu") return nn::Activation::make_leaky_relu(r.opt<double>("leaky_slope", 0.1));
  r.fail("activation", "expected 'tanh' or 'leaky_relu'");
}

nn::OptimizerSpec parse_optimizer(FieldReader r) {
  nn::OptimizerSpec spec;
  const auto kind = r.opt<std::string>("kind", "sgd");
  if (kind == "sgd") {
    spec.kind = nn::OptimizerKind::sgd;
  } else if (kind == "sgd_momentum") {
    spec.kind = nn::OptimizerKind::sgd_momentum;
  } else if (kind == "adam") {
    spec.kind = nn::OptimizerKind::adam;
  } else {
    r.fail("kind", "expected 'sgd', 'sgd_momentum' or 'adam'");
  }
  spec.momentum = r.opt<double>("momentum", spec.momentum);
  spec.nesterov = r.opt<bool>("nesterov", spec.nesterov);
  spec.beta1 = r.opt<double>("beta1", spec.beta1);
  spec.beta2 = r.opt<double>("beta2", spec.beta2);
  spec.epsilon = r.opt<double>("epsilon", spec.epsilon);
  if (spec.momentum < 0.0 || spec.momentum >= 1.0) r.fail("momentum", "must lie in [0, 1)");
  if (spec.beta1 < 0.0 || spec.beta1 >= 1.0) r.fail("beta1", "must lie in [0, 1)");
  if (spec.beta2 < 0.0 || spec.beta2 >= 1.0) r.fail("beta2", "must lie in [0, 1)");
  if (!(spec.epsilon > 0.0)) r.fail("epsilon", "must be > 0");
  r.finish();
  return spec;
}

flow::SamplerConfig parse_sampler(FieldReader r) {
  flow::SamplerConfig c;
  c.method = flow::method_from_string(r.req<std::string>("method"));
  const bool semi_implicit = c.method == flow::Method::sifg || c.method == flow::Method::adasifg;

  c.h = r.req<double>("h");
  if (!(c.h > 0.0)) r.fail("h", "h must be > 0");
  c.outer_iterations = r.req<std::uint64_t>("outer_iterations");

  if (semi_implicit) {
    const auto score = r.opt<std::string>("score", "network");
    if (score == "network") {
      c.score_mode = flow::ScoreMode::network;
    } else if (score == "gaussian_oracle") {
      c.score_mode = flow::ScoreMode::gaussian_oracle;
    } else {
      r.fail("score", "expected 'network' or 'gaussian_oracle'");
    }
    c.sigma0 = r.req<double>("sigma0");
    if (!(c.sigma0 > 0.0)) r.fail("sigma0", "sigma0 must be > 0");
    const auto sign = r.opt<std::string>("dsm_sign", "derivation");
    if (sign == "derivation") {
      c.dsm_sign = nn::DsmSign::derivation;
    } else if (sign == "literal") {
      c.dsm_sign = nn::DsmSign::literal;
    } else {
      r.fail("dsm_sign", "expected 'derivation' or 'literal'");
    }
  }
  const bool uses_net = c.method == flow::Method::l2gf || (semi_implicit && c.score_mode == flow::ScoreMode::network);
  if (uses_net) {
    c.inner_iterations = r.req<std::uint64_t>("inner_iterations");
    c.eta = r.req<double>("eta");
    if (!(c.eta > 0.0)) r.fail("eta", "eta must be > 0");
    c.warm_start = r.opt<bool>("warm_start", true);
    c.batch_size = r.opt<std::size_t>("batch_size", 0);
    if (r.has("net")) {
      FieldReader n = r.child("net");
      c.net.hidden = n.opt<std::vector<int>>("hidden", c.net.hidden);
      for (int w : c.net.hidden) {
        if (w <= 0) n.fail("hidden", "widths must be positive");
      }
      c.net.activation = parse_activation(n);
      n.finish();
    }
    if (r.has("optimizer")) c.optimizer = parse_optimizer(r.child("optimizer"));
  }
  if (c.method == flow::Method::adasifg) {
    c.eta_sigma = r.req<double>("eta_sigma");
    if (c.eta_sigma < 0.0) r.fail("eta_sigma", "eta_sigma must be >= 0");
    c.lb = r.req<double>("lb");
    c.ub = r.req<double>("ub");
  } else if (semi_implicit) {
    c.lb = r.opt<double>("lb", c.lb);
    c.ub = r.opt<double>("ub", c.ub);
  }
  if (semi_implicit) {
    if (!(c.lb > 0.0)) r.fail("lb", "lb must be > 0");
    if (!(c.ub < 1.0)) r.fail("ub", "ub must be < 1");
    if (c.lb > c.ub) r.fail("lb", "lb must be <= ub");
    if (c.method == flow::Method::adasifg && (c.sigma0 < c.lb || c.sigma0 > c.ub)) {
      r.fail("sigma0", "sigma0 must lie in [lb, ub]");
    }
  }
  if (c.method == flow::Method::svgd && r.has("svgd_bandwidth")) {
    const json& bw = r.raw("svgd_bandwidth");
    if (bw.is_string() && bw.get<std::string>() == "median_heuristic") {
      c.svgd_median_bandwidth = true;
    } else if (bw.is_number() && bw.get<double>() > 0.0) {
      c.svgd_median_bandwidth = false;
      c.svgd_fixed_bandwidth = bw.get<double>();
    } else {
      r.fail("svgd_bandwidth", "expected 'median_heuristic' or a positive number");
    }
  }
  if (c.method == flow::Method::l2gf && r.has("particle_update")) {
    const std::string u = r.opt<std::string>("particle_update", "euler");
    if (u == "euler") {
      c.particle_update = flow::ParticleUpdate::euler;
    } else if (u == "adam") {
      c.particle_update = flow::ParticleUpdate::adam;
    } else {
      r.fail("particle_update", "expected 'euler' or 'adam'");
    }
  }
  c.max_consecutive_failures = r.opt<std::size_t>("max_consecutive_failures", c.max_consecutive_failures);
  r.finish();
  return c;
}

json sampler_to_json(const flow::SamplerConfig& c) {
  const bool semi_implicit = c.method == flow::Method::sifg || c.method == flow::Method::adasifg;
  const bool uses_net = c.method == flow::Method::l2gf || (semi_implicit && c.score_mode == flow::ScoreMode::network);
  json j = {{"method", flow::to_string(c.method)},
            {"h", c.h},
            {"outer_iterations", c.outer_iterations},
            {"max_consecutive_failures", c.max_consecutive_failures}};
  if (semi_implicit) {
    j["score"] = c.score_mode == flow::ScoreMode::network ? "network" : "gaussian_oracle";
    j["sigma0"] = c.sigma0;
    j["dsm_sign"] = c.dsm_sign == nn::DsmSign::derivation ? "derivation" : "literal";
    j["lb"] = c.lb;
    j["ub"] = c.ub;
  }
  if (c.method == flow::Method::adasifg) j["eta_sigma"] = c.eta_sigma;
  if (uses_net) {
    j["inner_iterations"] = c.inner_iterations;
    j["eta"] = c.eta;
    j["warm_start"] = c.warm_start;
    j["batch_size"] = c.batch_size;
    json net = {{"hidden", c.net.hidden},
                {"activation", c.net.activation.kind == nn::ActivationKind::tanh ? "tanh" : "leaky_relu"}};
    if (c.net.activation.kind == nn::ActivationKind::leaky_relu) net["leaky_slope"] = c.net.activation.slope;
    j["net"] = net;
    const char* kinds[] = {"sgd", "sgd_momentum", "adam"};
    j["optimizer"] = {{"kind", kinds[static_cast<int>(c.optimizer.kind)]},
                      {"momentum", c.optimizer.momentum},
                      {"nesterov", c.optimizer.nesterov},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"epsilon", c.optimizer.epsilon}};
  }
  if (c.method == flow::Method::l2gf) {
    j["particle_update"] = c.particle_update == flow::ParticleUpdate::adam ? "adam" : "euler";
  }
  if (c.method == flow::Method::svgd) {
    j["svgd_bandwidth"] = c.svgd_median_bandwidth ? json("median_heuristic") : json(c.svgd_fixed_bandwidth);
  }
  return j;
}

TargetSpec parse_target(FieldReader r, const std::filesystem::path& base_dir) {
  TargetSpec t;
  t.kind = r.req<std::string>("kind");
  if (t.kind == "gaussian_mixture") {
    const auto means = r.req<std::vector<std::vector<double>>>("means");
    const auto stds = r.req<std::vector<double>>("stds");
    const auto weights = r.req<std::vector<double>>("weights");
    if (means.empty()) r.fail("means", "needs at least one component");
    const std::size_t d = means.front().size();
    t.mixture.means.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(means.size()));
    for (std::size_t j = 0; j < means.size(); ++j) {
      if (means[j].size() != d || d == 0) r.fail("means", "every mean must have the same nonzero length");
      t.mixture.means.col(static_cast<Eigen::Index>(j)) = to_vector(means[j]);
    }
    t.mixture.stds = to_vector(stds);
    t.mixture.weights = to_vector(weights);
    try {
      t.mixture.validate();
    } catch (const ConfigError& e) {
      r.fail("means", e.what());
    }
  } else if (t.kind == "monomial_gamma") {
    t.dim = r.req<std::size_t>("dim");
    if (t.dim == 0) r.fail("dim", "must be >= 1");
  } else if (t.kind == "bayesian_ica") {
    if (r.has("dataset") == r.has("synthetic")) {
      throw ConfigError(r.where() + ": exactly one of dataset or synthetic is required");
    }
    if (r.has("dataset")) {
      std::filesystem::path p = r.req<std::string>("dataset");
      t.dataset = p.is_relative() ? base_dir / p : p;
    } else {
      FieldReader s = r.child("synthetic");
      SyntheticIcaSpec syn;
      syn.d = s.req<std::size_t>("d");
      syn.n_obs = s.req<std::size_t>("n_obs");
      syn.seed = s.req<std::uint64_t>("seed");
      if (syn.d < 1) s.fail("d", "must be >= 1");
      if (syn.n_obs < 1) s.fail("n_obs", "must be >= 1");
      s.finish();
      t.synthetic = syn;
    }
    t.prior_var = r.opt<double>("prior_var", 100.0);
    if (!(t.prior_var > 0.0)) r.fail("prior_var", "must be > 0");
    t.minibatch_size = r.opt<std::size_t>("minibatch_size", 0);
  } else if (t.kind == "analytic_gaussian") {
    t.mean = to_vector(r.req<std::vector<double>>("mean"));
    t.var = r.req<double>("var");
    if (t.mean.size() == 0) r.fail("mean", "must be nonempty");
    if (!(t.var > 0.0)) r.fail("var", "must be > 0");
  } else {
    r.fail("kind", "unknown target kind '" + t.kind + "'");
  }
  r.finish();
  return t;
}

json target_to_json(const TargetSpec& t) {
  json j = {{"kind", t.kind}};
  if (t.kind == "gaussian_mixture") {
    std::vector<std::vector<double>> means;
    for (Eigen::Index c = 0; c < t.mixture.means.cols(); ++c) means.push_back(from_vector(t.mixture.means.col(c)));
    j["weights"] = from_vector(t.mixture.weights);
    j["means"] = means;
    j["stds"] = from_vector(t.mixture.stds);
  } else if (t.kind == "monomial_gamma") {
    j["dim"] = t.dim;
  } else if (t.kind == "bayesian_ica") {
    if (t.dataset) j["dataset"] = t.dataset->string();
    if (t.synthetic) j["synthetic"] = {{"d", t.synthetic->d}, {"n_obs", t.synthetic->n_obs}, {"seed", t.synthetic->seed}};
    j["prior_var"] = t.prior_var;
    j["minibatch_size"] = t.minibatch_size;
  } else if (t.kind == "analytic_gaussian") {
    j["mean"] = from_vector(t.mean);
    j["var"] = t.var;
  }
  return j;
}

}  // namespace

std::size_t particle_dim(const TargetSpec& spec) {
  if (spec.kind == "gaussian_mixture") return spec.mixture.dim();
  if (spec.kind == "monomial_gamma") return spec.dim;
  if (spec.kind == "analytic_gaussian") return static_cast<std::size_t>(spec.mean.size());
  if (spec.kind == "bayesian_ica") {
    std::size_t d = 0;
    if (spec.synthetic) {
      d = spec.synthetic->d;
    } else {
      std::ifstream in(*spec.dataset);
      if (!in) throw ConfigError("target.dataset: cannot open " + spec.dataset->string());
      d = json::parse(in).at("d").get<std::size_t>();
    }
    return d * d;
  }
  throw ConfigError("unknown target kind '" + spec.kind + "'");
}

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  FieldReader root(doc, "");
  ExperimentConfig cfg;
  cfg.name = root.opt<std::string>("name", "experiment");
  cfg.target = parse_target(root.child("target"), base_dir);
  const std::size_t d = particle_dim(cfg.target);

  if (root.has("sampler") && root.has("samplers")) throw ConfigError("config: give either sampler or samplers, not both");
  if (root.has("sampler")) {
    auto c = parse_sampler(root.child("sampler"));
    cfg.samplers.push_back({flow::to_string(c.method), c});
  } else {
    FieldReader all = root.child("samplers");
    for (const auto& item : root.raw("samplers").items()) {
      cfg.samplers.push_back({item.key(), parse_sampler(all.child(item.key()))});
    }
    if (cfg.samplers.empty()) throw ConfigError("samplers: at least one sampler is required");
  }
  for (const auto& s : cfg.samplers) {
    if (s.config.method == flow::Method::l2gf && d > static_cast<std::size_t>(flow::kMaxL2gfDim)) {
      throw ConfigError("samplers." + s.name + ": l2gf supports particle dimension <= 64");
    }
  }

  {
    FieldReader p = root.child("particles");
    cfg.n_particles = p.req<std::size_t>("n");
    if (cfg.n_particles < 1) p.fail("n", "must be >= 1");
    FieldReader init = p.child("init");
    if (init.req<std::string>("kind") != "gaussian") init.fail("kind", "only 'gaussian' is supported");
    const json& mean = init.raw("mean");
    if (mean.is_number()) {
      cfg.init.mean = Vector::Constant(static_cast<Eigen::Index>(d), mean.get<double>());
    } else {
      try {
        cfg.init.mean = to_vector(mean.get<std::vector<double>>());
      } catch (const json::exception&) {
        init.fail("mean", "must be a number or an array of numbers");
      }
    }
    if (static_cast<std::size_t>(cfg.init.mean.size()) != d) {
      init.fail("mean", "length must equal the particle dimension " + std::to_string(d));
    }
    cfg.init.var = init.req<double>("var");
    if (!(cfg.init.var >= 0.0)) init.fail("var", "must be >= 0");
    init.finish();
    p.finish();
  }

  if (root.has("metrics")) {
    FieldReader m = root.child("metrics");
    cfg.metrics.kl_every = m.opt<std::uint64_t>("kl_every", 0);
    cfg.metrics.moments_every = m.opt<std::uint64_t>("moments_every", 0);
    cfg.metrics.modes = m.opt<bool>("modes", false);
    cfg.metrics.mode_radius = m.opt<double>("mode_radius", 3.0);
    cfg.metrics.ground_truth_samples = m.opt<std::size_t>("ground_truth_samples", 5000);
    cfg.metrics.knn_k = m.opt<int>("knn_k", 5);
    if (cfg.metrics.knn_k < 1) m.fail("knn_k", "must be >= 1");
    if (!(cfg.metrics.mode_radius > 0.0)) m.fail("mode_radius", "must be > 0");
    const bool exact_samples = cfg.target.kind == "gaussian_mixture" || cfg.target.kind == "monomial_gamma" ||
                               cfg.target.kind == "analytic_gaussian";
    if (cfg.metrics.kl_every > 0 && cfg.target.kind != "bayesian_ica") {
      if (!exact_samples) m.fail("kl_every", "KL needs a target with exact samples");
      if (static_cast<std::size_t>(cfg.metrics.knn_k) >= cfg.n_particles ||
          static_cast<std::size_t>(cfg.metrics.knn_k) >= cfg.metrics.ground_truth_samples) {
        m.fail("knn_k", "must be smaller than the particle and ground-truth sample counts");
      }
    }
    if (cfg.metrics.modes && cfg.target.kind != "gaussian_mixture") m.fail("modes", "needs a gaussian_mixture target");
    m.finish();
  }

  {
    FieldReader o = root.child("output");
    cfg.output.dir = o.req<std::string>("dir");
    if (o.has("formats")) {
      const auto formats = o.req<std::vector<std::string>>("formats");
      cfg.output.csv = cfg.output.samples = false;
      for (const auto& f : formats) {
        if (f == "csv") {
          cfg.output.csv = true;
        } else if (f == "samples") {
          cfg.output.samples = true;
        } else {
          o.fail("formats", "unknown format '" + f + "'");
        }
      }
    }
    cfg.output.wall_clock = o.opt<bool>("wall_clock", true);
    o.finish();
  }

  cfg.seeds = root.req<std::vector<std::uint64_t>>("seeds");
  if (cfg.seeds.empty()) throw ConfigError("seeds must be nonempty");
  root.finish();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.parent_path());
}

json to_json(const ExperimentConfig& cfg) {
  json samplers = json::object();
  for (const auto& s : cfg.samplers) samplers[s.name] = sampler_to_json(s.config);
  std::vector<std::string> formats;
  if (cfg.output.csv) formats.emplace_back("csv");
  if (cfg.output.samples) formats.emplace_back("samples");
  return {
      {"name", cfg.name},
      {"target", target_to_json(cfg.target)},
      {"samplers", samplers},
      {"particles", {{"n", cfg.n_particles}, {"init", {{"kind", "gaussian"}, {"mean", from_vector(cfg.init.mean)}, {"var", cfg.init.var}}}}},
      {"metrics",
       {{"kl_every", cfg.metrics.kl_every},
        {"moments_every", cfg.metrics.moments_every},
        {"modes", cfg.metrics.modes},
        {"mode_radius", cfg.metrics.mode_radius},
        {"ground_truth_samples", cfg.metrics.ground_truth_samples},
        {"knn_k", cfg.metrics.knn_k}}},
      {"output", {{"dir", cfg.output.dir.string()}, {"formats", formats}, {"wall_clock", cfg.output.wall_clock}}},
      {"seeds", cfg.seeds},
  };
}

}  // namespace sifg::runner
