#include <string>

#include "sifg/binary_io.hpp"
#include "sifg/flow.hpp"

namespace sifg::flow {

namespace {

std::string optimizer_name(nn::OptimizerKind k) {
  switch (k) {
    case nn::OptimizerKind::sgd: return "sgd";
    case nn::OptimizerKind::sgd_momentum: return "sgd_momentum";
    case nn::OptimizerKind::adam: return "adam";
  }
  return "sgd";
}

nn::OptimizerKind optimizer_kind(const std::string& s) {
  if (s == "sgd") return nn::OptimizerKind::sgd;
  if (s == "sgd_momentum") return nn::OptimizerKind::sgd_momentum;
  if (s == "adam") return nn::OptimizerKind::adam;
  throw std::runtime_error("checkpoint: unknown optimizer '" + s + "'");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const SamplerState& state, const SamplerConfig& cfg) {
  const Vector net_flat = state.net.params.flatten();
  const Vector first = state.opt.first.flatten();
  const Vector second = state.opt.second.flatten();
  const auto& z = state.ensemble.particles;

  nlohmann::json header = {
      {"format", "sifg-checkpoint"},
      {"version", 1},
      {"method", to_string(cfg.method)},
      {"n", z.cols()},
      {"d", z.rows()},
      {"sigma", state.sigma},
      {"iteration", state.iteration},
      {"failed_steps", state.failed_steps},
      {"consecutive_failures", state.consecutive_failures},
      {"particle_steps", state.particle_steps},
      {"endianness", "little"},
      {"dtype", "f64"},
  };
  header["net"] = {{"layer_dims", state.net.layer_dims()},
                   {"activation", state.net.activation.kind == nn::ActivationKind::tanh ? "tanh" : "leaky_relu"},
                   {"slope", state.net.activation.slope}};
  const auto& spec = state.opt.spec;
  header["optimizer"] = {{"kind", optimizer_name(spec.kind)}, {"momentum", spec.momentum},
                         {"nesterov", spec.nesterov},        {"beta1", spec.beta1},
                         {"beta2", spec.beta2},              {"epsilon", spec.epsilon},
                         {"step_count", state.opt.step_count}};
  header["blocks"] = nlohmann::json::array({
      {{"name", "particles"}, {"count", z.size()}},
      {{"name", "net"}, {"count", net_flat.size()}},
      {{"name", "optimizer_first"}, {"count", first.size()}},
      {{"name", "optimizer_second"}, {"count", second.size()}},
  });
  std::vector<std::span<const double>> blocks = {
      {z.data(), static_cast<std::size_t>(z.size())},
      {net_flat.data(), static_cast<std::size_t>(net_flat.size())},
      {first.data(), static_cast<std::size_t>(first.size())},
      {second.data(), static_cast<std::size_t>(second.size())},
  };
  if (state.particle_m.size() > 0) {
    header["blocks"].push_back({{"name", "particle_first"}, {"count", state.particle_m.size()}});
    header["blocks"].push_back({{"name", "particle_second"}, {"count", state.particle_v.size()}});
    blocks.emplace_back(state.particle_m.data(), static_cast<std::size_t>(state.particle_m.size()));
    blocks.emplace_back(state.particle_v.data(), static_cast<std::size_t>(state.particle_v.size()));
  }
  io::write_framed(path, header, blocks);
}

SamplerState load_checkpoint(const std::filesystem::path& path) {
  const io::Framed f = io::read_framed(path);
  const auto& h = f.header;
  if (h.value("format", "") != "sifg-checkpoint") throw std::runtime_error(path.string() + ": not a checkpoint");

  SamplerState state;
  const auto n = h.at("n").get<Eigen::Index>();
  const auto d = h.at("d").get<Eigen::Index>();
  state.sigma = h.at("sigma").get<double>();
  state.iteration = h.at("iteration").get<std::uint64_t>();
  state.failed_steps = h.at("failed_steps").get<std::uint64_t>();
  state.consecutive_failures = h.at("consecutive_failures").get<std::uint64_t>();
  state.particle_steps = h.value("particle_steps", std::uint64_t{0});

  const auto dims = h.at("net").at("layer_dims").get<std::vector<int>>();
  if (!dims.empty()) {
    const nn::Activation act = h.at("net").at("activation").get<std::string>() == "tanh"
                                   ? nn::Activation::make_tanh()
                                   : nn::Activation::make_leaky_relu(h.at("net").at("slope").get<double>());
    state.net = nn::net_init(dims, act, 0);
  }
  const auto& o = h.at("optimizer");
  nn::OptimizerSpec spec;
  spec.kind = optimizer_kind(o.at("kind").get<std::string>());
  spec.momentum = o.at("momentum").get<double>();
  spec.nesterov = o.at("nesterov").get<bool>();
  spec.beta1 = o.at("beta1").get<double>();
  spec.beta2 = o.at("beta2").get<double>();
  spec.epsilon = o.at("epsilon").get<double>();
  state.opt = dims.empty() ? nn::OptimizerState{spec, {}, {}, 0} : nn::optimizer_init(spec, state.net);
  state.opt.step_count = o.at("step_count").get<std::uint64_t>();

  std::size_t at = 0;
  auto take = [&](std::size_t count) {
    if (at + count > f.payload.size()) throw std::runtime_error(path.string() + ": truncated checkpoint");
    Vector v = Eigen::Map<const Vector>(f.payload.data() + at, static_cast<Eigen::Index>(count));
    at += count;
    return v;
  };
  for (const auto& block : h.at("blocks")) {
    const auto name = block.at("name").get<std::string>();
    const Vector v = take(block.at("count").get<std::size_t>());
    if (name == "particles") {
      state.ensemble.particles = v.reshaped(d, n);
    } else if (name == "net") {
      if (v.size() > 0) state.net.params.assign_flat(v);
    } else if (name == "optimizer_first") {
      if (v.size() > 0) state.opt.first.assign_flat(v);
    } else if (name == "optimizer_second") {
      if (v.size() > 0) state.opt.second.assign_flat(v);
    } else if (name == "particle_first") {
      state.particle_m = v.reshaped(d, n);
    } else if (name == "particle_second") {
      state.particle_v = v.reshaped(d, n);
    }
  }
  if (at != f.payload.size()) throw std::runtime_error(path.string() + ": trailing bytes in checkpoint");
  return state;
}

}  // namespace sifg::flow
