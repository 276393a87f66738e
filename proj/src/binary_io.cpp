#include "sifg/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace sifg::io {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

double byteswap_double(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  bits = __builtin_bswap64(bits);
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace

void write_framed(const std::filesystem::path& path, const nlohmann::json& header,
                  std::span<const std::span<const double>> blocks) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string line = header.dump() + "\n";
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  for (const auto block : blocks) {
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(block.data()),
                static_cast<std::streamsize>(block.size() * sizeof(double)));
    } else {
      for (double v : block) {
        const double le = byteswap_double(v);
        out.write(reinterpret_cast<const char*>(&le), sizeof le);
      }
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Framed read_framed(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": missing header line");
  Framed out;
  out.header = nlohmann::json::parse(line);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % sizeof(double) != 0) throw std::runtime_error(path.string() + ": truncated payload");
  out.payload.resize(bytes.size() / sizeof(double));
  std::memcpy(out.payload.data(), bytes.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (double& v : out.payload) v = byteswap_double(v);
  }
  return out;
}

void write_samples(const std::filesystem::path& path, const Matrix& samples) {
  const nlohmann::json header = {{"n", samples.cols()}, {"d", samples.rows()},
                                 {"endianness", "little"}, {"dtype", "f64"}};
  const std::span<const double> block(samples.data(), static_cast<std::size_t>(samples.size()));
  write_framed(path, header, std::span<const std::span<const double>>(&block, 1));
}

Matrix read_samples(const std::filesystem::path& path) {
  const Framed f = read_framed(path);
  const auto n = f.header.at("n").get<Eigen::Index>();
  const auto d = f.header.at("d").get<Eigen::Index>();
  if (static_cast<Eigen::Index>(f.payload.size()) != n * d) throw std::runtime_error(path.string() + ": size mismatch");
  return Eigen::Map<const Matrix>(f.payload.data(), d, n);
}

}  // namespace sifg::io
