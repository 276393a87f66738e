#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sifg/types.hpp"

/// Framing shared by checkpoints and sample dumps: a single-line JSON header
/// terminated by '\n', followed by raw little-endian IEEE-754 doubles.
namespace sifg::io {

void write_framed(const std::filesystem::path& path, const nlohmann::json& header,
                  std::span<const std::span<const double>> blocks);

struct Framed {
  nlohmann::json header;
  std::vector<double> payload;
};

Framed read_framed(const std::filesystem::path& path);

/// Samples file: header {n, d, endianness: "little", dtype: "f64"}, then n*d
/// doubles with each sample's coordinates contiguous.
void write_samples(const std::filesystem::path& path, const Matrix& samples);
Matrix read_samples(const std::filesystem::path& path);

}  // namespace sifg::io
