#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace roadnav {

using Rng = std::mt19937_64;

/// Seed for a named substream of a master seed ("data", "init", "shuffle", ...).
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t index = 0);
inline Rng make_rng(std::uint64_t master, std::string_view stream, std::uint64_t index = 0) {
  return Rng(derive_seed(master, stream, index));
}

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

/// Normal draw that degrades to the mean when sd == 0.
double normal(Rng& rng, double mean, double sd);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace roadnav
