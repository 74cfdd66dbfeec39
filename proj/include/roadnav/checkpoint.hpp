#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "roadnav/model.hpp"

namespace roadnav {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trained parameters plus the metadata needed to use them: the anatomy class
/// names in model row order and the latent orientation flag. With the flag
/// set, canonical z = 1 - raw z, so z = 0 is always the path start.
struct Checkpoint {
  ModelParameters params;
  std::vector<std::string> class_names;
  bool orientation_flipped = false;

  double canonical(double raw_z) const { return orientation_flipped ? 1.0 - raw_z : raw_z; }
  /// Canonical z for a token window.
  double locate(const Eigen::MatrixXd& tokens) const { return canonical(encode(tokens, params)); }
  /// Decoder output at a canonical z.
  Reconstruction reconstruct(double canonical_z) const {
    return decode(orientation_flipped ? 1.0 - canonical_z : canonical_z, params);
  }
};

// File layout, all integers little-endian:
//   8 bytes   magic "RNAVCKPT"
//   u32       format version
//   u64       header length, then that many bytes of canonical JSON
//             {"model": ModelConfig, "classes": [...], "orientation_flipped": bool}
//   u64       parameter count, then that many IEEE-754 binary64 values in
//             ParameterLayout order
//   64 bytes  lowercase hex SHA-256 of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);

/// Writes the file and returns its content hash (the checkpoint id).
std::string save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Also checks the class list against a registry's anatomy classes.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ClassRegistry& registry);

std::string checkpoint_hash(const Checkpoint& ckpt);

/// Accepts either an existing file or a prefix to which ".ckpt" is appended.
std::filesystem::path resolve_checkpoint_path(const std::filesystem::path& path);

}  // namespace roadnav
