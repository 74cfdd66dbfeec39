#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "roadnav/detection.hpp"

namespace roadnav {

enum class PositionalEncoding { Sinusoidal, Learned };
enum class Pooling { Flatten, Mean };

/// Shape of the window autoencoder. Defaults reproduce the full-size model:
/// 64-frame windows over 15 classes, six 5-head encoder layers, a 512/256/128
/// reduction to a scalar latent, and 8- and 32-unit decoder hidden layers.
struct ModelConfig {
  std::size_t s = 64;
  std::size_t n = 15;
  std::size_t n_layers = 6;
  std::size_t n_heads = 5;
  std::vector<std::size_t> encoder_fc_dims = {512, 256, 128};
  std::size_t class_hidden = 8;
  std::size_t bbox_hidden = 32;
  std::size_t ffn_dim = 0;  // 0 selects 4 * token_dim
  double dropout = 0.0;     // applied to the reduction layers during training only
  PositionalEncoding positional = PositionalEncoding::Sinusoidal;
  Pooling pooling = Pooling::Flatten;

  std::size_t token_dim() const { return 5 * n; }
  std::size_t head_dim() const { return token_dim() / n_heads; }
  std::size_t ffn() const { return ffn_dim == 0 ? 4 * token_dim() : ffn_dim; }
  std::size_t pooled_dim() const { return pooling == Pooling::Flatten ? s * token_dim() : token_dim(); }

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// One named tensor inside the flat parameter vector (column-major).
struct ParamBlock {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

/// Block indices of one transformer layer.
struct LayerSlots {
  std::size_t ln1_gain, ln1_bias;
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t ln2_gain, ln2_bias;
  std::size_t ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

/// Deterministic ordering of every tensor in the model. Token-level linear
/// maps are stored (in x out) and applied as X * W; vector layers are stored
/// (out x in) and applied as W * x.
class ParameterLayout {
 public:
  ParameterLayout() = default;
  explicit ParameterLayout(const ModelConfig& config);

  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(std::size_t i) const { return blocks_[i]; }
  std::size_t total() const { return total_; }
  std::size_t find(const std::string& name) const;

  bool learned_positions = false;
  std::size_t positions = 0;
  std::vector<LayerSlots> layers;
  std::vector<std::size_t> fc_w, fc_b;
  std::size_t latent_w = 0, latent_b = 0;
  std::size_t class_w1 = 0, class_b1 = 0, class_w2 = 0, class_b2 = 0;
  std::size_t bbox_w1 = 0, bbox_b1 = 0, bbox_w2 = 0, bbox_b2 = 0;

 private:
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols);

  std::vector<ParamBlock> blocks_;
  std::size_t total_ = 0;
};

struct ModelParameters {
  ModelConfig config;
  ParameterLayout layout;
  std::vector<double> values;

  ModelParameters() = default;
  explicit ModelParameters(ModelConfig cfg);  // all zeros

  /// Uniform fan-in scaled weights: bound 1/sqrt(fan_in) inside the encoder
  /// layers, sqrt(6/fan_in) before a ReLU and sqrt(3/fan_in) elsewhere in the
  /// dense head. Unit norm gains, zero norm offsets.
  static ModelParameters initialize(const ModelConfig& cfg, std::uint64_t seed);

  Eigen::Map<Eigen::MatrixXd> block(std::size_t i);
  Eigen::Map<const Eigen::MatrixXd> block(std::size_t i) const;
  Eigen::Map<Eigen::MatrixXd> block(const std::string& name) { return block(layout.find(name)); }
  Eigen::Map<const Eigen::MatrixXd> block(const std::string& name) const { return block(layout.find(name)); }

  bool all_finite() const;
};

/// Decoder output for the window's last frame.
struct Reconstruction {
  Eigen::VectorXd class_probs;  // n
  Eigen::MatrixXd boxes;        // n x 4, rows (cx, cy, w, h)
};

/// Fixed sinusoidal table, s x d.
Eigen::MatrixXd sinusoidal_positions(std::size_t s, std::size_t d);

/// Raw latent z in (0, 1) for an (s x 5n) token matrix.
double encode(const Eigen::MatrixXd& tokens, const ModelParameters& params);
double encode(const DetectionWindow& window, const ModelParameters& params);
Reconstruction decode(double z, const ModelParameters& params);
std::pair<double, Reconstruction> forward(const Eigen::MatrixXd& tokens, const ModelParameters& params);
std::pair<double, Reconstruction> forward(const DetectionWindow& window, const ModelParameters& params);

}  // namespace roadnav
