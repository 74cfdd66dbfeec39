#include "roadnav/model.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "roadnav/network.hpp"
#include "roadnav/util.hpp"

namespace roadnav {

void ModelConfig::validate() const {
  if (s == 0 || n == 0 || n_layers == 0 || n_heads == 0 || class_hidden == 0 || bbox_hidden == 0) {
    throw std::invalid_argument("model dimensions must all be >= 1");
  }
  if (token_dim() % n_heads != 0) {
    throw std::invalid_argument("head count " + std::to_string(n_heads) + " does not divide token dim " +
                                std::to_string(token_dim()));
  }
  for (auto dim : encoder_fc_dims) {
    if (dim == 0) throw std::invalid_argument("encoder layer widths must be >= 1");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"s", c.s},
                     {"n", c.n},
                     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"encoder_fc_dims", c.encoder_fc_dims},
                     {"class_hidden", c.class_hidden},
                     {"bbox_hidden", c.bbox_hidden},
                     {"ffn_dim", c.ffn_dim},
                     {"dropout", c.dropout},
                     {"positional", c.positional == PositionalEncoding::Learned ? "learned" : "sinusoidal"},
                     {"pooling", c.pooling == Pooling::Mean ? "mean" : "flatten"}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.s = j.value("s", d.s);
  c.n = j.value("n", d.n);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.encoder_fc_dims = j.value("encoder_fc_dims", d.encoder_fc_dims);
  c.class_hidden = j.value("class_hidden", d.class_hidden);
  c.bbox_hidden = j.value("bbox_hidden", d.bbox_hidden);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.dropout = j.value("dropout", d.dropout);
  const auto pos = j.value("positional", std::string("sinusoidal"));
  if (pos != "sinusoidal" && pos != "learned") throw std::invalid_argument("unknown positional encoding '" + pos + "'");
  c.positional = pos == "learned" ? PositionalEncoding::Learned : PositionalEncoding::Sinusoidal;
  const auto pool = j.value("pooling", std::string("flatten"));
  if (pool != "flatten" && pool != "mean") throw std::invalid_argument("unknown pooling '" + pool + "'");
  c.pooling = pool == "mean" ? Pooling::Mean : Pooling::Flatten;
}

// ---------------------------------------------------------------------------
// ParameterLayout

std::size_t ParameterLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  blocks_.push_back({std::move(name), rows, cols, total_});
  total_ += static_cast<std::size_t>(rows * cols);
  return blocks_.size() - 1;
}

ParameterLayout::ParameterLayout(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<Eigen::Index>(config.token_dim());
  const auto f = static_cast<Eigen::Index>(config.ffn());
  const auto n = static_cast<Eigen::Index>(config.n);

  learned_positions = config.positional == PositionalEncoding::Learned;
  if (learned_positions) positions = add("positions", static_cast<Eigen::Index>(config.s), d);

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerSlots S{};
    S.ln1_gain = add(p + "norm1.gain", 1, d);
    S.ln1_bias = add(p + "norm1.bias", 1, d);
    S.wq = add(p + "attn.wq", d, d);
    S.bq = add(p + "attn.bq", 1, d);
    S.wk = add(p + "attn.wk", d, d);
    S.bk = add(p + "attn.bk", 1, d);
    S.wv = add(p + "attn.wv", d, d);
    S.bv = add(p + "attn.bv", 1, d);
    S.wo = add(p + "attn.wo", d, d);
    S.bo = add(p + "attn.bo", 1, d);
    S.ln2_gain = add(p + "norm2.gain", 1, d);
    S.ln2_bias = add(p + "norm2.bias", 1, d);
    S.ffn_w1 = add(p + "ffn.w1", d, f);
    S.ffn_b1 = add(p + "ffn.b1", 1, f);
    S.ffn_w2 = add(p + "ffn.w2", f, d);
    S.ffn_b2 = add(p + "ffn.b2", 1, d);
    layers.push_back(S);
  }

  auto in = static_cast<Eigen::Index>(config.pooled_dim());
  for (std::size_t k = 0; k < config.encoder_fc_dims.size(); ++k) {
    const auto out = static_cast<Eigen::Index>(config.encoder_fc_dims[k]);
    fc_w.push_back(add("reduce" + std::to_string(k) + ".weight", out, in));
    fc_b.push_back(add("reduce" + std::to_string(k) + ".bias", out, 1));
    in = out;
  }
  latent_w = add("latent.weight", 1, in);
  latent_b = add("latent.bias", 1, 1);

  const auto ch = static_cast<Eigen::Index>(config.class_hidden);
  class_w1 = add("class_decoder.fc1.weight", ch, 1);
  class_b1 = add("class_decoder.fc1.bias", ch, 1);
  class_w2 = add("class_decoder.fc2.weight", n, ch);
  class_b2 = add("class_decoder.fc2.bias", n, 1);

  const auto bh = static_cast<Eigen::Index>(config.bbox_hidden);
  bbox_w1 = add("bbox_decoder.fc1.weight", bh, 1);
  bbox_b1 = add("bbox_decoder.fc1.bias", bh, 1);
  bbox_w2 = add("bbox_decoder.fc2.weight", 4 * n, bh);
  bbox_b2 = add("bbox_decoder.fc2.bias", 4 * n, 1);
}

std::size_t ParameterLayout::find(const std::string& name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter block named '" + name + "'");
}

// ---------------------------------------------------------------------------
// ModelParameters

ModelParameters::ModelParameters(ModelConfig cfg)
    : config(std::move(cfg)), layout(config), values(layout.total(), 0.0) {}

ModelParameters ModelParameters::initialize(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParameters p(cfg);
  Rng rng(seed);
  auto fill_uniform = [&](std::size_t block, double bound) {
    auto m = p.block(block);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    }
  };
  const auto& L = p.layout;
  const double d = static_cast<double>(cfg.token_dim());
  if (L.learned_positions) fill_uniform(L.positions, 0.02);
  for (const auto& S : L.layers) {
    p.block(S.ln1_gain).setOnes();
    p.block(S.ln2_gain).setOnes();
    for (auto [w, b] : {std::pair{S.wq, S.bq}, std::pair{S.wk, S.bk}, std::pair{S.wv, S.bv},
                        std::pair{S.wo, S.bo}, std::pair{S.ffn_w1, S.ffn_b1}}) {
      fill_uniform(w, 1.0 / std::sqrt(d));
      fill_uniform(b, 1.0 / std::sqrt(d));
    }
    const double f = static_cast<double>(cfg.ffn());
    fill_uniform(S.ffn_w2, 1.0 / std::sqrt(f));
    fill_uniform(S.ffn_b2, 1.0 / std::sqrt(f));
  }
  // Vector layers are stored (out x in), so fan-in is the column count.
  // Weights feeding a ReLU use bound sqrt(6 / fan_in), the rest sqrt(3 / fan_in).
  auto fill_dense = [&](std::size_t w, std::size_t b, bool relu) {
    const double fan_in = static_cast<double>(p.layout.block(w).cols);
    fill_uniform(w, std::sqrt((relu ? 6.0 : 3.0) / fan_in));
    fill_uniform(b, 1.0 / std::sqrt(fan_in));
  };
  for (std::size_t k = 0; k < L.fc_w.size(); ++k) fill_dense(L.fc_w[k], L.fc_b[k], true);
  fill_dense(L.latent_w, L.latent_b, false);
  fill_dense(L.class_w1, L.class_b1, true);
  fill_dense(L.class_w2, L.class_b2, false);
  fill_dense(L.bbox_w1, L.bbox_b1, true);
  fill_dense(L.bbox_w2, L.bbox_b2, false);
  return p;
}

Eigen::Map<Eigen::MatrixXd> ModelParameters::block(std::size_t i) {
  const auto& b = layout.block(i);
  return {values.data() + b.offset, b.rows, b.cols};
}

Eigen::Map<const Eigen::MatrixXd> ModelParameters::block(std::size_t i) const {
  const auto& b = layout.block(i);
  return {values.data() + b.offset, b.rows, b.cols};
}

bool ModelParameters::all_finite() const {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Inference

Eigen::MatrixXd sinusoidal_positions(std::size_t s, std::size_t d) {
  Eigen::MatrixXd pe(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(d));
  for (std::size_t t = 0; t < s; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      const double rate = std::pow(10000.0, -static_cast<double>(j - j % 2) / static_cast<double>(d));
      const double angle = static_cast<double>(t) * rate;
      pe(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

double encode(const Eigen::MatrixXd& tokens, const ModelParameters& params) {
  detail::ForwardCache cache;
  return detail::encode_into(tokens, params, cache);
}

double encode(const DetectionWindow& window, const ModelParameters& params) {
  if (window.length() != params.config.s) {
    throw std::invalid_argument("window length " + std::to_string(window.length()) +
                                " does not match model s=" + std::to_string(params.config.s));
  }
  if (window.target().n() != params.config.n) {
    throw std::invalid_argument("window class count " + std::to_string(window.target().n()) +
                                " does not match model n=" + std::to_string(params.config.n));
  }
  return encode(window_tokens(window), params);
}

Reconstruction decode(double z, const ModelParameters& params) {
  if (!std::isfinite(z)) throw std::invalid_argument("latent value must be finite");
  detail::ForwardCache cache;
  detail::decode_into(z, params, cache);
  const auto n = static_cast<Eigen::Index>(params.config.n);
  Reconstruction r;
  r.class_probs = cache.class_probs;
  r.boxes = Eigen::Map<const Eigen::MatrixXd>(cache.bbox_probs.data(), 4, n).transpose();
  return r;
}

std::pair<double, Reconstruction> forward(const Eigen::MatrixXd& tokens, const ModelParameters& params) {
  const double z = encode(tokens, params);
  return {z, decode(z, params)};
}

std::pair<double, Reconstruction> forward(const DetectionWindow& window, const ModelParameters& params) {
  const double z = encode(window, params);
  return {z, decode(z, params)};
}

}  // namespace roadnav
