#pragma once

#include <random>

#include "roadnav/detection.hpp"
#include "roadnav/model.hpp"
#include "roadnav/training.hpp"
#include "roadnav/util.hpp"

namespace roadnav::testing {

inline FrameDetections random_frame(std::size_t n, Rng& rng, double p_present = 0.5) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::bernoulli_distribution present(p_present);
  FrameDetections f(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (present(rng)) f.set(i, {u(rng), u(rng), 0.5 * u(rng), 0.5 * u(rng)});
  }
  return f;
}

inline DetectionWindow random_window(std::size_t s, std::size_t n, Rng& rng) {
  DetectionWindow w;
  for (std::size_t k = 0; k < s; ++k) {
    w.frames.push_back(random_frame(n, rng));
    w.frames.back().frame_index = static_cast<std::int64_t>(k);
  }
  return w;
}

inline Example random_example(std::size_t s, std::size_t n, Rng& rng) {
  return make_example(random_window(s, n, rng));
}

/// Small config with the given window length and class count; the remaining
/// widths are drawn at random so property tests cover many shapes.
inline ModelConfig random_small_config(std::size_t s, std::size_t n, Rng& rng) {
  std::uniform_int_distribution<std::size_t> layers(1, 2), width(3, 9), depth(1, 3), ffn(6, 16);
  ModelConfig c;
  c.s = s;
  c.n = n;
  c.n_layers = layers(rng);
  c.n_heads = std::bernoulli_distribution(0.5)(rng) ? 5 : n;
  c.encoder_fc_dims.clear();
  for (std::size_t k = depth(rng); k > 0; --k) c.encoder_fc_dims.push_back(width(rng));
  c.class_hidden = width(rng);
  c.bbox_hidden = width(rng);
  c.ffn_dim = ffn(rng);
  return c;
}

}  // namespace roadnav::testing
