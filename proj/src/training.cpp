#include "roadnav/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "roadnav/network.hpp"
#include "roadnav/util.hpp"

namespace roadnav {

namespace {

// Samples per reduction chunk. Fixed so the summation order never depends on
// how chunks are spread over threads.
constexpr std::size_t kChunk = 8;

void check_finite(const Eigen::Ref<const Eigen::MatrixXd>& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string("non-finite values in ") + what);
}

/// Loss for one cached forward pass and its gradient w.r.t. the decoder logits.
LossBreakdown loss_with_logit_grads(const detail::ForwardCache& c, const Eigen::RowVectorXd& target,
                                    Eigen::VectorXd& d_class, Eigen::VectorXd& d_bbox) {
  const auto n = c.class_probs.size();
  d_class.setZero(n);
  d_bbox.setZero(4 * n);
  LossBreakdown out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double y = target(5 * i);
    const double p = c.class_probs(i);
    const double pc = std::clamp(p, kProbabilityEps, 1.0 - kProbabilityEps);
    out.bce -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    if (p > kProbabilityEps && p < 1.0 - kProbabilityEps) d_class(i) = p - y;
    if (y == 0.0) continue;
    for (Eigen::Index k = 0; k < 4; ++k) {
      const double b_hat = c.bbox_probs(4 * i + k);
      const double diff = b_hat - target(5 * i + 1 + k);
      out.bbox_l1 += y * std::abs(diff);
      const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      d_bbox(4 * i + k) = y * sign * b_hat * (1.0 - b_hat);
    }
  }
  return out;
}

void check_example(const ModelParameters& params, const Example& ex) {
  const auto d = static_cast<Eigen::Index>(params.config.token_dim());
  if (ex.target.size() != d) throw std::invalid_argument("target row does not match model class count");
  check_finite(ex.tokens, "window");
  check_finite(ex.target, "target");
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss

LossBreakdown loss(const Reconstruction& recon, const FrameDetections& target) {
  const auto n = static_cast<Eigen::Index>(target.n());
  if (recon.class_probs.size() != n || recon.boxes.rows() != n || recon.boxes.cols() != 4) {
    throw std::invalid_argument("reconstruction and target disagree on class count");
  }
  check_finite(recon.class_probs, "class probabilities");
  check_finite(recon.boxes, "boxes");
  LossBreakdown out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double y = target.present(static_cast<std::size_t>(i)) ? 1.0 : 0.0;
    const double p = std::clamp(recon.class_probs(i), kProbabilityEps, 1.0 - kProbabilityEps);
    out.bce -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    if (y == 0.0) continue;
    const auto& b = target.boxes[static_cast<std::size_t>(i)];
    out.bbox_l1 += std::abs(b.cx - recon.boxes(i, 0)) + std::abs(b.cy - recon.boxes(i, 1)) +
                   std::abs(b.w - recon.boxes(i, 2)) + std::abs(b.h - recon.boxes(i, 3));
  }
  return out;
}

Example make_example(const DetectionWindow& window) { return make_example(window, window.target()); }

Example make_example(const DetectionWindow& window, const FrameDetections& target) {
  return {window_tokens(window), frame_row(target)};
}

// ---------------------------------------------------------------------------
// Gradients

GradientResult compute_gradients(const ModelParameters& params, std::span<const Example> batch,
                                 const GradientOptions& options) {
  if (batch.empty()) throw std::invalid_argument("gradient batch is empty");
  for (const auto& ex : batch) check_example(params, ex);

  const std::size_t n_chunks = (batch.size() + kChunk - 1) / kChunk;
  std::vector<std::vector<double>> chunk_grads(n_chunks);
  std::vector<LossBreakdown> chunk_loss(n_chunks);

  auto run_chunk = [&](std::size_t c) {
    auto& g = chunk_grads[c];
    g.assign(params.values.size(), 0.0);
    detail::ForwardCache cache;
    Eigen::VectorXd d_class, d_bbox;
    const std::size_t end = std::min(batch.size(), (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
      std::optional<Rng> rng;
      if (options.dropout_seed && params.config.dropout > 0.0) {
        rng.emplace(derive_seed(*options.dropout_seed, "dropout", i));
      }
      const double z = detail::encode_into(batch[i].tokens, params, cache, rng ? &*rng : nullptr);
      detail::decode_into(z, params, cache);
      const auto l = loss_with_logit_grads(cache, batch[i].target, d_class, d_bbox);
      chunk_loss[c].bce += l.bce;
      chunk_loss[c].bbox_l1 += l.bbox_l1;
      detail::backward(cache, params, d_class, d_bbox, g);
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, n_chunks);
  if (threads == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t c = next++; c < n_chunks; c = next++) run_chunk(c);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  GradientResult out;
  out.grad = std::move(chunk_grads[0]);
  out.loss = chunk_loss[0];
  for (std::size_t c = 1; c < n_chunks; ++c) {
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += chunk_grads[c][k];
    out.loss.bce += chunk_loss[c].bce;
    out.loss.bbox_l1 += chunk_loss[c].bbox_l1;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& v : out.grad) v *= inv;
  out.loss.bce *= inv;
  out.loss.bbox_l1 *= inv;
  if (!std::isfinite(out.loss.total())) throw TrainingDiverged("non-finite loss in gradient batch");
  return out;
}

LossBreakdown evaluate_loss(const ModelParameters& params, std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("loss batch is empty");
  LossBreakdown sum;
  detail::ForwardCache cache;
  Eigen::VectorXd d_class, d_bbox;
  for (const auto& ex : batch) {
    check_example(params, ex);
    const double z = detail::encode_into(ex.tokens, params, cache);
    detail::decode_into(z, params, cache);
    const auto l = loss_with_logit_grads(cache, ex.target, d_class, d_bbox);
    sum.bce += l.bce;
    sum.bbox_l1 += l.bbox_l1;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  return {sum.bce * inv, sum.bbox_l1 * inv};
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

void adamw_step(std::vector<double>& params, std::span<const double> grads, OptimizerState& state,
                double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("optimizer shape mismatch");
  }
  const auto& h = state.hyper;
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * h.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] = params[i] * decay - lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
  if (warmup_epochs > epochs) throw std::invalid_argument("warmup_epochs must not exceed epochs");
  if (!(peak_lr > 0.0)) throw std::invalid_argument("peak_lr must be > 0");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (stride == 0) throw std::invalid_argument("stride must be >= 1");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw std::invalid_argument("val_fraction must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},           {"warmup_epochs", c.warmup_epochs},
       {"peak_lr", c.peak_lr},         {"batch_size", c.batch_size},
       {"seed", c.seed},               {"weight_decay", c.weight_decay},
       {"stride", c.stride},           {"val_fraction", c.val_fraction},
       {"threads", c.threads},         {"deterministic", c.deterministic}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.stride = j.value("stride", d.stride);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.threads = j.value("threads", d.threads);
  c.deterministic = j.value("deterministic", d.deterministic);
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  if (cfg.warmup_epochs == 0 || epoch >= cfg.warmup_epochs) return cfg.peak_lr;
  return cfg.peak_lr * static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs);
}

nlohmann::json to_json(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["train_loss"] = e.train_loss;
  j["val_loss"] = e.val_loss ? nlohmann::ordered_json(*e.val_loss) : nlohmann::ordered_json(nullptr);
  j["wall_time"] = e.wall_time;
  return j;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

/// Epoch loop shared by train() and train_examples(). `fetch` materializes
/// example k of the training set, `val` returns the validation loss.
TrainResult run_epochs(ModelParameters params, std::size_t n_examples,
                       const std::function<Example(std::size_t)>& fetch,
                       const std::function<std::optional<double>(const ModelParameters&)>& val,
                       const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch) {
  if (n_examples == 0) throw std::invalid_argument("training set is empty");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t threads = cfg.deterministic ? 1 : std::max<std::size_t>(1, cfg.threads);

  OptimizerState opt(params.values.size(), AdamWConfig{.weight_decay = cfg.weight_decay});
  TrainResult result;
  std::vector<std::size_t> order(n_examples);
  std::vector<Example> batch;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle_rng = make_rng(cfg.seed, "shuffle", epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    for (std::size_t first = 0; first < n_examples; first += cfg.batch_size) {
      const std::size_t last = std::min(n_examples, first + cfg.batch_size);
      batch.clear();
      for (std::size_t k = first; k < last; ++k) batch.push_back(fetch(order[k]));
      GradientOptions go{threads, derive_seed(cfg.seed, "dropout", result.steps)};
      auto g = compute_gradients(params, batch, go);
      if (!std::isfinite(g.loss.total())) {
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(result.steps));
      }
      loss_sum += g.loss.total() * static_cast<double>(batch.size());
      adamw_step(params.values, g.grad, opt, lr);
      ++result.steps;
    }
    if (!params.all_finite()) {
      throw TrainingDiverged("parameters became non-finite at epoch " + std::to_string(epoch));
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.train_loss = loss_sum / static_cast<double>(n_examples);
    entry.val_loss = val ? val(params) : std::nullopt;
    entry.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace

TrainResult train(std::span<const VideoTensor> videos, const ModelConfig& model_config,
                  const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  model_config.validate();
  if (videos.empty()) throw std::invalid_argument("training dataset has no videos");
  for (const auto& v : videos) {
    if (v.n_classes() != model_config.n) {
      throw std::invalid_argument("video '" + v.video_id() + "' has " + std::to_string(v.n_classes()) +
                                  " classes, model expects " + std::to_string(model_config.n));
    }
  }

  // Split by video so no window leaks between train and validation.
  std::vector<std::size_t> idx(videos.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return videos[a].video_id() < videos[b].video_id(); });
  auto split_rng = make_rng(cfg.seed, "split");
  std::shuffle(idx.begin(), idx.end(), split_rng);
  std::size_t n_val = 0;
  if (cfg.val_fraction > 0.0 && videos.size() >= 2) {
    n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(videos.size()))), 1,
        videos.size() - 1);
  }
  std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_idx(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  auto windows_of = [&](const std::vector<std::size_t>& which) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (auto v : which) {
      for (std::size_t t = 0; t < videos[v].n_frames(); t += cfg.stride) out.emplace_back(v, t);
    }
    return out;
  };
  const auto train_windows = windows_of(train_idx);
  const auto val_windows = windows_of(val_idx);
  const std::size_t s = model_config.s;

  auto example_at = [&](std::pair<std::size_t, std::size_t> w) {
    const auto& video = videos[w.first];
    return Example{video.window(w.second, s), video.rows().row(static_cast<Eigen::Index>(w.second))};
  };

  std::function<std::optional<double>(const ModelParameters&)> val;
  if (!val_windows.empty()) {
    val = [&](const ModelParameters& p) -> std::optional<double> {
      double sum = 0.0;
      std::vector<Example> chunk;
      for (std::size_t first = 0; first < val_windows.size(); first += 256) {
        chunk.clear();
        const auto last = std::min(val_windows.size(), first + 256);
        for (std::size_t k = first; k < last; ++k) chunk.push_back(example_at(val_windows[k]));
        sum += evaluate_loss(p, chunk).total() * static_cast<double>(chunk.size());
      }
      return sum / static_cast<double>(val_windows.size());
    };
  }

  auto params = ModelParameters::initialize(model_config, derive_seed(cfg.seed, "init"));
  auto result = run_epochs(
      std::move(params), train_windows.size(), [&](std::size_t k) { return example_at(train_windows[k]); }, val,
      cfg, on_epoch);
  for (auto v : train_idx) result.train_videos.push_back(videos[v].video_id());
  for (auto v : val_idx) result.val_videos.push_back(videos[v].video_id());
  return result;
}

TrainResult train_examples(ModelParameters params, std::span<const Example> examples,
                           const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  return run_epochs(
      std::move(params), examples.size(), [&](std::size_t k) { return examples[k]; }, {}, cfg, on_epoch);
}

}  // namespace roadnav
