#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "roadnav/detection.hpp"
#include "roadnav/model.hpp"

namespace roadnav {

/// Per-frame reconstruction loss: summed binary cross-entropy over classes
/// plus the L1 box error of classes present in the target.
struct LossBreakdown {
  double bce = 0.0;
  double bbox_l1 = 0.0;
  double total() const { return bce + bbox_l1; }
};

/// Probabilities are clamped to [eps, 1 - eps] before taking logs.
inline constexpr double kProbabilityEps = 1e-7;

LossBreakdown loss(const Reconstruction& recon, const FrameDetections& target);

/// One training pair: the (s x 5n) window and the target frame row (5n).
struct Example {
  Eigen::MatrixXd tokens;
  Eigen::RowVectorXd target;
};
Example make_example(const DetectionWindow& window);
Example make_example(const DetectionWindow& window, const FrameDetections& target);

struct GradientResult {
  std::vector<double> grad;  // mean over the batch, ParameterLayout order
  LossBreakdown loss;        // mean over the batch
};

struct GradientOptions {
  std::size_t threads = 1;
  // Training-mode dropout stream; ignored when the model has dropout 0.
  std::optional<std::uint64_t> dropout_seed;
};

/// Exact gradient of the mean batch loss. The reduction order depends only on
/// the batch, so results are identical for any thread count.
GradientResult compute_gradients(const ModelParameters& params, std::span<const Example> batch,
                                 const GradientOptions& options = {});

/// Mean loss without gradients.
LossBreakdown evaluate_loss(const ModelParameters& params, std::span<const Example> batch);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  AdamWConfig hyper;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  OptimizerState() = default;
  OptimizerState(std::size_t n_params, AdamWConfig config)
      : hyper(config), m(n_params, 0.0), v(n_params, 0.0) {}
};

/// Adam moment update with weight decay applied directly to the weights:
/// w <- w - lr * decay * w - lr * m_hat / (sqrt(v_hat) + eps).
void adamw_step(std::vector<double>& params, std::span<const double> grads, OptimizerState& state,
                double lr);

struct TrainConfig {
  std::size_t epochs = 170;
  std::size_t warmup_epochs = 60;
  double peak_lr = 1e-4;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  std::size_t stride = 1;
  double val_fraction = 0.15;
  std::size_t threads = 1;
  bool deterministic = true;  // forces threads = 1

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// peak_lr * min(1, epoch / warmup_epochs).
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double wall_time = 0.0;  // seconds since training started
};
nlohmann::json to_json(const EpochLog& e);

struct TrainResult {
  ModelParameters params;
  std::vector<EpochLog> log;
  std::vector<std::string> train_videos;
  std::vector<std::string> val_videos;
  std::size_t steps = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Splits videos into train/validation by video, then runs minibatched AdamW
/// over all windows (every `stride` frames) of the training videos.
TrainResult train(std::span<const VideoTensor> videos, const ModelConfig& model_config,
                  const TrainConfig& train_config,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Continues training from given parameters on an explicit example list
/// (no split); used for small experiments and overfitting checks.
TrainResult train_examples(ModelParameters params, std::span<const Example> examples,
                           const TrainConfig& train_config,
                           const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace roadnav
