#pragma once

// Forward pass with retained activations and the matching reverse pass.
// Shared by inference (model.cpp) and training so both run the same math.

#include <vector>

#include <Eigen/Core>

#include "roadnav/model.hpp"
#include "roadnav/util.hpp"

namespace roadnav::detail {

struct LayerCache {
  Eigen::MatrixXd input;  // s x d
  Eigen::MatrixXd xhat1;
  Eigen::VectorXd rstd1;
  Eigen::MatrixXd normed1;
  Eigen::MatrixXd q, k, v;
  std::vector<Eigen::MatrixXd> probs;  // one s x s matrix per head
  Eigen::MatrixXd heads;               // concatenated head outputs, s x d
  Eigen::MatrixXd mid;                 // input + attention
  Eigen::MatrixXd xhat2;
  Eigen::VectorXd rstd2;
  Eigen::MatrixXd normed2;
  Eigen::MatrixXd hidden_pre;  // s x ffn
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Eigen::MatrixXd encoded;
  Eigen::VectorXd pooled;
  std::vector<Eigen::VectorXd> fc_pre;
  std::vector<Eigen::VectorXd> fc_out;
  std::vector<Eigen::VectorXd> masks;  // inverted-dropout scales, empty when off
  double z_logit = 0.0;
  double z = 0.5;

  Eigen::VectorXd class_pre, class_hidden, class_logit, class_probs;
  Eigen::VectorXd bbox_pre, bbox_hidden, bbox_logit, bbox_probs;
};

double sigmoid(double x);

/// Runs the encoder; `dropout_rng` non-null enables training-mode dropout.
double encode_into(const Eigen::MatrixXd& tokens, const ModelParameters& params, ForwardCache& cache,
                   Rng* dropout_rng = nullptr);
void decode_into(double z, const ModelParameters& params, ForwardCache& cache);

/// Accumulates d(loss)/d(params) into `grad` given gradients with respect to
/// the decoder output logits.
void backward(const ForwardCache& cache, const ModelParameters& params,
              const Eigen::VectorXd& d_class_logit, const Eigen::VectorXd& d_bbox_logit,
              std::vector<double>& grad);

}  // namespace roadnav::detail
