#include "roadnav/network.hpp"

#include <cmath>
#include <limits>

namespace roadnav::detail {

namespace {

constexpr double kNormEps = 1e-5;

using MapC = Eigen::Map<const Eigen::MatrixXd>;
using MapM = Eigen::Map<Eigen::MatrixXd>;

MapC view(const ModelParameters& p, std::size_t i) { return p.block(i); }

MapM grad_view(const ModelParameters& p, std::vector<double>& g, std::size_t i) {
  const auto& b = p.layout.block(i);
  return MapM(g.data() + b.offset, b.rows, b.cols);
}

Eigen::MatrixXd relu(const Eigen::MatrixXd& x) { return x.cwiseMax(0.0); }
Eigen::VectorXd relu(const Eigen::VectorXd& x) { return x.cwiseMax(0.0); }

Eigen::VectorXd sigmoid(const Eigen::VectorXd& x) {
  return x.unaryExpr([](double v) { return detail::sigmoid(v); });
}

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const MapC& gain, const MapC& bias,
                           Eigen::MatrixXd& xhat, Eigen::VectorXd& rstd) {
  const auto d = static_cast<double>(x.cols());
  xhat.resize(x.rows(), x.cols());
  rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).sum() / d;
    const double var = (x.row(r).array() - mean).square().sum() / d;
    rstd(r) = 1.0 / std::sqrt(var + kNormEps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  Eigen::MatrixXd y = xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& xhat,
                                    const Eigen::VectorXd& rstd, const MapC& gain, MapM d_gain,
                                    MapM d_bias) {
  d_gain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  d_bias.row(0) += dy.colwise().sum();
  const Eigen::MatrixXd dxhat = dy.array().rowwise() * gain.row(0).array();
  const auto d = static_cast<double>(dy.cols());
  Eigen::MatrixXd dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() / d;
    const double mean_dx = dxhat.row(r).dot(xhat.row(r)) / d;
    dx.row(r) = rstd(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
  }
  return dx;
}

void softmax_rows(Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

}  // namespace

double sigmoid(double x) {
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  const double y = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return y < lo ? lo : (y > hi ? hi : y);
}

double encode_into(const Eigen::MatrixXd& tokens, const ModelParameters& params, ForwardCache& cache,
                   Rng* dropout_rng) {
  const auto& cfg = params.config;
  const auto& L = params.layout;
  const auto s = static_cast<Eigen::Index>(cfg.s);
  const auto d = static_cast<Eigen::Index>(cfg.token_dim());
  if (tokens.rows() != s || tokens.cols() != d) {
    throw std::invalid_argument("window shape " + std::to_string(tokens.rows()) + "x" +
                                std::to_string(tokens.cols()) + " does not match model (" +
                                std::to_string(s) + "x" + std::to_string(d) + ")");
  }

  Eigen::MatrixXd h = tokens;
  if (L.learned_positions) {
    h += view(params, L.positions);
  } else {
    h += sinusoidal_positions(cfg.s, cfg.token_dim());
  }

  const auto heads = static_cast<Eigen::Index>(cfg.n_heads);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  cache.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& S = L.layers[l];
    auto& c = cache.layers[l];
    c.input = h;
    c.normed1 = layer_norm(h, view(params, S.ln1_gain), view(params, S.ln1_bias), c.xhat1, c.rstd1);
    c.q = c.normed1 * view(params, S.wq);
    c.q.rowwise() += view(params, S.bq).row(0);
    c.k = c.normed1 * view(params, S.wk);
    c.k.rowwise() += view(params, S.bk).row(0);
    c.v = c.normed1 * view(params, S.wv);
    c.v.rowwise() += view(params, S.bv).row(0);

    c.probs.resize(cfg.n_heads);
    c.heads.resize(s, d);
    for (Eigen::Index hd = 0; hd < heads; ++hd) {
      const Eigen::Index off = hd * dh;
      Eigen::MatrixXd scores = c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose() * scale;
      softmax_rows(scores);
      c.heads.middleCols(off, dh) = scores * c.v.middleCols(off, dh);
      c.probs[static_cast<std::size_t>(hd)] = std::move(scores);
    }
    c.mid = h + c.heads * view(params, S.wo);
    c.mid.rowwise() += view(params, S.bo).row(0);

    c.normed2 = layer_norm(c.mid, view(params, S.ln2_gain), view(params, S.ln2_bias), c.xhat2, c.rstd2);
    c.hidden_pre = c.normed2 * view(params, S.ffn_w1);
    c.hidden_pre.rowwise() += view(params, S.ffn_b1).row(0);
    h = c.mid + relu(c.hidden_pre) * view(params, S.ffn_w2);
    h.rowwise() += view(params, S.ffn_b2).row(0);
  }
  cache.encoded = std::move(h);

  if (cfg.pooling == Pooling::Flatten) {
    const Eigen::MatrixXd t = cache.encoded.transpose();  // row-major flatten: token by token
    cache.pooled = Eigen::Map<const Eigen::VectorXd>(t.data(), t.size());
  } else {
    cache.pooled = cache.encoded.colwise().mean().transpose();
  }

  const std::size_t n_fc = cfg.encoder_fc_dims.size();
  cache.fc_pre.resize(n_fc);
  cache.fc_out.resize(n_fc);
  cache.masks.assign(dropout_rng != nullptr && cfg.dropout > 0.0 ? n_fc : 0, Eigen::VectorXd());
  const Eigen::VectorXd* x = &cache.pooled;
  for (std::size_t k = 0; k < n_fc; ++k) {
    cache.fc_pre[k] = view(params, L.fc_w[k]) * *x + view(params, L.fc_b[k]).col(0);
    cache.fc_out[k] = relu(cache.fc_pre[k]);
    if (!cache.masks.empty()) {
      std::bernoulli_distribution keep(1.0 - cfg.dropout);
      Eigen::VectorXd mask(cache.fc_out[k].size());
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask(i) = keep(*dropout_rng) ? 1.0 / (1.0 - cfg.dropout) : 0.0;
      cache.fc_out[k] = cache.fc_out[k].cwiseProduct(mask);
      cache.masks[k] = std::move(mask);
    }
    x = &cache.fc_out[k];
  }
  cache.z_logit = (view(params, L.latent_w) * *x)(0, 0) + view(params, L.latent_b)(0, 0);
  cache.z = sigmoid(cache.z_logit);
  return cache.z;
}

void decode_into(double z, const ModelParameters& params, ForwardCache& cache) {
  const auto& L = params.layout;
  cache.z = z;
  cache.class_pre = view(params, L.class_w1).col(0) * z + view(params, L.class_b1).col(0);
  cache.class_hidden = relu(cache.class_pre);
  cache.class_logit = view(params, L.class_w2) * cache.class_hidden + view(params, L.class_b2).col(0);
  cache.class_probs = sigmoid(cache.class_logit);

  cache.bbox_pre = view(params, L.bbox_w1).col(0) * z + view(params, L.bbox_b1).col(0);
  cache.bbox_hidden = relu(cache.bbox_pre);
  cache.bbox_logit = view(params, L.bbox_w2) * cache.bbox_hidden + view(params, L.bbox_b2).col(0);
  cache.bbox_probs = sigmoid(cache.bbox_logit);
}

void backward(const ForwardCache& cache, const ModelParameters& params,
              const Eigen::VectorXd& d_class_logit, const Eigen::VectorXd& d_bbox_logit,
              std::vector<double>& grad) {
  const auto& cfg = params.config;
  const auto& L = params.layout;
  if (grad.size() != L.total()) throw std::invalid_argument("gradient buffer has wrong size");
  auto G = [&](std::size_t i) { return grad_view(params, grad, i); };

  // Decoders.
  double dz = 0.0;
  {
    G(L.class_w2) += d_class_logit * cache.class_hidden.transpose();
    G(L.class_b2).col(0) += d_class_logit;
    const Eigen::VectorXd d_pre = (view(params, L.class_w2).transpose() * d_class_logit)
                                      .cwiseProduct((cache.class_pre.array() > 0.0).cast<double>().matrix());
    G(L.class_w1).col(0) += d_pre * cache.z;
    G(L.class_b1).col(0) += d_pre;
    dz += view(params, L.class_w1).col(0).dot(d_pre);
  }
  {
    G(L.bbox_w2) += d_bbox_logit * cache.bbox_hidden.transpose();
    G(L.bbox_b2).col(0) += d_bbox_logit;
    const Eigen::VectorXd d_pre = (view(params, L.bbox_w2).transpose() * d_bbox_logit)
                                      .cwiseProduct((cache.bbox_pre.array() > 0.0).cast<double>().matrix());
    G(L.bbox_w1).col(0) += d_pre * cache.z;
    G(L.bbox_b1).col(0) += d_pre;
    dz += view(params, L.bbox_w1).col(0).dot(d_pre);
  }

  // Latent head and reduction layers.
  const double d_logit = dz * cache.z * (1.0 - cache.z);
  const std::size_t n_fc = cfg.encoder_fc_dims.size();
  const Eigen::VectorXd& last = n_fc > 0 ? cache.fc_out.back() : cache.pooled;
  G(L.latent_w).row(0) += d_logit * last.transpose();
  G(L.latent_b)(0, 0) += d_logit;
  Eigen::VectorXd dx = view(params, L.latent_w).row(0).transpose() * d_logit;
  for (std::size_t k = n_fc; k-- > 0;) {
    if (!cache.masks.empty()) dx = dx.cwiseProduct(cache.masks[k]);
    const Eigen::VectorXd d_pre = dx.cwiseProduct((cache.fc_pre[k].array() > 0.0).cast<double>().matrix());
    const Eigen::VectorXd& in = k == 0 ? cache.pooled : cache.fc_out[k - 1];
    G(L.fc_w[k]) += d_pre * in.transpose();
    G(L.fc_b[k]).col(0) += d_pre;
    dx = view(params, L.fc_w[k]).transpose() * d_pre;
  }

  const auto s = static_cast<Eigen::Index>(cfg.s);
  const auto d = static_cast<Eigen::Index>(cfg.token_dim());
  Eigen::MatrixXd dh(s, d);
  if (cfg.pooling == Pooling::Flatten) {
    dh = Eigen::Map<const Eigen::MatrixXd>(dx.data(), d, s).transpose();
  } else {
    dh = (dx.transpose() / static_cast<double>(s)).replicate(s, 1);
  }

  const auto heads = static_cast<Eigen::Index>(cfg.n_heads);
  const auto dhd = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dhd));

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const auto& S = L.layers[l];
    const auto& c = cache.layers[l];

    // Feed-forward block: out = mid + relu(normed2 W1 + b1) W2 + b2.
    const Eigen::MatrixXd hidden = relu(c.hidden_pre);
    G(S.ffn_w2) += hidden.transpose() * dh;
    G(S.ffn_b2).row(0) += dh.colwise().sum();
    Eigen::MatrixXd d_hidden = dh * view(params, S.ffn_w2).transpose();
    d_hidden.array() *= (c.hidden_pre.array() > 0.0).cast<double>();
    G(S.ffn_w1) += c.normed2.transpose() * d_hidden;
    G(S.ffn_b1).row(0) += d_hidden.colwise().sum();
    const Eigen::MatrixXd d_normed2 = d_hidden * view(params, S.ffn_w1).transpose();
    Eigen::MatrixXd d_mid = dh + layer_norm_backward(d_normed2, c.xhat2, c.rstd2, view(params, S.ln2_gain),
                                                     G(S.ln2_gain), G(S.ln2_bias));

    // Attention block: mid = input + heads Wo + bo.
    G(S.wo) += c.heads.transpose() * d_mid;
    G(S.bo).row(0) += d_mid.colwise().sum();
    const Eigen::MatrixXd d_heads = d_mid * view(params, S.wo).transpose();
    Eigen::MatrixXd dq(s, d), dk(s, d), dv(s, d);
    for (Eigen::Index hd = 0; hd < heads; ++hd) {
      const Eigen::Index off = hd * dhd;
      const auto& P = c.probs[static_cast<std::size_t>(hd)];
      const auto d_out = d_heads.middleCols(off, dhd);
      const Eigen::MatrixXd dP = d_out * c.v.middleCols(off, dhd).transpose();
      dv.middleCols(off, dhd) = P.transpose() * d_out;
      const Eigen::VectorXd row_dot = (dP.array() * P.array()).rowwise().sum();
      const Eigen::MatrixXd dS = (P.array() * (dP.colwise() - row_dot).array()).matrix() * scale;
      dq.middleCols(off, dhd) = dS * c.k.middleCols(off, dhd);
      dk.middleCols(off, dhd) = dS.transpose() * c.q.middleCols(off, dhd);
    }
    G(S.wq) += c.normed1.transpose() * dq;
    G(S.bq).row(0) += dq.colwise().sum();
    G(S.wk) += c.normed1.transpose() * dk;
    G(S.bk).row(0) += dk.colwise().sum();
    G(S.wv) += c.normed1.transpose() * dv;
    G(S.bv).row(0) += dv.colwise().sum();
    const Eigen::MatrixXd d_normed1 = dq * view(params, S.wq).transpose() +
                                      dk * view(params, S.wk).transpose() +
                                      dv * view(params, S.wv).transpose();
    dh = d_mid + layer_norm_backward(d_normed1, c.xhat1, c.rstd1, view(params, S.ln1_gain),
                                     G(S.ln1_gain), G(S.ln1_bias));
  }

  if (L.learned_positions) G(L.positions) += dh;
}

}  // namespace roadnav::detail
