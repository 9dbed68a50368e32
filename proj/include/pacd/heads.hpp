#pragma once

// Objective heads: distillation projection and distributions, multi-view
// InfoNCE, simplex TR regression, and loss composition.
//
// Each loss has a value-level form returning the scalar together with its
// analytic gradient, and a graph op wrapping it for training.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pacd/glycemic.hpp"
#include "pacd/swin_crb.hpp"

namespace pacd {

using Vec = std::vector<double>;

inline Vec softmax(std::span<const double> logits, double temperature = 1.0) {
  if (logits.empty()) return {};
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z / temperature);
  Vec p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - mx);
    s += p[i];
  }
  for (auto &v : p) v /= s;
  return p;
}

inline Vec log_softmax(std::span<const double> logits, double temperature = 1.0) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z / temperature);
  double s = 0.0;
  for (double z : logits) s += std::exp(z / temperature - mx);
  const double lse = mx + std::log(s);
  Vec out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits[i] / temperature - lse;
  return out;
}

namespace detail {

/// Records a scalar whose gradient w.r.t. `x` is already known.
inline Var scalar_with_grad(Var x, double value, Tensor grad_x) {
  auto gx = std::make_shared<Tensor>(std::move(grad_x));
  return x.g->make(Tensor({1}, value), {x}, [x, gx](Graph &g, std::size_t self) {
    const double gy = g.out_grad(self).data[0];
    auto &acc = g.acc(x);
    for (std::size_t i = 0; i < acc.numel(); ++i) acc.data[i] += gy * gx->data[i];
  });
}

inline std::vector<Vec> rows_of(const Tensor &t) {
  const std::size_t m = t.dim(0), k = t.numel() / m;
  std::vector<Vec> rows(m, Vec(k));
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(t.data.data() + i * k, k, rows[i].begin());
  return rows;
}

} // namespace detail

//==============================================================================
// Knowledge distillation head

inline constexpr double kLogClamp = 1e-12;

/// Shared projection h (affine - GELU - affine) plus temperatures and the
/// running center applied to teacher outputs.
struct KdHead {
  std::size_t in_dim = 64;
  std::size_t hidden_dim = 64;
  std::size_t out_dim = 64; // K
  double tau_t = 0.04;
  double tau_s = 0.1;
  double center_momentum = 0.9;
  Vec center;                       // K entries, starts at zero
  bool identity_activation = false; // testing hook: makes h affine

  void validate() const {
    if (!(tau_t > 0.0 && tau_s > 0.0)) throw ConfigError("kd head: temperatures must be positive");
    if (!(tau_t < tau_s)) throw ConfigError("kd head: teacher temperature must be below student's");
    if (!(center_momentum >= 0.0 && center_momentum <= 1.0))
      throw ConfigError("kd head: center momentum must lie in [0,1]");
    if (center.size() != out_dim) throw ConfigError("kd head: center size must equal out_dim");
    for (double c : center)
      if (!std::isfinite(c)) throw ConfigError("kd head: non-finite center");
  }

  void init_params(ParamStore &ps, Rng &rng) const {
    detail::add_linear(ps, "kd.fc1", in_dim, hidden_dim, rng);
    detail::add_linear(ps, "kd.fc2", hidden_dim, out_dim, rng);
  }
};

inline KdHead make_kd_head(std::size_t in_dim, std::size_t hidden = 64, std::size_t k = 64) {
  KdHead h;
  h.in_dim = in_dim;
  h.hidden_dim = hidden;
  h.out_dim = k;
  h.center.assign(k, 0.0);
  return h;
}

/// z = h(feature).
inline Var project_kd(Graph &g, const ParamStore &ps, const KdHead &head, Var feature) {
  if (ad::val(feature).numel() != head.in_dim && ad::val(feature).shape.back() != head.in_dim)
    throw ConfigError("project_kd: feature dimension does not match head input");
  Var h = linear_p(g, ps, "kd.fc1", feature);
  if (!head.identity_activation) h = ad::gelu(h);
  return linear_p(g, ps, "kd.fc2", h);
}

inline Vec teacher_distribution(std::span<const double> z_t, const KdHead &head) {
  if (z_t.size() != head.center.size()) throw ConfigError("teacher_distribution: size mismatch");
  Vec centered(z_t.size());
  for (std::size_t i = 0; i < centered.size(); ++i) centered[i] = z_t[i] - head.center[i];
  return softmax(centered, head.tau_t);
}

inline Vec student_distribution(std::span<const double> z_s, const KdHead &head) {
  return softmax(z_s, head.tau_s);
}

/// c' = m c + (1 - m) mean(batch).
inline Vec update_center(const KdHead &head, const std::vector<Vec> &teacher_z_batch) {
  if (teacher_z_batch.empty()) throw Error("update_center: empty teacher batch");
  const std::size_t k = head.center.size();
  Vec mean(k, 0.0);
  for (const auto &z : teacher_z_batch) {
    if (z.size() != k) throw ConfigError("update_center: projection size mismatch");
    for (std::size_t i = 0; i < k; ++i) mean[i] += z[i];
  }
  const double n = static_cast<double>(teacher_z_batch.size());
  Vec out(k);
  const double m = head.center_momentum;
  for (std::size_t i = 0; i < k; ++i) out[i] = m * head.center[i] + (1.0 - m) * (mean[i] / n);
  return out;
}

struct KdLoss {
  double value = 0.0;
  std::size_t clamped = 0; // student log-probabilities floored at log(1e-12)
};

/// Cross-entropy averaged over every (teacher view, student view) pair.
inline KdLoss kd_loss(const std::vector<Vec> &teacher_probs, const std::vector<Vec> &student_probs) {
  if (teacher_probs.empty() || student_probs.empty())
    throw Error("kd_loss: need at least one teacher and one student view");
  const std::size_t k = teacher_probs[0].size();
  KdLoss out;
  double total = 0.0;
  for (const auto &pt : teacher_probs)
    for (const auto &ps : student_probs) {
      if (pt.size() != k || ps.size() != k) throw ConfigError("kd_loss: size mismatch");
      for (std::size_t i = 0; i < k; ++i) {
        if (pt[i] == 0.0) continue;
        double p = ps[i];
        if (p < kLogClamp) {
          p = kLogClamp;
          ++out.clamped;
        }
        total += pt[i] * std::log(p);
      }
    }
  out.value = -total / static_cast<double>(teacher_probs.size() * student_probs.size());
  return out;
}

/// KD loss from raw projections with analytic gradient w.r.t. the student
/// logits. The teacher side is a constant target.
inline KdLoss kd_loss_from_logits(const std::vector<Vec> &teacher_z, const std::vector<Vec> &student_z,
                                  const KdHead &head, std::vector<Vec> *student_grad = nullptr) {
  if (teacher_z.empty() || student_z.empty())
    throw Error("kd_loss: need at least one teacher and one student view");
  const std::size_t k = head.out_dim;
  Vec pbar(k, 0.0);
  for (const auto &z : teacher_z) {
    const Vec p = teacher_distribution(z, head);
    for (std::size_t i = 0; i < k; ++i) pbar[i] += p[i];
  }
  for (auto &v : pbar) v /= static_cast<double>(teacher_z.size());

  const double log_floor = std::log(kLogClamp);
  const double ns = static_cast<double>(student_z.size());
  KdLoss out;
  double total = 0.0;
  if (student_grad) student_grad->assign(student_z.size(), Vec(k, 0.0));
  for (std::size_t s = 0; s < student_z.size(); ++s) {
    if (student_z[s].size() != k) throw ConfigError("kd_loss: size mismatch");
    const Vec lp = log_softmax(student_z[s], head.tau_s);
    Vec gl(k, 0.0); // dL/dlogp
    for (std::size_t i = 0; i < k; ++i) {
      double l = lp[i];
      if (l < log_floor) {
        if (pbar[i] > 0.0) ++out.clamped;
        l = log_floor;
      } else {
        gl[i] = -pbar[i] / ns;
      }
      total += pbar[i] * l;
    }
    if (student_grad) {
      // dlogp_i/dz_j = (delta_ij - p_j) / tau_s
      double sg = 0.0;
      for (double v : gl) sg += v;
      auto &gz = (*student_grad)[s];
      for (std::size_t j = 0; j < k; ++j) gz[j] = (gl[j] - std::exp(lp[j]) * sg) / head.tau_s;
    }
  }
  out.value = -total / ns;
  return out;
}

/// Graph op: KD loss for one sample. `teacher_z` is read by value only, so
/// no gradient ever reaches the teacher path.
inline Var kd_loss_op(Var teacher_z, Var student_z, const KdHead &head, KdLoss *info = nullptr) {
  std::vector<Vec> sg;
  const auto res = kd_loss_from_logits(detail::rows_of(ad::val(teacher_z)),
                                       detail::rows_of(ad::val(student_z)), head, &sg);
  if (info) *info = res;
  Tensor grad(ad::val(student_z).shape);
  const std::size_t k = head.out_dim;
  for (std::size_t s = 0; s < sg.size(); ++s) std::copy(sg[s].begin(), sg[s].end(), grad.data.begin() + s * k);
  return detail::scalar_with_grad(student_z, res.value, std::move(grad));
}

//==============================================================================
// Multi-view contrastive loss

struct ContrastiveConfig {
  double tau_cl = 0.2;
  void validate() const {
    if (!(tau_cl > 0.0)) throw ConfigError("contrastive: tau_cl must be positive");
  }
};

/// InfoNCE summed over anchors. Positives of an anchor are the other views of
/// its sample (summed inside the log); the denominator runs over every other
/// embedding in the batch. Embeddings are L2-normalized first.
inline double contrastive_loss(const std::vector<Vec> &embeddings,
                               const std::vector<std::size_t> &sample_ids,
                               const ContrastiveConfig &cfg, std::vector<Vec> *grad = nullptr) {
  cfg.validate();
  const std::size_t m = embeddings.size();
  if (m == 0 || sample_ids.size() != m) throw Error("contrastive_loss: embeddings/ids mismatch");
  const std::size_t dim = embeddings[0].size();

  std::vector<Vec> u(m, Vec(dim));
  Vec norm(m);
  for (std::size_t a = 0; a < m; ++a) {
    if (embeddings[a].size() != dim) throw ConfigError("contrastive_loss: dimension mismatch");
    double s = 0.0;
    for (double v : embeddings[a]) s += v * v;
    norm[a] = std::max(std::sqrt(s), 1e-12);
    for (std::size_t d = 0; d < dim; ++d) u[a][d] = embeddings[a][d] / norm[a];
  }
  for (std::size_t a = 0; a < m; ++a) {
    std::size_t positives = 0;
    for (std::size_t b = 0; b < m; ++b) positives += (b != a && sample_ids[b] == sample_ids[a]);
    if (positives == 0)
      throw Error("contrastive_loss: sample " + std::to_string(sample_ids[a]) +
                  " has a single view, positive set is empty");
  }

  const double inv_tau = 1.0 / cfg.tau_cl;
  std::vector<Vec> gu;
  if (grad) gu.assign(m, Vec(dim, 0.0));
  Vec e(m);
  double loss = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    double pos = 0.0, neg = 0.0;
    for (std::size_t b = 0; b < m; ++b) {
      if (b == a) continue;
      double c = 0.0;
      for (std::size_t d = 0; d < dim; ++d) c += u[a][d] * u[b][d];
      // shift by the maximum logit 1/tau for stability
      e[b] = std::exp((c - 1.0) * inv_tau);
      (sample_ids[b] == sample_ids[a] ? pos : neg) += e[b];
    }
    const double den = pos + neg;
    loss -= std::log(pos) - std::log(den);
    if (grad) {
      for (std::size_t b = 0; b < m; ++b) {
        if (b == a) continue;
        const bool is_pos = sample_ids[b] == sample_ids[a];
        const double ds = (e[b] / den - (is_pos ? e[b] / pos : 0.0)) * inv_tau; // dL/dcos
        for (std::size_t d = 0; d < dim; ++d) {
          gu[a][d] += ds * u[b][d];
          gu[b][d] += ds * u[a][d];
        }
      }
    }
  }
  if (grad) {
    grad->assign(m, Vec(dim));
    for (std::size_t a = 0; a < m; ++a) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += u[a][d] * gu[a][d];
      for (std::size_t d = 0; d < dim; ++d) (*grad)[a][d] = (gu[a][d] - u[a][d] * dot) / norm[a];
    }
  }
  return loss;
}

/// Graph op over stacked embeddings [M, F].
inline Var contrastive_loss_op(Var embeddings, const std::vector<std::size_t> &sample_ids,
                               const ContrastiveConfig &cfg) {
  std::vector<Vec> g;
  const double v = contrastive_loss(detail::rows_of(ad::val(embeddings)), sample_ids, cfg, &g);
  Tensor grad(ad::val(embeddings).shape);
  const std::size_t f = grad.numel() / g.size();
  for (std::size_t i = 0; i < g.size(); ++i) std::copy(g[i].begin(), g[i].end(), grad.data.begin() + i * f);
  return detail::scalar_with_grad(embeddings, v, std::move(grad));
}

//==============================================================================
// TR regression head

/// Affine map from the pooled feature to 3 logits (tar, tir, tbr).
struct RegressionHead {
  std::size_t in_dim = 64;
  void init_params(ParamStore &ps, Rng &rng) const {
    (void)rng; // zero start: every view predicts (1/3, 1/3, 1/3)
    ps.add("reg.weight", Tensor({in_dim, 3}, 0.0));
    ps.add("reg.bias", Tensor({3}, 0.0));
  }
};

inline Var regression_logits(Graph &g, const ParamStore &ps, Var feature) {
  return linear_p(g, ps, "reg", feature);
}

inline TrMetrics simplex_from_logits(std::span<const double> logits) {
  if (logits.size() != 3) throw ConfigError("expected 3 regression logits");
  const Vec p = softmax(logits);
  return {p[0], p[1], p[2]};
}

/// Inference-only prediction from a feature vector.
inline TrMetrics predict_tr(const ParamStore &ps, const RegressionHead &head,
                            std::span<const double> feature) {
  if (feature.size() != head.in_dim) throw ConfigError("predict_tr: feature dimension mismatch");
  Graph g(false);
  Var f = g.constant(Tensor({feature.size()}, Vec(feature.begin(), feature.end())));
  return simplex_from_logits(ad::val(regression_logits(g, ps, f)).data);
}

/// (1/N) sum over samples of the per-sample mean squared simplex error.
/// `preds[i]` holds the predictions of every student view of sample i.
inline double supervised_loss(const std::vector<std::vector<TrMetrics>> &preds,
                              const std::vector<TrMetrics> &labels) {
  if (preds.size() != labels.size() || preds.empty())
    throw Error("supervised_loss: predictions and labels mismatch");
  double total = 0.0;
  for (std::size_t r = 0; r < preds.size(); ++r) {
    if (preds[r].empty()) throw Error("supervised_loss: sample without predictions");
    double s = 0.0;
    const auto y = labels[r].as_array();
    for (const auto &p : preds[r]) {
      const auto yh = p.as_array();
      for (int j = 0; j < 3; ++j) s += (yh[j] - y[j]) * (yh[j] - y[j]);
    }
    total += s / static_cast<double>(preds[r].size());
  }
  return total / static_cast<double>(preds.size());
}

/// Graph op: supervised loss from regression logits [M, 3]; row i belongs to
/// sample `sample_of[i]` in [0, labels.size()).
inline Var supervised_loss_op(Var logits, const std::vector<std::size_t> &sample_of,
                              const std::vector<TrMetrics> &labels) {
  const Tensor &L = ad::val(logits);
  const std::size_t m = L.dim(0);
  if (L.ndim() != 2 || L.dim(1) != 3 || sample_of.size() != m)
    throw Error("supervised_loss_op: expected [M, 3] logits with one sample index per row");
  std::vector<std::size_t> views(labels.size(), 0);
  for (auto s : sample_of) ++views.at(s);
  std::vector<std::vector<TrMetrics>> preds(labels.size());
  Tensor grad(L.shape);
  const double inv_n = 1.0 / static_cast<double>(labels.size());
  for (std::size_t i = 0; i < m; ++i) {
    const Vec p = softmax(std::span<const double>(L.data.data() + i * 3, 3));
    preds[sample_of[i]].push_back({p[0], p[1], p[2]});
    const auto y = labels[sample_of[i]].as_array();
    const double w = inv_n / static_cast<double>(views[sample_of[i]]);
    // d/dlogit_j of sum_k (p_k - y_k)^2 = 2 p_j ((p_j - y_j) - sum_k p_k (p_k - y_k))
    double dot = 0.0;
    for (int k = 0; k < 3; ++k) dot += p[k] * (p[k] - y[k]);
    for (int j = 0; j < 3; ++j) grad.data[i * 3 + j] = w * 2.0 * p[j] * ((p[j] - y[j]) - dot);
  }
  return detail::scalar_with_grad(logits, supervised_loss(preds, labels), std::move(grad));
}

//==============================================================================
// Total loss

struct LossWeights {
  double lambda_sup = 1.0;
  double lambda_kd = 1.0;
  double lambda_cl = 1.0;
  void validate() const {
    if (!(lambda_sup >= 0.0 && lambda_kd >= 0.0 && lambda_cl >= 0.0))
      throw ConfigError("loss weights must be nonnegative");
  }
  bool operator==(const LossWeights &) const = default;
};

inline double total_loss(double l_sup, double l_kd, double l_cl, const LossWeights &w) {
  w.validate();
  if (!std::isfinite(l_sup)) throw Error("total_loss: non-finite component l_sup");
  if (!std::isfinite(l_kd)) throw Error("total_loss: non-finite component l_kd");
  if (!std::isfinite(l_cl)) throw Error("total_loss: non-finite component l_cl");
  return w.lambda_sup * l_sup + w.lambda_kd * l_kd + w.lambda_cl * l_cl;
}

} // namespace pacd
