// Copyright 2026 The spkloss Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef SPKLOSS_LOSSES_HPP_
#define SPKLOSS_LOSSES_HPP_

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "spkloss/core_math.hpp"
#include "spkloss/sampling.hpp"

namespace spkloss {

/// N speakers x M utterances of D-dimensional embeddings. Row j*M+i of
/// `embeddings` holds utterance i of speaker j.
class EmbeddingBatch {
 public:
  EmbeddingBatch() = default;
  EmbeddingBatch(Matrix embeddings, std::size_t speakers, std::size_t per_speaker,
                 std::vector<std::int64_t> speaker_ids)
      : embeddings_(std::move(embeddings)), speakers_(speakers), per_speaker_(per_speaker),
        speaker_ids_(std::move(speaker_ids)) {
    if (speakers_ == 0 || per_speaker_ == 0)
      throw DomainError("EmbeddingBatch: N and M must be positive");
    if (embeddings_.rows() != speakers_ * per_speaker_)
      throw DomainError("EmbeddingBatch: expected " + std::to_string(speakers_ * per_speaker_) +
                        " rows, got " + std::to_string(embeddings_.rows()));
    if (embeddings_.cols() == 0) throw DomainError("EmbeddingBatch: zero embedding dimension");
    if (speaker_ids_.size() != speakers_)
      throw DomainError("EmbeddingBatch: one speaker id per speaker required");
    if (std::set<std::int64_t>(speaker_ids_.begin(), speaker_ids_.end()).size() != speakers_)
      throw DomainError("EmbeddingBatch: speaker ids must be distinct");
    if (!all_finite(embeddings_.values()))
      throw DomainError("EmbeddingBatch: non-finite embedding entry");
  }

  /// Batch of N speakers with sequential ids 0..N-1.
  static EmbeddingBatch with_sequential_ids(Matrix embeddings, std::size_t speakers,
                                            std::size_t per_speaker) {
    std::vector<std::int64_t> ids(speakers);
    for (std::size_t j = 0; j < speakers; ++j) ids[j] = static_cast<std::int64_t>(j);
    return {std::move(embeddings), speakers, per_speaker, std::move(ids)};
  }

  std::size_t speakers() const { return speakers_; }
  std::size_t per_speaker() const { return per_speaker_; }
  std::size_t dim() const { return embeddings_.cols(); }
  std::size_t rows() const { return embeddings_.rows(); }
  std::size_t row_index(std::size_t j, std::size_t i) const { return j * per_speaker_ + i; }
  std::span<const double> at(std::size_t j, std::size_t i) const {
    return embeddings_.row(row_index(j, i));
  }
  const Matrix& embeddings() const { return embeddings_; }
  const std::vector<std::int64_t>& speaker_ids() const { return speaker_ids_; }

 private:
  Matrix embeddings_;
  std::size_t speakers_ = 0;
  std::size_t per_speaker_ = 0;
  std::vector<std::int64_t> speaker_ids_;
};

/// Last-layer weights (row c is the class-c weight vector) and bias.
struct ClassifierHead {
  Matrix weights;
  Vector bias;

  std::size_t classes() const { return weights.rows(); }
  std::size_t dim() const { return weights.cols(); }

  /// Uniform Glorot initialisation, zero bias.
  static ClassifierHead glorot(std::size_t classes, std::size_t dim, Rng& rng) {
    ClassifierHead head{Matrix(classes, dim), Vector(classes, 0.0)};
    const double limit = std::sqrt(6.0 / static_cast<double>(classes + dim));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (double& w : head.weights.values()) w = u(rng);
    return head;
  }
};

struct MarginConfig {
  double margin = 0.0;
  double scale = 1.0;
};

/// Learnable affine map w*cos + b shared by GE2E and angular prototypical.
struct AffineSimilarityParams {
  double w = 10.0;
  double b = -5.0;

  static constexpr double kMinScale = 1e-6;
  void project() { w = std::max(w, kMinScale); }
};

struct HeadGradient {
  Matrix weights;
  Vector bias;
};

struct LossResult {
  double loss = 0.0;
  Matrix grad_embeddings;
  std::optional<HeadGradient> grad_head;
  std::optional<double> grad_w;
  std::optional<double> grad_b;
  /// Negative speaker chosen for every anchor (triplet loss only).
  std::vector<std::size_t> triplet_negatives;
};

namespace detail {

inline void check_labels(const EmbeddingBatch& batch, std::span<const std::size_t> labels,
                         std::size_t classes, const char* op) {
  if (labels.size() != batch.rows())
    throw DomainError(std::string(op) + ": expected one label per utterance (" +
                      std::to_string(batch.rows()) + "), got " + std::to_string(labels.size()));
  for (std::size_t r = 0; r < labels.size(); ++r)
    if (labels[r] >= classes)
      throw DomainError(std::string(op) + ": label " + std::to_string(labels[r]) +
                        " out of range for " + std::to_string(classes) + " classes");
}

inline void check_head(const EmbeddingBatch& batch, const ClassifierHead& head, const char* op) {
  if (head.classes() == 0 || head.dim() != batch.dim() || head.bias.size() != head.classes())
    throw DomainError(std::string(op) + ": classifier head shape does not match batch");
}

/// Maps the target-class cosine to its logit (before the scale) and returns
/// d(logit)/d(cos) alongside.
struct TargetLogit {
  double value;
  double slope;
};

/// Shared body of NSL, AM-Softmax and AAM-Softmax: logits s*cos for
/// non-targets and s*f(cos) for the target, with gradients flowing through
/// both the embedding and the weight-row normalisation.
template <typename TargetFn>
LossResult cosine_softmax(const EmbeddingBatch& batch, std::span<const std::size_t> labels,
                          const ClassifierHead& head, double scale, TargetFn&& target_fn,
                          const char* op) {
  check_head(batch, head, op);
  check_labels(batch, labels, head.classes(), op);
  if (head.classes() < 2) throw DomainError(std::string(op) + ": needs at least 2 classes");
  if (!(scale > 0.0)) throw DomainError(std::string(op) + ": scale must be positive");

  const std::size_t classes = head.classes();
  const std::size_t dim = batch.dim();
  const std::size_t rows = batch.rows();
  const double inv_rows = 1.0 / static_cast<double>(rows);

  std::vector<Normalized> w_hat;
  w_hat.reserve(classes);
  for (std::size_t c = 0; c < classes; ++c)
    w_hat.push_back(normalize(head.weights.row(c), std::string(op) + ": weight row",
                              static_cast<std::ptrdiff_t>(c)));

  LossResult out;
  out.grad_embeddings = Matrix(rows, dim);
  Matrix grad_w_unit(classes, dim);  // accumulated w.r.t. normalised rows
  Vector logits(classes), cosines(classes), grad_x_unit(dim);

  for (std::size_t r = 0; r < rows; ++r) {
    const Normalized x_hat =
        normalize(batch.embeddings().row(r), op, static_cast<std::ptrdiff_t>(r));
    const std::size_t y = labels[r];
    TargetLogit target{};
    for (std::size_t c = 0; c < classes; ++c) {
      cosines[c] = std::clamp(dot(x_hat.unit, w_hat[c].unit), -1.0, 1.0);
      if (c == y) {
        target = target_fn(cosines[c]);
        logits[c] = scale * target.value;
      } else {
        logits[c] = scale * cosines[c];
      }
    }
    const CrossEntropy ce = softmax_cross_entropy(logits, y);
    out.loss += ce.loss * inv_rows;

    std::fill(grad_x_unit.begin(), grad_x_unit.end(), 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
      const double slope = (c == y) ? target.slope : 1.0;
      const double g_cos = ce.grad_logits[c] * scale * slope * inv_rows;
      if (g_cos == 0.0) continue;
      auto w_row = grad_w_unit.row(c);
      for (std::size_t d = 0; d < dim; ++d) {
        grad_x_unit[d] += g_cos * w_hat[c].unit[d];
        w_row[d] += g_cos * x_hat.unit[d];
      }
    }
    accumulate_through_normalization(grad_x_unit, x_hat, out.grad_embeddings.row(r));
  }

  HeadGradient hg{Matrix(classes, dim), Vector(classes, 0.0)};
  for (std::size_t c = 0; c < classes; ++c)
    accumulate_through_normalization(grad_w_unit.row(c), w_hat[c], hg.weights.row(c));
  out.grad_head = std::move(hg);
  return out;
}

}  // namespace detail

/// Softmax cross-entropy on affine logits W x + b, averaged over utterances.
inline LossResult softmax_loss(const EmbeddingBatch& batch, std::span<const std::size_t> labels,
                               const ClassifierHead& head) {
  detail::check_head(batch, head, "softmax_loss");
  detail::check_labels(batch, labels, head.classes(), "softmax_loss");
  const std::size_t classes = head.classes();
  const std::size_t dim = batch.dim();
  const std::size_t rows = batch.rows();
  const double inv_rows = 1.0 / static_cast<double>(rows);

  LossResult out;
  out.grad_embeddings = Matrix(rows, dim);
  HeadGradient hg{Matrix(classes, dim), Vector(classes, 0.0)};
  Vector logits(classes);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto x = batch.embeddings().row(r);
    for (std::size_t c = 0; c < classes; ++c) logits[c] = dot(head.weights.row(c), x) + head.bias[c];
    const CrossEntropy ce = softmax_cross_entropy(logits, labels[r]);
    out.loss += ce.loss * inv_rows;
    auto gx = out.grad_embeddings.row(r);
    for (std::size_t c = 0; c < classes; ++c) {
      const double g = ce.grad_logits[c] * inv_rows;
      if (g == 0.0) continue;
      hg.bias[c] += g;
      auto gw = hg.weights.row(c);
      const auto w = head.weights.row(c);
      for (std::size_t d = 0; d < dim; ++d) {
        gx[d] += g * w[d];
        gw[d] += g * x[d];
      }
    }
  }
  out.grad_head = std::move(hg);
  return out;
}

/// Normalised softmax: logits are plain cosines, no scale and no margin.
inline LossResult nsl_loss(const EmbeddingBatch& batch, std::span<const std::size_t> labels,
                           const ClassifierHead& head) {
  return detail::cosine_softmax(
      batch, labels, head, 1.0, [](double c) { return detail::TargetLogit{c, 1.0}; }, "nsl_loss");
}

/// Additive cosine margin: target logit s*(cos - m).
inline LossResult am_softmax_loss(const EmbeddingBatch& batch, std::span<const std::size_t> labels,
                                  const ClassifierHead& head, const MarginConfig& cfg) {
  if (!(cfg.margin >= 0.0)) throw DomainError("am_softmax_loss: margin must be >= 0");
  const double m = cfg.margin;
  return detail::cosine_softmax(
      batch, labels, head, cfg.scale,
      [m](double c) { return detail::TargetLogit{c - m, 1.0}; }, "am_softmax_loss");
}

/// True when the AAM target angle theta + m passes pi, i.e. cos(theta) < -cos(m).
inline bool aam_in_fallback(double cosine, double margin) { return cosine < -std::cos(margin); }

/// Additive angular margin: target logit s*cos(theta + m), falling back to
/// s*(cos(theta) - m*sin(m)) once theta + m > pi.
inline LossResult aam_softmax_loss(const EmbeddingBatch& batch, std::span<const std::size_t> labels,
                                   const ClassifierHead& head, const MarginConfig& cfg) {
  if (!(cfg.margin >= 0.0) || !(cfg.margin < std::numbers::pi / 2))
    throw DomainError("aam_softmax_loss: margin must lie in [0, pi/2)");
  const double cos_m = std::cos(cfg.margin);
  const double sin_m = std::sin(cfg.margin);
  const double fallback_shift = cfg.margin * sin_m;
  return detail::cosine_softmax(
      batch, labels, head, cfg.scale,
      [=](double c) {
        if (c < -cos_m) return detail::TargetLogit{c - fallback_shift, 1.0};
        const double sin_theta = std::sqrt(std::max(0.0, 1.0 - c * c));
        // d/dc [c cos m - sqrt(1-c^2) sin m]; the derivative blows up at
        // |c| = 1, so the sine is floored.
        const double slope = cos_m + c * sin_m / std::max(sin_theta, 1e-12);
        return detail::TargetLogit{c * cos_m - sin_theta * sin_m, slope};
      },
      "aam_softmax_loss");
}

/// Squared distances on L2-normalised embeddings from every anchor x_{j,0}
/// to every candidate x_{k,1}; entry (j, k).
inline Matrix triplet_distances(const EmbeddingBatch& batch) {
  if (batch.per_speaker() != 2) throw DomainError("triplet_loss: requires M = 2");
  const std::size_t n = batch.speakers();
  std::vector<Normalized> anchors, others;
  for (std::size_t j = 0; j < n; ++j) {
    anchors.push_back(normalize(batch.at(j, 0), "triplet_loss: anchor embedding"));
    others.push_back(normalize(batch.at(j, 1), "triplet_loss: positive embedding"));
  }
  Matrix d(n, n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < n; ++k) d(j, k) = squared_euclidean(anchors[j].unit, others[k].unit);
  return d;
}

/// Hinge triplet loss max(0, d_pos - d_neg + m) on L2-normalised embeddings,
/// averaged over anchors, with explicit negative speaker per anchor.
inline LossResult triplet_loss(const EmbeddingBatch& batch, double margin,
                               std::span<const std::size_t> negatives) {
  if (batch.per_speaker() != 2) throw DomainError("triplet_loss: requires M = 2");
  const std::size_t n = batch.speakers();
  if (n < 2) throw DomainError("triplet_loss: needs N >= 2 speakers for a negative");
  if (negatives.size() != n) throw DomainError("triplet_loss: one negative per anchor required");
  const std::size_t dim = batch.dim();

  std::vector<Normalized> unit;
  unit.reserve(batch.rows());
  for (std::size_t r = 0; r < batch.rows(); ++r)
    unit.push_back(normalize(batch.embeddings().row(r), "triplet_loss: embedding"));

  LossResult out;
  Matrix grad_unit(batch.rows(), dim);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t k = negatives[j];
    if (k >= n || k == j) throw DomainError("triplet_loss: invalid negative index");
    const auto& a = unit[batch.row_index(j, 0)].unit;
    const auto& p = unit[batch.row_index(j, 1)].unit;
    const auto& q = unit[batch.row_index(k, 1)].unit;
    const double violation = squared_euclidean(a, p) - squared_euclidean(a, q) + margin;
    if (!(violation > 0.0)) continue;
    out.loss += violation * inv_n;
    auto ga = grad_unit.row(batch.row_index(j, 0));
    auto gp = grad_unit.row(batch.row_index(j, 1));
    auto gq = grad_unit.row(batch.row_index(k, 1));
    for (std::size_t d = 0; d < dim; ++d) {
      ga[d] += 2.0 * inv_n * (q[d] - p[d]);
      gp[d] += 2.0 * inv_n * (p[d] - a[d]);
      gq[d] += 2.0 * inv_n * (a[d] - q[d]);
    }
  }
  out.grad_embeddings = Matrix(batch.rows(), dim);
  for (std::size_t r = 0; r < batch.rows(); ++r)
    accumulate_through_normalization(grad_unit.row(r), unit[r], out.grad_embeddings.row(r));
  out.triplet_negatives.assign(negatives.begin(), negatives.end());
  return out;
}

/// Chooses one negative per anchor with `policy` at `epoch`.
inline std::vector<std::size_t> mine_triplet_negatives(const EmbeddingBatch& batch,
                                                       const MiningPolicy& policy, int epoch,
                                                       Rng& rng) {
  const std::size_t n = batch.speakers();
  if (n < 2) throw DomainError("triplet_loss: needs N >= 2 speakers for a negative");
  const Matrix d = triplet_distances(batch);
  std::vector<std::size_t> negatives(n);
  Vector candidates;
  for (std::size_t j = 0; j < n; ++j) {
    candidates.clear();
    for (std::size_t k = 0; k < n; ++k)
      if (k != j) candidates.push_back(d(j, k));
    negatives[j] = select_negative(j, candidates, policy, epoch, rng);
  }
  return negatives;
}

inline LossResult triplet_loss(const EmbeddingBatch& batch, double margin,
                               const MiningPolicy& policy, int epoch, Rng& rng) {
  const auto negatives = mine_triplet_negatives(batch, policy, epoch, rng);
  return triplet_loss(batch, margin, negatives);
}

namespace detail {

inline void require_episodic(const EmbeddingBatch& batch, const char* op, bool need_two_speakers) {
  if (batch.per_speaker() < 2)
    throw DomainError(std::string(op) + ": requires M >= 2 (support set would be empty)");
  if (need_two_speakers && batch.speakers() < 2)
    throw DomainError(std::string(op) + ": requires N >= 2 speakers");
}

/// Mean of utterances 0..M-2 of every speaker (the support set).
inline Matrix support_centroids(const EmbeddingBatch& batch) {
  const std::size_t n = batch.speakers();
  const std::size_t support = batch.per_speaker() - 1;
  Matrix c(n, batch.dim());
  for (std::size_t k = 0; k < n; ++k) {
    auto row = c.row(k);
    for (std::size_t i = 0; i < support; ++i) {
      const auto x = batch.at(k, i);
      for (std::size_t d = 0; d < row.size(); ++d) row[d] += x[d];
    }
    for (double& v : row) v /= static_cast<double>(support);
  }
  return c;
}

/// Mean of every utterance of speaker `j` except utterance `i`, summed
/// directly so the result does not depend on x_{j,i} at all.
inline void exclusive_centroid(const EmbeddingBatch& batch, std::size_t j, std::size_t i,
                               std::span<double> out) {
  const std::size_t m = batch.per_speaker();
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t other = 0; other < m; ++other) {
    if (other == i) continue;
    const auto x = batch.at(j, other);
    for (std::size_t d = 0; d < out.size(); ++d) out[d] += x[d];
  }
  const double inv = 1.0 / static_cast<double>(m - 1);
  for (double& v : out) v *= inv;
}

/// Spreads centroid gradients back onto the support utterances.
inline void scatter_support(const EmbeddingBatch& batch, const Matrix& grad_centroids,
                            Matrix& grad_embeddings) {
  const std::size_t support = batch.per_speaker() - 1;
  const double share = 1.0 / static_cast<double>(support);
  for (std::size_t k = 0; k < batch.speakers(); ++k)
    for (std::size_t i = 0; i < support; ++i) {
      auto g = grad_embeddings.row(batch.row_index(k, i));
      const auto gc = grad_centroids.row(k);
      for (std::size_t d = 0; d < g.size(); ++d) g[d] += share * gc[d];
    }
}

}  // namespace detail

/// Prototypical loss: query = last utterance of each speaker, logits are
/// negative squared distances to the support centroids.
inline LossResult prototypical_loss(const EmbeddingBatch& batch) {
  detail::require_episodic(batch, "prototypical_loss", false);
  const std::size_t n = batch.speakers();
  const std::size_t dim = batch.dim();
  const std::size_t query = batch.per_speaker() - 1;
  const Matrix centroids = detail::support_centroids(batch);
  const double inv_n = 1.0 / static_cast<double>(n);

  LossResult out;
  out.grad_embeddings = Matrix(batch.rows(), dim);
  Matrix grad_c(n, dim);
  Vector logits(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto q = batch.at(j, query);
    for (std::size_t k = 0; k < n; ++k) logits[k] = -squared_euclidean(q, centroids.row(k));
    const CrossEntropy ce = softmax_cross_entropy(logits, j);
    out.loss += ce.loss * inv_n;
    auto gq = out.grad_embeddings.row(batch.row_index(j, query));
    for (std::size_t k = 0; k < n; ++k) {
      const double g = ce.grad_logits[k] * inv_n;
      const auto c = centroids.row(k);
      auto gc = grad_c.row(k);
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = q[d] - c[d];
        gq[d] -= 2.0 * g * diff;
        gc[d] += 2.0 * g * diff;
      }
    }
  }
  detail::scatter_support(batch, grad_c, out.grad_embeddings);
  return out;
}

/// Angular prototypical loss: prototypical batch formation with logits
/// w*cos(query, centroid) + b.
inline LossResult angular_prototypical_loss(const EmbeddingBatch& batch,
                                            const AffineSimilarityParams& params) {
  detail::require_episodic(batch, "angular_prototypical_loss", true);
  const std::size_t n = batch.speakers();
  const std::size_t dim = batch.dim();
  const std::size_t query = batch.per_speaker() - 1;
  const Matrix centroids = detail::support_centroids(batch);
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<Normalized> q_hat, c_hat;
  for (std::size_t j = 0; j < n; ++j) {
    q_hat.push_back(normalize(batch.at(j, query), "angular_prototypical_loss: query"));
    c_hat.push_back(normalize(centroids.row(j), "angular_prototypical_loss: centroid"));
  }

  LossResult out;
  out.grad_embeddings = Matrix(batch.rows(), dim);
  Matrix grad_c_unit(n, dim);
  double grad_w = 0.0, grad_b = 0.0;
  Vector logits(n), cosines(n), gq_unit(dim);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      cosines[k] = std::clamp(dot(q_hat[j].unit, c_hat[k].unit), -1.0, 1.0);
      logits[k] = params.w * cosines[k] + params.b;
    }
    const CrossEntropy ce = softmax_cross_entropy(logits, j);
    out.loss += ce.loss * inv_n;
    std::fill(gq_unit.begin(), gq_unit.end(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      const double g = ce.grad_logits[k] * inv_n;
      grad_w += g * cosines[k];
      grad_b += g;
      const double g_cos = g * params.w;
      auto gc = grad_c_unit.row(k);
      for (std::size_t d = 0; d < dim; ++d) {
        gq_unit[d] += g_cos * c_hat[k].unit[d];
        gc[d] += g_cos * q_hat[j].unit[d];
      }
    }
    accumulate_through_normalization(gq_unit, q_hat[j],
                                     out.grad_embeddings.row(batch.row_index(j, query)));
  }
  Matrix grad_c(n, dim);
  for (std::size_t k = 0; k < n; ++k)
    accumulate_through_normalization(grad_c_unit.row(k), c_hat[k], grad_c.row(k));
  detail::scatter_support(batch, grad_c, out.grad_embeddings);
  out.grad_w = grad_w;
  out.grad_b = grad_b;
  return out;
}

/// Generalised end-to-end loss. Every utterance is a query; its own-speaker
/// centroid excludes the query itself, other centroids use all M utterances.
/// Averaged over all N*M queries.
inline LossResult ge2e_loss(const EmbeddingBatch& batch, const AffineSimilarityParams& params) {
  detail::require_episodic(batch, "ge2e_loss", true);
  const std::size_t n = batch.speakers();
  const std::size_t m = batch.per_speaker();
  const std::size_t dim = batch.dim();
  const double inv_queries = 1.0 / static_cast<double>(n * m);
  const double inv_m = 1.0 / static_cast<double>(m);
  const double inv_m1 = 1.0 / static_cast<double>(m - 1);

  // Full centroids; the exclusive one is rebuilt per query.
  Matrix sums(n, dim);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < m; ++i) {
      const auto x = batch.at(k, i);
      auto s = sums.row(k);
      for (std::size_t d = 0; d < dim; ++d) s[d] += x[d];
    }
  std::vector<Normalized> full;
  for (std::size_t k = 0; k < n; ++k) {
    Vector c(sums.row(k).begin(), sums.row(k).end());
    for (double& v : c) v *= inv_m;
    full.push_back(normalize(c, "ge2e_loss: centroid"));
  }

  LossResult out;
  out.grad_embeddings = Matrix(batch.rows(), dim);
  Matrix grad_full_unit(n, dim);
  double grad_w = 0.0, grad_b = 0.0;
  Vector logits(n), cosines(n), gx_unit(dim), gexcl_unit(dim), excl(dim), gexcl(dim, 0.0);

  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) {
      const auto x = batch.at(j, i);
      const Normalized x_hat = normalize(x, "ge2e_loss: embedding");
      detail::exclusive_centroid(batch, j, i, excl);
      const Normalized excl_hat = normalize(excl, "ge2e_loss: exclusive centroid");

      for (std::size_t k = 0; k < n; ++k) {
        const auto& c = (k == j) ? excl_hat.unit : full[k].unit;
        cosines[k] = std::clamp(dot(x_hat.unit, c), -1.0, 1.0);
        logits[k] = params.w * cosines[k] + params.b;
      }
      const CrossEntropy ce = softmax_cross_entropy(logits, j);
      out.loss += ce.loss * inv_queries;

      std::fill(gx_unit.begin(), gx_unit.end(), 0.0);
      std::fill(gexcl_unit.begin(), gexcl_unit.end(), 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        const double g = ce.grad_logits[k] * inv_queries;
        grad_w += g * cosines[k];
        grad_b += g;
        const double g_cos = g * params.w;
        if (k == j) {
          for (std::size_t d = 0; d < dim; ++d) {
            gx_unit[d] += g_cos * excl_hat.unit[d];
            gexcl_unit[d] += g_cos * x_hat.unit[d];
          }
        } else {
          auto gc = grad_full_unit.row(k);
          for (std::size_t d = 0; d < dim; ++d) {
            gx_unit[d] += g_cos * full[k].unit[d];
            gc[d] += g_cos * x_hat.unit[d];
          }
        }
      }
      accumulate_through_normalization(gx_unit, x_hat, out.grad_embeddings.row(batch.row_index(j, i)));
      // Exclusive centroid: every other utterance of speaker j gets 1/(M-1).
      std::fill(gexcl.begin(), gexcl.end(), 0.0);
      accumulate_through_normalization(gexcl_unit, excl_hat, gexcl);
      for (std::size_t other = 0; other < m; ++other) {
        if (other == i) continue;
        auto g = out.grad_embeddings.row(batch.row_index(j, other));
        for (std::size_t d = 0; d < dim; ++d) g[d] += inv_m1 * gexcl[d];
      }
    }
  }
  Vector gfull(dim);
  for (std::size_t k = 0; k < n; ++k) {
    std::fill(gfull.begin(), gfull.end(), 0.0);
    accumulate_through_normalization(grad_full_unit.row(k), full[k], gfull);
    for (std::size_t i = 0; i < m; ++i) {
      auto g = out.grad_embeddings.row(batch.row_index(k, i));
      for (std::size_t d = 0; d < dim; ++d) g[d] += inv_m * gfull[d];
    }
  }
  out.grad_w = grad_w;
  out.grad_b = grad_b;
  return out;
}

}  // namespace spkloss

#endif  // SPKLOSS_LOSSES_HPP_
