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

// Shared helpers for the unit tests and the acceptance runner: random
// fixtures, central finite differences and independent reference
// implementations.

#ifndef SPKLOSS_TESTS_SUPPORT_HPP_
#define SPKLOSS_TESTS_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spkloss/core_math.hpp"
#include "spkloss/evaluation.hpp"
#include "spkloss/losses.hpp"
#include "spkloss/trainer.hpp"

namespace spkloss::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double sigma = 1.0) {
  Matrix m(rows, cols);
  std::normal_distribution<double> g(0.0, sigma);
  for (double& v : m.values()) v = g(rng);
  return m;
}

inline Vector random_vector(std::size_t n, Rng& rng, double sigma = 1.0) {
  Vector v(n);
  std::normal_distribution<double> g(0.0, sigma);
  for (double& x : v) x = g(rng);
  return v;
}

inline EmbeddingBatch random_batch(std::size_t n, std::size_t m, std::size_t d, Rng& rng,
                                   double sigma = 1.0) {
  return EmbeddingBatch::with_sequential_ids(random_matrix(n * m, d, rng, sigma), n, m);
}

inline ClassifierHead random_head(std::size_t c, std::size_t d, Rng& rng, double sigma = 1.0) {
  return {random_matrix(c, d, rng, sigma), random_vector(c, rng, sigma)};
}

inline std::vector<std::size_t> random_labels(std::size_t rows, std::size_t classes, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  std::vector<std::size_t> labels(rows);
  for (auto& l : labels) l = pick(rng);
  return labels;
}

inline EmbeddingBatch with_embeddings(const EmbeddingBatch& b, Matrix e) {
  return {std::move(e), b.speakers(), b.per_speaker(), b.speaker_ids()};
}

/// Central differences of `f` with respect to every entry of `x` (restored on exit).
inline Vector central_differences(std::span<double> x, const std::function<double()>& f,
                                  double step = 1e-5) {
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double up = f();
    x[i] = keep - step;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// Largest per-entry relative error |a - n| / max(|a|, |n|, floor).
struct GradientComparison {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t entries = 0;
};

inline constexpr double kRelFloor = 1e-3;

inline void compare_into(GradientComparison& acc, std::span<const double> analytic,
                         std::span<const double> numeric, double floor = kRelFloor) {
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::abs(analytic[i] - numeric[i]);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    acc.max_rel = std::max(acc.max_rel, diff / denom);
    acc.max_abs = std::max(acc.max_abs, diff);
    ++acc.entries;
  }
}

/// One randomly drawn loss configuration with closures for value and
/// analytic gradient.
struct LossCase {
  std::string description;
  Matrix embeddings;
  std::size_t n = 0, m = 0;
  std::optional<ClassifierHead> head;
  std::optional<AffineSimilarityParams> affine;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> negatives;
  MarginConfig margin;
  double triplet_margin = 0.0;
};

inline LossResult evaluate_case(Objective o, const LossCase& c) {
  const EmbeddingBatch batch = EmbeddingBatch::with_sequential_ids(c.embeddings, c.n, c.m);
  switch (o) {
    case Objective::kSoftmax: return softmax_loss(batch, c.labels, *c.head);
    case Objective::kAmSoftmax: return am_softmax_loss(batch, c.labels, *c.head, c.margin);
    case Objective::kAamSoftmax: return aam_softmax_loss(batch, c.labels, *c.head, c.margin);
    case Objective::kTriplet: return triplet_loss(batch, c.triplet_margin, c.negatives);
    case Objective::kGe2e: return ge2e_loss(batch, *c.affine);
    case Objective::kPrototypical: return prototypical_loss(batch);
    case Objective::kAngularPrototypical: return angular_prototypical_loss(batch, *c.affine);
  }
  return {};
}

/// True when a finite-difference probe of size `step` could cross a
/// non-differentiable point of the loss.
inline bool near_kink(Objective o, const LossCase& c, double guard = 1e-6) {
  const EmbeddingBatch batch = EmbeddingBatch::with_sequential_ids(c.embeddings, c.n, c.m);
  if (o == Objective::kTriplet) {
    const Matrix d = triplet_distances(batch);
    for (std::size_t j = 0; j < c.n; ++j)
      if (std::abs(d(j, j) - d(j, c.negatives[j]) + c.triplet_margin) < guard) return true;
  }
  if (o == Objective::kAamSoftmax) {
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      const double cs = cosine_similarity(batch.embeddings().row(r), c.head->weights.row(c.labels[r]));
      if (std::abs(cs + std::cos(c.margin.margin)) < guard || std::abs(std::abs(cs) - 1.0) < guard)
        return true;
    }
  }
  return false;
}

/// Draws a random, well-posed configuration for objective `o`. Embedding
/// norms are around `sigma * sqrt(D)`.
inline LossCase draw_case(Objective o, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick_n(2, 6), pick_m(2, 4), pick_d(3, 8), pick_c(2, 7);
  LossCase c;
  const std::size_t d = pick_d(rng);
  c.n = pick_n(rng);
  c.m = is_classification(o) ? std::uniform_int_distribution<std::size_t>(1, 3)(rng)
        : o == Objective::kTriplet ? 2
                                   : pick_m(rng);
  double sigma = 1.0;
  if (o == Objective::kAmSoftmax || o == Objective::kAamSoftmax) {
    static constexpr double kMargins[] = {0.1, 0.2, 0.3, 0.4};
    static constexpr double kScales[] = {15.0, 30.0, 50.0};
    c.margin = {kMargins[rng() % 4], kScales[rng() % 3]};
    sigma = 3.0;
  }
  c.embeddings = random_matrix(c.n * c.m, d, rng, sigma);
  if (is_classification(o)) {
    const std::size_t classes = pick_c(rng);
    c.head = random_head(classes, d, rng, sigma);
    c.labels = random_labels(c.n * c.m, classes, rng);
  }
  if (uses_affine(o)) {
    std::uniform_real_distribution<double> w(0.5, 12.0), b(-6.0, 2.0);
    c.affine = AffineSimilarityParams{w(rng), b(rng)};
  }
  if (o == Objective::kTriplet) {
    std::uniform_real_distribution<double> margin(0.1, 1.5);
    c.triplet_margin = margin(rng);
    c.negatives.resize(c.n);
    for (std::size_t j = 0; j < c.n; ++j) {
      std::size_t k = std::uniform_int_distribution<std::size_t>(0, c.n - 2)(rng);
      c.negatives[j] = k >= j ? k + 1 : k;
    }
  }
  c.description = std::string(objective_name(o)) + " N=" + std::to_string(c.n) +
                  " M=" + std::to_string(c.m) + " D=" + std::to_string(d);
  return c;
}

/// Finite-difference check of every gradient the objective reports.
inline GradientComparison check_case_gradients(Objective o, LossCase c, double step = 1e-5) {
  const LossResult analytic = evaluate_case(o, c);
  GradientComparison cmp;
  auto value = [&] { return evaluate_case(o, c).loss; };
  compare_into(cmp, analytic.grad_embeddings.values(),
               central_differences(c.embeddings.values(), value, step));
  if (c.head) {
    compare_into(cmp, analytic.grad_head->weights.values(),
                 central_differences(c.head->weights.values(), value, step));
    compare_into(cmp, analytic.grad_head->bias, central_differences(c.head->bias, value, step));
  }
  if (c.affine) {
    compare_into(cmp, std::span<const double>(&*analytic.grad_w, 1),
                 central_differences(std::span<double>(&c.affine->w, 1), value, step));
    compare_into(cmp, std::span<const double>(&*analytic.grad_b, 1),
                 central_differences(std::span<double>(&c.affine->b, 1), value, step));
  }
  return cmp;
}

/// Direct translation of the GE2E definition: full centroids, exclusive
/// centroid for the query's own speaker, w*cos+b similarities and softmax
/// cross-entropy, summed over every (j, i) query. Written with long double
/// and no shared code with the library.
inline long double ge2e_reference_sum(const std::vector<std::vector<Vector>>& x, double w, double b) {
  const std::size_t n = x.size(), m = x[0].size(), d = x[0][0].size();
  auto cosine = [d](const std::vector<long double>& a, const std::vector<long double>& c) {
    long double ab = 0, aa = 0, cc = 0;
    for (std::size_t k = 0; k < d; ++k) {
      ab += a[k] * c[k];
      aa += a[k] * a[k];
      cc += c[k] * c[k];
    }
    return ab / std::sqrt(aa * cc);
  };
  std::vector<std::vector<long double>> full(n, std::vector<long double>(d, 0));
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t mm = 0; mm < m; ++mm)
      for (std::size_t t = 0; t < d; ++t) full[k][t] += x[k][mm][t] / static_cast<long double>(m);
  long double total = 0;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) {
      std::vector<long double> q(x[j][i].begin(), x[j][i].end());
      std::vector<long double> excl(d, 0);
      for (std::size_t mm = 0; mm < m; ++mm)
        if (mm != i)
          for (std::size_t t = 0; t < d; ++t) excl[t] += x[j][mm][t] / static_cast<long double>(m - 1);
      std::vector<long double> s(n);
      for (std::size_t k = 0; k < n; ++k) s[k] = w * cosine(q, k == j ? excl : full[k]) + b;
      long double denom = 0;
      for (std::size_t k = 0; k < n; ++k) denom += std::exp(s[k]);
      total -= std::log(std::exp(s[j]) / denom);
    }
  return total;
}

/// Brute-force EER: every distinct score and +inf as a threshold, FRR/FAR by
/// direct counting, linear interpolation across the first sign change.
inline double brute_force_eer(const std::vector<double>& scores, const std::vector<bool>& targets) {
  std::vector<double> thresholds(scores);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.push_back(std::numeric_limits<double>::infinity());
  long long n_t = 0, n_n = 0;
  for (bool t : targets) (t ? n_t : n_n)++;
  double prev_frr = 0, prev_far = 0;
  long long prev_diff_num = 0;
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    long long rej = 0, acc = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (targets[i] && scores[i] < thresholds[k]) ++rej;
      if (!targets[i] && scores[i] >= thresholds[k]) ++acc;
    }
    const double frr = static_cast<double>(rej) / static_cast<double>(n_t);
    const double far = static_cast<double>(acc) / static_cast<double>(n_n);
    const long long diff_num = rej * n_n - acc * n_t;  // sign of FRR - FAR
    if (diff_num >= 0) {
      if (diff_num == 0 || k == 0) return frr;
      const double d0 = static_cast<double>(prev_diff_num);
      const double d1 = static_cast<double>(diff_num);
      const double a = -d0 / (d1 - d0);
      return prev_frr + a * (frr - prev_frr);
    }
    prev_frr = frr;
    prev_far = far;
    prev_diff_num = diff_num;
  }
  (void)prev_far;
  return 0.5;
}

/// Closed-form ten-crop start: round(k * (T - L) / (n - 1)), 0 when T <= L.
inline std::size_t closed_form_start(std::size_t k, std::size_t t, std::size_t l, std::size_t n) {
  if (t <= l || n < 2) return 0;
  return static_cast<std::size_t>(std::floor(static_cast<double>(k * (t - l)) / static_cast<double>(n - 1) + 0.5));
}

/// EER of cosine scoring on raw temporal means, with no embedder and no MVN.
inline double temporal_mean_eer(const Corpus& c) {
  std::vector<Vector> means;
  for (const auto& u : c.test.utterances) {
    Vector m(u.features(), 0.0);
    for (std::size_t t = 0; t < u.length(); ++t)
      for (std::size_t f = 0; f < u.features(); ++f) m[f] += u.frames(t, f);
    means.push_back(std::move(m));
  }
  ScoredTrials s;
  for (const auto& t : c.trials) {
    s.scores.push_back(cosine_similarity(means[t.a], means[t.b]));
    s.targets.push_back(t.target);
  }
  return compute_eer(s).eer;
}

/// Small world for trainer tests: tiny synthetic corpus.
inline SynthSpec small_spec() {
  SynthSpec s;
  s.train_speakers = 12;
  s.test_speakers = 6;
  s.utterances_per_speaker = 8;
  s.min_frames = 12;
  s.max_frames = 30;
  s.features = 8;
  s.pairs_per_class = 60;
  return s;
}

}  // namespace spkloss::testing

#endif  // SPKLOSS_TESTS_SUPPORT_HPP_
