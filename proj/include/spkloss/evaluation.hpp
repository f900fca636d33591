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

#ifndef SPKLOSS_EVALUATION_HPP_
#define SPKLOSS_EVALUATION_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spkloss/core_math.hpp"
#include "spkloss/embedder.hpp"
#include "spkloss/synthdata.hpp"

namespace spkloss {

/// Start offsets of `num_crops` windows of min(crop_len, T) frames, evenly
/// spaced over [0, T - crop_len] and rounded to the nearest frame.
inline std::vector<std::size_t> crop_starts(std::size_t t_len, std::size_t crop_len,
                                            std::size_t num_crops) {
  if (crop_len < 1) throw DomainError("ten_crop: crop_len must be >= 1");
  std::vector<std::size_t> starts(num_crops, 0);
  if (t_len <= crop_len || num_crops < 2) return starts;
  const double slack = static_cast<double>(t_len - crop_len);
  for (std::size_t k = 0; k < num_crops; ++k)
    starts[k] = static_cast<std::size_t>(
        std::lround(static_cast<double>(k) * slack / static_cast<double>(num_crops - 1)));
  return starts;
}

inline std::vector<Matrix> ten_crop(const Matrix& frames, std::size_t crop_len,
                                    std::size_t num_crops = 10) {
  const std::size_t t_len = frames.rows();
  const std::size_t len = std::min(crop_len, t_len);
  std::vector<Matrix> crops;
  crops.reserve(num_crops);
  for (std::size_t start : crop_starts(t_len, crop_len, num_crops)) {
    Matrix c(len, frames.cols());
    std::copy_n(frames.data() + start * frames.cols(), len * frames.cols(), c.data());
    crops.push_back(std::move(c));
  }
  return crops;
}

enum class ScoreMetric {
  kCosine,
  /// Negated squared distance between L2-normalised embeddings.
  kNegSquaredEuclidean,
};

inline std::optional<ScoreMetric> parse_score_metric(std::string_view s) {
  if (s == "cosine") return ScoreMetric::kCosine;
  if (s == "neg_sq_euclidean") return ScoreMetric::kNegSquaredEuclidean;
  return std::nullopt;
}

/// Mean similarity over every (crop of A, crop of B) combination.
inline double score_trial(std::span<const Vector> crops_a, std::span<const Vector> crops_b,
                          ScoreMetric metric = ScoreMetric::kCosine) {
  if (crops_a.empty() || crops_b.empty()) throw DomainError("score_trial: empty crop list");
  double total = 0.0;
  if (metric == ScoreMetric::kCosine) {
    for (const auto& a : crops_a)
      for (const auto& b : crops_b) total += cosine_similarity(a, b);
  } else {
    std::vector<Normalized> nb;
    for (const auto& b : crops_b) nb.push_back(normalize(b, "score_trial: crop embedding"));
    for (const auto& a : crops_a) {
      const Normalized na = normalize(a, "score_trial: crop embedding");
      for (const auto& b : nb) total -= squared_euclidean(na.unit, b.unit);
    }
  }
  return total / static_cast<double>(crops_a.size() * crops_b.size());
}

struct ScoredTrials {
  std::vector<double> scores;
  std::vector<bool> targets;
};

struct OperatingPoint {
  double threshold = 0.0;
  double far = 0.0;  // fraction of non-target trials with score >= threshold
  double frr = 0.0;  // fraction of target trials with score < threshold
};

struct EvalReport {
  double eer = 0.0;
  double threshold = 0.0;
  std::size_t target_trials = 0;
  std::size_t nontarget_trials = 0;
  std::vector<OperatingPoint> roc;
};

/// Equal error rate. Operating points are taken at every distinct score plus
/// +inf (accept nothing); FRR - FAR is non-decreasing along them, and the EER
/// is read where it first reaches zero, interpolating linearly (in the
/// threshold and both rates) between the two bracketing points.
inline EvalReport compute_eer(const ScoredTrials& scored) {
  if (scored.scores.size() != scored.targets.size())
    throw DomainError("compute_eer: score/target count mismatch");
  EvalReport report;
  for (bool t : scored.targets) (t ? report.target_trials : report.nontarget_trials) += 1;
  if (report.target_trials == 0 || report.nontarget_trials == 0)
    throw DomainError("compute_eer: needs at least one target and one non-target trial");
  if (!all_finite(scored.scores)) throw DomainError("compute_eer: non-finite score");

  std::vector<std::size_t> order(scored.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scored.scores[a] < scored.scores[b]; });

  const double n_tgt = static_cast<double>(report.target_trials);
  const double n_non = static_cast<double>(report.nontarget_trials);
  // Integer counts per point: (targets below, non-targets at or above).
  std::vector<std::pair<std::size_t, std::size_t>> counts;
  std::size_t targets_below = 0, nontargets_below = 0;
  for (std::size_t pos = 0; pos < order.size();) {
    const double t = scored.scores[order[pos]];
    const std::size_t nontargets_above = report.nontarget_trials - nontargets_below;
    counts.emplace_back(targets_below, nontargets_above);
    report.roc.push_back({t, static_cast<double>(nontargets_above) / n_non,
                          static_cast<double>(targets_below) / n_tgt});
    for (; pos < order.size() && scored.scores[order[pos]] == t; ++pos)
      (scored.targets[order[pos]] ? targets_below : nontargets_below) += 1;
  }
  counts.emplace_back(report.target_trials, 0);
  report.roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});

  // sign(FRR - FAR) without rounding: frr_count * n_non vs far_count * n_tgt.
  auto sign_of = [&](std::size_t i) {
    const auto lhs = static_cast<unsigned long long>(counts[i].first) * report.nontarget_trials;
    const auto rhs = static_cast<unsigned long long>(counts[i].second) * report.target_trials;
    return lhs < rhs ? -1 : (lhs == rhs ? 0 : 1);
  };
  for (std::size_t i = 0; i < report.roc.size(); ++i) {
    const int s_hi = sign_of(i);
    if (s_hi < 0) continue;
    const auto& hi = report.roc[i];
    if (s_hi == 0 || i == 0) {
      report.eer = hi.frr;
      report.threshold = hi.threshold;
      return report;
    }
    const auto& lo = report.roc[i - 1];
    const double d_lo = lo.frr - lo.far;
    const double d_hi = hi.frr - hi.far;
    const double alpha = -d_lo / (d_hi - d_lo);
    report.eer = lo.frr + alpha * (hi.frr - lo.frr);
    report.threshold = std::isfinite(hi.threshold)
                           ? lo.threshold + alpha * (hi.threshold - lo.threshold)
                           : lo.threshold;
    return report;
  }
  return report;  // unreachable: the +inf point has FRR - FAR = 1
}

struct EvalOptions {
  std::size_t crop_frames = 40;
  std::size_t num_crops = 10;
  ScoreMetric metric = ScoreMetric::kCosine;
  /// Per-utterance MVN ahead of the embedder (training always applies it).
  bool normalize_input = true;
  /// Embed each utterance once and reuse it across trials.
  bool cache_embeddings = true;
};

/// Ten-crop embeddings of one utterance.
inline std::vector<Vector> crop_embeddings(const Matrix& frames, const EmbedderParams& params,
                                           const EvalOptions& opts) {
  std::vector<Vector> out;
  for (const Matrix& crop : ten_crop(frames, opts.crop_frames, opts.num_crops))
    out.push_back(embed(opts.normalize_input ? instance_normalize(crop) : crop, params).value);
  return out;
}

struct Evaluation {
  ScoredTrials scored;
  EvalReport report;
};

inline Evaluation evaluate(const EmbedderParams& params, const Dataset& test,
                           const TrialList& trials, const EvalOptions& opts = {}) {
  for (const auto& t : trials) {
    for (UtteranceHandle h : {t.a, t.b})
      if (h >= test.utterances.size())
        throw DomainError("evaluate: trial references missing utterance handle " + std::to_string(h));
    if (t.a == t.b) throw DomainError("evaluate: self-pair on handle " + std::to_string(t.a));
  }
  std::vector<std::optional<std::vector<Vector>>> cache(test.utterances.size());
  auto crops_for = [&](UtteranceHandle h) -> std::vector<Vector> {
    if (!opts.cache_embeddings) return crop_embeddings(test.utterances[h].frames, params, opts);
    if (!cache[h]) cache[h] = crop_embeddings(test.utterances[h].frames, params, opts);
    return *cache[h];
  };
  Evaluation out;
  out.scored.scores.reserve(trials.size());
  for (const auto& t : trials) {
    const auto a = crops_for(t.a);
    const auto b = crops_for(t.b);
    out.scored.scores.push_back(score_trial(a, b, opts.metric));
    out.scored.targets.push_back(t.target);
  }
  out.report = compute_eer(out.scored);
  return out;
}

/// "key value" lines; `metadata` pairs are emitted first.
inline void write_report(std::ostream& os, const EvalReport& r,
                         std::span<const std::pair<std::string, std::string>> metadata = {}) {
  for (const auto& [k, v] : metadata) os << k << ' ' << v << '\n';
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", r.eer);
  os << "eer " << buf << '\n';
  std::snprintf(buf, sizeof buf, "%.17g", r.threshold);
  os << "threshold " << buf << '\n';
  os << "target_trials " << r.target_trials << '\n';
  os << "nontarget_trials " << r.nontarget_trials << '\n';
  os << "operating_points " << r.roc.size() << '\n';
}

inline void write_scores_csv(std::ostream& os, const ScoredTrials& s) {
  os << "trial,score,target\n";
  char buf[64];
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", s.scores[i]);
    os << i << ',' << buf << ',' << (s.targets[i] ? 1 : 0) << '\n';
  }
}

}  // namespace spkloss

#endif  // SPKLOSS_EVALUATION_HPP_
