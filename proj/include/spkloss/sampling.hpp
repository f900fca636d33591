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

#ifndef SPKLOSS_SAMPLING_HPP_
#define SPKLOSS_SAMPLING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spkloss/core_math.hpp"

namespace spkloss {

using Rng = std::mt19937_64;
using UtteranceHandle = std::size_t;

/// Speaker -> utterance handles for one split of a corpus. Handles index the
/// split's utterance storage; speaker slots index `speakers`.
struct DatasetIndex {
  std::vector<std::int64_t> speakers;
  std::vector<std::vector<UtteranceHandle>> by_speaker;
  std::vector<std::size_t> speaker_slot;   // per handle
  std::vector<std::size_t> frame_lengths;  // per handle

  std::size_t speaker_count() const { return speakers.size(); }
  std::size_t utterance_count() const { return speaker_slot.size(); }

  /// Builds the index from per-utterance (speaker id, frame count) pairs.
  /// Speaker slots follow first appearance.
  static DatasetIndex from_labels(std::span<const std::int64_t> labels,
                                  std::span<const std::size_t> lengths) {
    if (labels.size() != lengths.size())
      throw DomainError("DatasetIndex: label/length count mismatch");
    DatasetIndex idx;
    idx.frame_lengths.assign(lengths.begin(), lengths.end());
    idx.speaker_slot.resize(labels.size());
    for (std::size_t h = 0; h < labels.size(); ++h) {
      auto it = std::find(idx.speakers.begin(), idx.speakers.end(), labels[h]);
      std::size_t slot = static_cast<std::size_t>(it - idx.speakers.begin());
      if (it == idx.speakers.end()) {
        idx.speakers.push_back(labels[h]);
        idx.by_speaker.emplace_back();
      }
      idx.speaker_slot[h] = slot;
      idx.by_speaker[slot].push_back(h);
    }
    return idx;
  }
};

/// Draws min(cap, available) utterances per speaker without replacement and
/// shuffles the union. Deterministic in `seed`.
inline std::vector<UtteranceHandle> build_epoch_plan(const DatasetIndex& index, std::size_t cap,
                                                     std::uint64_t seed) {
  if (index.utterance_count() == 0 || index.speaker_count() == 0)
    throw DomainError("build_epoch_plan: empty dataset");
  if (cap < 1) throw DomainError("build_epoch_plan: cap must be >= 1");
  Rng rng(seed);
  std::vector<UtteranceHandle> plan;
  for (const auto& utts : index.by_speaker) {
    std::vector<UtteranceHandle> pool = utts;
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min(cap, pool.size()));
    plan.insert(plan.end(), pool.begin(), pool.end());
  }
  std::shuffle(plan.begin(), plan.end(), rng);
  return plan;
}

/// N speakers x M utterance handles, row-major (speaker j, utterance i) at j*M+i.
struct BatchSkeleton {
  std::size_t speakers = 0;
  std::size_t per_speaker = 0;
  std::vector<UtteranceHandle> handles;
  std::vector<std::size_t> speaker_slots;

  UtteranceHandle at(std::size_t j, std::size_t i) const { return handles[j * per_speaker + i]; }
};

/// Remaining (unconsumed) part of an epoch plan.
class EpochCursor {
 public:
  EpochCursor(const DatasetIndex& index, std::vector<UtteranceHandle> plan)
      : index_(&index), plan_(std::move(plan)), consumed_(plan_.size(), false),
        remaining_(index.speaker_count(), 0) {
    for (UtteranceHandle h : plan_) ++remaining_.at(index.speaker_slot.at(h));
  }

  std::size_t remaining() const {
    return static_cast<std::size_t>(std::count(consumed_.begin(), consumed_.end(), false));
  }

  /// Takes N distinct speakers with M utterances each, walking the plan in
  /// order. Returns nullopt (epoch exhausted) when fewer than N speakers still
  /// hold M unconsumed utterances; nothing is consumed in that case.
  std::optional<BatchSkeleton> next(std::size_t n, std::size_t m) {
    if (n == 0 || m == 0) throw DomainError("make_episodic_batch: N and M must be positive");
    std::vector<std::size_t> chosen;
    std::vector<bool> taken(index_->speaker_count(), false);
    for (std::size_t pos = 0; pos < plan_.size() && chosen.size() < n; ++pos) {
      if (consumed_[pos]) continue;
      const std::size_t slot = index_->speaker_slot[plan_[pos]];
      if (taken[slot] || remaining_[slot] < m) continue;
      taken[slot] = true;
      chosen.push_back(slot);
    }
    if (chosen.size() < n) return std::nullopt;

    BatchSkeleton batch;
    batch.speakers = n;
    batch.per_speaker = m;
    batch.speaker_slots = chosen;
    batch.handles.resize(n * m);
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t got = 0;
      for (std::size_t pos = 0; pos < plan_.size() && got < m; ++pos) {
        if (consumed_[pos] || index_->speaker_slot[plan_[pos]] != chosen[j]) continue;
        consumed_[pos] = true;
        batch.handles[j * m + got++] = plan_[pos];
      }
      remaining_[chosen[j]] -= m;
    }
    return batch;
  }

 private:
  const DatasetIndex* index_;
  std::vector<UtteranceHandle> plan_;
  std::vector<bool> consumed_;
  std::vector<std::size_t> remaining_;
};

/// Draws one episodic batch from `cursor`; nullopt signals the end of the epoch.
inline std::optional<BatchSkeleton> make_episodic_batch(EpochCursor& cursor, std::size_t n,
                                                        std::size_t m) {
  return cursor.next(n, m);
}

enum class MiningMode { kRandom, kHardest, kHardestFraction };

inline std::string_view mining_mode_name(MiningMode mode) {
  switch (mode) {
    case MiningMode::kRandom: return "random";
    case MiningMode::kHardest: return "hardest";
    case MiningMode::kHardestFraction: return "hardest_fraction";
  }
  return "unknown";
}

inline std::optional<MiningMode> parse_mining_mode(std::string_view s) {
  if (s == "random") return MiningMode::kRandom;
  if (s == "hardest") return MiningMode::kHardest;
  if (s == "hardest_fraction") return MiningMode::kHardestFraction;
  return std::nullopt;
}

struct MiningPolicy {
  MiningMode mode = MiningMode::kRandom;
  double fraction = 1.0;
  int activation_epoch = 0;

  MiningMode effective_mode(int epoch) const {
    return epoch < activation_epoch ? MiningMode::kRandom : mode;
  }
};

/// Size of the hardest-fraction pool: ceil(fraction * candidates), at least 1.
/// The 1e-9 slack keeps products such as 0.07 * 100 from rounding up a whole
/// candidate.
inline std::size_t hard_pool_size(double fraction, std::size_t candidates) {
  if (candidates == 0) return 0;
  const double raw = std::ceil(fraction * static_cast<double>(candidates) - 1e-9);
  const auto pool = static_cast<std::size_t>(std::max(1.0, raw));
  return std::min(pool, candidates);
}

/// Picks a negative speaker for anchor speaker `anchor`. `candidate_distances`
/// lists the N-1 distances to every other speaker k != anchor in increasing k.
/// Returns the chosen speaker index k in [0, N). Ties go to the lowest k.
inline std::size_t select_negative(std::size_t anchor, std::span<const double> candidate_distances,
                                   const MiningPolicy& policy, int epoch, Rng& rng) {
  const std::size_t count = candidate_distances.size();
  if (count == 0) throw DomainError("select_negative: needs at least one candidate (N >= 2)");
  auto to_speaker = [anchor](std::size_t c) { return c < anchor ? c : c + 1; };

  const MiningMode mode = policy.effective_mode(epoch);
  if (mode == MiningMode::kRandom) {
    std::uniform_int_distribution<std::size_t> pick(0, count - 1);
    return to_speaker(pick(rng));
  }
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return candidate_distances[a] < candidate_distances[b];
  });
  if (mode == MiningMode::kHardest) return to_speaker(order.front());

  const std::size_t pool = hard_pool_size(policy.fraction, count);
  std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
  return to_speaker(order[pick(rng)]);
}

}  // namespace spkloss

#endif  // SPKLOSS_SAMPLING_HPP_
