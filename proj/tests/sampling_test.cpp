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

#include <cmath>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "spkloss/sampling.hpp"

namespace spkloss {
namespace {

DatasetIndex index_with(const std::vector<std::size_t>& utterances_per_speaker) {
  std::vector<std::int64_t> labels;
  for (std::size_t s = 0; s < utterances_per_speaker.size(); ++s)
    labels.insert(labels.end(), utterances_per_speaker[s], static_cast<std::int64_t>(100 + s));
  const std::vector<std::size_t> lengths(labels.size(), 30);
  return DatasetIndex::from_labels(labels, lengths);
}

std::map<std::size_t, std::size_t> per_speaker_counts(const DatasetIndex& idx,
                                                      const std::vector<UtteranceHandle>& plan) {
  std::map<std::size_t, std::size_t> counts;
  for (auto h : plan) ++counts[idx.speaker_slot[h]];
  return counts;
}

TEST(EpochPlan, SmallSpeakerIsFullyIncluded) {
  const auto idx = index_with({3, 5});
  const auto plan = build_epoch_plan(idx, 100, 1);
  auto counts = per_speaker_counts(idx, plan);
  EXPECT_EQ(counts[0], 3u);
  EXPECT_EQ(counts[1], 5u);
}

TEST(EpochPlan, CapLimitsLargeSpeaker) {
  const auto idx = index_with({250, 40});
  const auto plan = build_epoch_plan(idx, 100, 9);
  auto counts = per_speaker_counts(idx, plan);
  EXPECT_EQ(counts[0], 100u);
  EXPECT_EQ(counts[1], 40u);
  EXPECT_EQ(std::set<UtteranceHandle>(plan.begin(), plan.end()).size(), plan.size());
}

TEST(EpochPlan, DeterministicInSeed) {
  const auto idx = index_with(std::vector<std::size_t>(50, 40));
  EXPECT_EQ(build_epoch_plan(idx, 100, 5), build_epoch_plan(idx, 100, 5));
  EXPECT_NE(build_epoch_plan(idx, 100, 5), build_epoch_plan(idx, 100, 6));
}

TEST(EpochPlan, RejectsEmptyIndexAndZeroCap) {
  EXPECT_THROW(build_epoch_plan(DatasetIndex{}, 10, 1), DomainError);
  EXPECT_THROW(build_epoch_plan(index_with({2}), 0, 1), DomainError);
}

TEST(EpisodicBatch, TwoSpeakerIndexUsesBoth) {
  const auto idx = index_with({2, 2});
  EpochCursor cursor(idx, build_epoch_plan(idx, 100, 3));
  const auto batch = make_episodic_batch(cursor, 2, 2);
  ASSERT_TRUE(batch.has_value());
  EXPECT_EQ(std::set<std::size_t>(batch->speaker_slots.begin(), batch->speaker_slots.end()),
            (std::set<std::size_t>{0, 1}));
  EXPECT_FALSE(make_episodic_batch(cursor, 2, 2).has_value());
}

TEST(EpisodicBatch, NoHandleRepeatsWithinAnEpoch) {
  const auto idx = index_with(std::vector<std::size_t>(50, 40));
  EpochCursor cursor(idx, build_epoch_plan(idx, 100, 11));
  std::multiset<UtteranceHandle> seen;
  std::size_t batches = 0;
  while (auto b = make_episodic_batch(cursor, 30, 2)) {
    ++batches;
    std::map<std::size_t, std::size_t> per;
    for (std::size_t j = 0; j < 30; ++j)
      for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(idx.speaker_slot[b->at(j, i)], b->speaker_slots[j]);
        ++per[b->speaker_slots[j]];
      }
    EXPECT_EQ(per.size(), 30u);
    for (const auto& [slot, count] : per) EXPECT_EQ(count, 2u);
    seen.insert(b->handles.begin(), b->handles.end());
  }
  EXPECT_GT(batches, 20u);
  EXPECT_EQ(std::set<UtteranceHandle>(seen.begin(), seen.end()).size(), seen.size());
}

TEST(EpisodicBatch, TooFewSpeakersSignalsExhaustion) {
  const auto idx = index_with({4, 4, 4, 4, 4});
  EpochCursor cursor(idx, build_epoch_plan(idx, 100, 1));
  const std::size_t before = cursor.remaining();
  EXPECT_FALSE(make_episodic_batch(cursor, 10, 2).has_value());
  EXPECT_EQ(cursor.remaining(), before);
}

TEST(EpisodicBatch, SpeakersShortOfMAreSkipped) {
  const auto idx = index_with({1, 3, 3});
  EpochCursor cursor(idx, build_epoch_plan(idx, 100, 2));
  const auto b = make_episodic_batch(cursor, 2, 3);
  ASSERT_TRUE(b.has_value());
  for (auto slot : b->speaker_slots) EXPECT_NE(slot, 0u);
}

TEST(EpisodicBatch, CapBoundsPerEpochContribution) {
  const auto idx = index_with({30, 30, 30});
  EpochCursor cursor(idx, build_epoch_plan(idx, 4, 7));
  std::map<std::size_t, std::size_t> used;
  while (auto b = make_episodic_batch(cursor, 2, 2))
    for (auto s : b->speaker_slots) used[s] += 2;
  for (const auto& [slot, count] : used) EXPECT_LE(count, 4u);
}

TEST(EpisodicBatch, DeterministicSequence) {
  const auto idx = index_with(std::vector<std::size_t>(12, 9));
  auto run = [&] {
    EpochCursor cursor(idx, build_epoch_plan(idx, 100, 4));
    std::vector<UtteranceHandle> all;
    while (auto b = make_episodic_batch(cursor, 4, 3)) all.insert(all.end(), b->handles.begin(), b->handles.end());
    return all;
  };
  EXPECT_EQ(run(), run());
}

TEST(Mining, HardestPicksArgmin) {
  Rng rng(1);
  const MiningPolicy hardest{MiningMode::kHardest, 1.0, 0};
  const std::vector<double> d{0.9, 0.2, 0.5};
  // Candidates for anchor 0 are speakers 1, 2, 3.
  EXPECT_EQ(select_negative(0, d, hardest, 0, rng), 2u);
  // For anchor 2 they are speakers 0, 1, 3.
  EXPECT_EQ(select_negative(2, d, hardest, 0, rng), 1u);
}

TEST(Mining, TiesGoToLowestSpeaker) {
  Rng rng(2);
  const MiningPolicy hardest{MiningMode::kHardest, 1.0, 0};
  const std::vector<double> d{0.7, 0.3, 0.3, 0.3};
  EXPECT_EQ(select_negative(1, d, hardest, 0, rng), 2u);
}

TEST(Mining, PoolSizeIsCeilingWithFloorOne) {
  EXPECT_EQ(hard_pool_size(0.01, 199), 2u);
  EXPECT_EQ(hard_pool_size(0.01, 29), 1u);
  EXPECT_EQ(hard_pool_size(0.01, 100), 1u);
  EXPECT_EQ(hard_pool_size(0.01, 101), 2u);
  EXPECT_EQ(hard_pool_size(0.07, 100), 7u);
  EXPECT_EQ(hard_pool_size(1.0, 9), 9u);
  for (std::size_t n = 2; n <= 400; ++n) {
    const std::size_t expected =
        std::max<std::size_t>(1, static_cast<std::size_t>((n - 1 + 99) / 100));
    EXPECT_EQ(hard_pool_size(0.01, n - 1), expected) << "N=" << n;
  }
}

TEST(Mining, HardestFractionDrawsOnlyFromPool) {
  Rng rng(3);
  std::vector<double> d(199);
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = 1.0 + static_cast<double>((k * 37) % 199);
  d[50] = 0.01;
  d[120] = 0.02;
  const MiningPolicy policy{MiningMode::kHardestFraction, 0.01, 0};
  std::set<std::size_t> picked;
  for (int draw = 0; draw < 2000; ++draw) picked.insert(select_negative(7, d, policy, 5, rng));
  // Candidate c maps to speaker c + 1 when c >= anchor.
  EXPECT_EQ(picked, (std::set<std::size_t>{51, 121}));
}

TEST(Mining, RandomBeforeActivationIsUniform) {
  Rng rng(4);
  const std::vector<double> d{0.9, 0.1, 0.5, 0.3, 0.8, 0.2, 0.6, 0.4, 0.7};
  const MiningPolicy policy{MiningMode::kHardestFraction, 0.01, 100};
  EXPECT_EQ(policy.effective_mode(99), MiningMode::kRandom);
  EXPECT_EQ(policy.effective_mode(100), MiningMode::kHardestFraction);
  std::vector<double> counts(10, 0.0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) counts[select_negative(3, d, policy, 99, rng)] += 1.0;
  EXPECT_EQ(counts[3], 0.0);
  double chi2 = 0.0;
  const double expected = draws / 9.0;
  for (std::size_t k = 0; k < 10; ++k)
    if (k != 3) chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
  // Upper 0.1% point of chi-square with 8 degrees of freedom.
  EXPECT_LT(chi2, 26.124);
}

TEST(Mining, ModeNamesRoundTrip) {
  for (auto m : {MiningMode::kRandom, MiningMode::kHardest, MiningMode::kHardestFraction})
    EXPECT_EQ(parse_mining_mode(mining_mode_name(m)), m);
  EXPECT_FALSE(parse_mining_mode("semi_hard").has_value());
}

}  // namespace
}  // namespace spkloss
