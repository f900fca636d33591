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

#ifndef SPKLOSS_TRAINER_HPP_
#define SPKLOSS_TRAINER_HPP_

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <vector>

#include "spkloss/core_math.hpp"
#include "spkloss/embedder.hpp"
#include "spkloss/evaluation.hpp"
#include "spkloss/losses.hpp"
#include "spkloss/sampling.hpp"
#include "spkloss/synthdata.hpp"

namespace spkloss {

/// Training objectives in canonical reporting order.
enum class Objective {
  kSoftmax,
  kAmSoftmax,
  kAamSoftmax,
  kTriplet,
  kGe2e,
  kPrototypical,
  kAngularPrototypical,
};

inline constexpr std::array<Objective, 7> kAllObjectives = {
    Objective::kSoftmax,      Objective::kAmSoftmax, Objective::kAamSoftmax,
    Objective::kTriplet,      Objective::kGe2e,      Objective::kPrototypical,
    Objective::kAngularPrototypical};

inline std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::kSoftmax: return "softmax";
    case Objective::kAmSoftmax: return "am_softmax";
    case Objective::kAamSoftmax: return "aam_softmax";
    case Objective::kTriplet: return "triplet";
    case Objective::kGe2e: return "ge2e";
    case Objective::kPrototypical: return "prototypical";
    case Objective::kAngularPrototypical: return "angular_prototypical";
  }
  return "unknown";
}

inline std::string_view objective_label(Objective o) {
  switch (o) {
    case Objective::kSoftmax: return "Softmax";
    case Objective::kAmSoftmax: return "AM-Softmax";
    case Objective::kAamSoftmax: return "AAM-Softmax";
    case Objective::kTriplet: return "Triplet";
    case Objective::kGe2e: return "GE2E";
    case Objective::kPrototypical: return "Prototypical";
    case Objective::kAngularPrototypical: return "Angular Prototypical";
  }
  return "unknown";
}

inline std::optional<Objective> parse_objective(std::string_view s) {
  for (Objective o : kAllObjectives)
    if (objective_name(o) == s) return o;
  return std::nullopt;
}

inline bool is_classification(Objective o) {
  return o == Objective::kSoftmax || o == Objective::kAmSoftmax || o == Objective::kAamSoftmax;
}

inline bool uses_affine(Objective o) {
  return o == Objective::kGe2e || o == Objective::kAngularPrototypical;
}

struct CurriculumSchedule {
  double aam_start_margin = 0.1;
  double aam_final_margin = 0.3;
  int switch_epoch = 100;
  int triplet_mining_activation_epoch = 100;
  double triplet_hard_fraction = 0.01;

  void validate() const {
    if (!(0.0 <= aam_start_margin && aam_start_margin <= aam_final_margin &&
          aam_final_margin < std::numbers::pi / 2))
      throw DomainError("CurriculumSchedule: need 0 <= start <= final < pi/2");
    if (switch_epoch < 0 || triplet_mining_activation_epoch < 0)
      throw DomainError("CurriculumSchedule: epochs must be >= 0");
    if (!(triplet_hard_fraction > 0.0 && triplet_hard_fraction <= 1.0))
      throw DomainError("CurriculumSchedule: hard fraction must lie in (0, 1]");
  }
};

/// Start margin before the switch epoch, final margin from it onwards.
inline double effective_margin(const CurriculumSchedule& schedule, int epoch) {
  if (epoch < 0) throw DomainError("effective_margin: epoch must be >= 0");
  return epoch < schedule.switch_epoch ? schedule.aam_start_margin : schedule.aam_final_margin;
}

struct TrainRunConfig {
  Objective objective = Objective::kAngularPrototypical;
  double margin = 0.2;  // AM/AAM cosine or angular margin, triplet hinge margin
  double scale = 30.0;  // AM/AAM scale
  std::size_t speakers_per_batch = 30;     // N for metric objectives
  std::size_t utterances_per_speaker = 2;  // M for metric objectives
  std::size_t batch_size = 30;             // utterances per classification batch
  int epochs = 20;
  std::uint64_t seed = 1;
  double learning_rate = 1e-3;
  std::size_t identity_cap = 100;
  std::size_t crop_frames = 20;
  std::size_t hidden = 64;
  std::size_t embedding = 64;
  /// Stop after this many optimizer steps in total; 0 means no limit.
  std::size_t max_steps = 0;
  std::optional<CurriculumSchedule> curriculum;
  /// Triplet mining when no curriculum is configured.
  MiningPolicy mining{};
  AffineSimilarityParams affine_init{};

  /// (N, M) of the batches this objective consumes.
  std::pair<std::size_t, std::size_t> batch_shape() const {
    if (is_classification(objective)) return {batch_size, 1};
    if (objective == Objective::kTriplet) return {speakers_per_batch, 2};
    return {speakers_per_batch, utterances_per_speaker};
  }

  MiningPolicy triplet_policy() const {
    if (curriculum)
      return {MiningMode::kHardestFraction, curriculum->triplet_hard_fraction,
              curriculum->triplet_mining_activation_epoch};
    return mining;
  }

  double margin_at(int epoch) const {
    if (objective == Objective::kAamSoftmax && curriculum) return effective_margin(*curriculum, epoch);
    return margin;
  }

  void validate() const {
    const auto [n, m] = batch_shape();
    if (n < 1 || m < 1) throw DomainError("TrainRunConfig: batch shape must be positive");
    if (!is_classification(objective) && n < 2)
      throw DomainError("TrainRunConfig: metric objectives need N >= 2");
    if ((objective == Objective::kGe2e || objective == Objective::kPrototypical ||
         objective == Objective::kAngularPrototypical) && m < 2)
      throw DomainError("TrainRunConfig: episodic objectives need M >= 2");
    if (epochs < 0) throw DomainError("TrainRunConfig: epochs must be >= 0");
    if (!(learning_rate > 0.0)) throw DomainError("TrainRunConfig: learning rate must be positive");
    if (identity_cap < 1 || crop_frames < 1 || hidden < 1 || embedding < 1)
      throw DomainError("TrainRunConfig: cap, crop, hidden and embedding must be >= 1");
    if (objective == Objective::kAamSoftmax && !(margin >= 0.0 && margin < std::numbers::pi / 2))
      throw DomainError("TrainRunConfig: AAM margin must lie in [0, pi/2)");
    if (is_classification(objective) && objective != Objective::kSoftmax && !(scale > 0.0))
      throw DomainError("TrainRunConfig: scale must be positive");
    if (!(margin >= 0.0)) throw DomainError("TrainRunConfig: margin must be >= 0");
    if (curriculum) curriculum->validate();
  }
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double learning_rate = 0.0;
  double margin = 0.0;
  std::string mining;  // "-" unless the objective is triplet
  double seconds = 0.0;
  std::size_t steps = 0;
};

/// Everything but wall-clock time, which is the only nondeterministic column.
inline bool same_trajectory(const std::vector<EpochRecord>& a, const std::vector<EpochRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::tie(a[i].epoch, a[i].mean_loss, a[i].learning_rate, a[i].margin, a[i].mining,
                 a[i].steps) != std::tie(b[i].epoch, b[i].mean_loss, b[i].learning_rate,
                                         b[i].margin, b[i].mining, b[i].steps))
      return false;
  return true;
}

/// Tab-separated telemetry with a '#' header:
/// epoch  loss  lr  margin  mining  seconds
inline void write_telemetry(std::ostream& os, const std::vector<EpochRecord>& records) {
  os << "# epoch\tloss\tlr\tmargin\tmining\tseconds\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%d\t%.17g\t%.17g\t%.17g\t%s\t%.6f\n", r.epoch, r.mean_loss,
                  r.learning_rate, r.margin, r.mining.c_str(), r.seconds);
    os << buf;
  }
}

inline std::vector<EpochRecord> read_telemetry(std::istream& is) {
  std::vector<EpochRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    EpochRecord r;
    if (!(ls >> r.epoch >> r.mean_loss >> r.learning_rate >> r.margin >> r.mining >> r.seconds))
      throw DomainError("malformed telemetry line: " + line);
    out.push_back(r);
  }
  return out;
}

/// Per-step view handed to TrainHooks::on_step.
struct StepInfo {
  int epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double margin = 0.0;
  MiningMode mining = MiningMode::kRandom;
};

struct TrainHooks {
  std::function<void(const StepInfo&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  EmbedderParams params;
  std::vector<EpochRecord> telemetry;
  std::optional<ClassifierHead> head;
  std::optional<AffineSimilarityParams> affine;
  std::size_t steps = 0;
};

namespace detail {

inline Matrix random_crop(const Matrix& frames, std::size_t crop, Rng& rng) {
  const std::size_t len = std::min(crop, frames.rows());
  std::uniform_int_distribution<std::size_t> pick(0, frames.rows() - len);
  const std::size_t start = pick(rng);
  Matrix out(len, frames.cols());
  std::copy_n(frames.data() + start * frames.cols(), len * frames.cols(), out.data());
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Trains the embedder (and the objective's own parameters) on `data`.
/// Deterministic in config.seed. Throws TrainingError on a non-finite loss.
inline TrainResult train(const TrainRunConfig& config, const Dataset& data,
                         const TrainHooks& hooks = {}) {
  config.validate();
  if (data.utterances.empty()) throw DomainError("train: empty dataset");
  const std::size_t features = data.utterances.front().features();
  const auto [n, m] = config.batch_shape();
  if (n > data.index.speaker_count())
    throw DomainError("train: batch needs " + std::to_string(n) + " speakers, dataset has " +
                      std::to_string(data.index.speaker_count()));

  Rng init_rng(detail::mix_seed(config.seed, 0));
  TrainResult result;
  result.params = EmbedderParams::glorot(features, config.hidden, config.embedding, init_rng);
  if (is_classification(config.objective))
    result.head = ClassifierHead::glorot(data.index.speaker_count(), config.embedding, init_rng);
  if (uses_affine(config.objective)) result.affine = config.affine_init;

  OptimizerState opt;
  opt.learning_rate = config.learning_rate;
  Rng rng(detail::mix_seed(config.seed, 1));
  const MiningPolicy policy = config.triplet_policy();
  const std::string objective(objective_name(config.objective));

  EmbedderParams& params = result.params;
  std::vector<Embedding> embedded;
  EmbedderGradient grads = EmbedderGradient::zeros_like(params);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.max_steps && result.steps >= config.max_steps) break;
    const auto started = std::chrono::steady_clock::now();
    opt.learning_rate = schedule_lr(epoch, config.learning_rate);
    const double margin = config.margin_at(epoch);
    const MiningMode mining = policy.effective_mode(epoch);

    EpochCursor cursor(data.index,
                       build_epoch_plan(data.index, config.identity_cap,
                                        detail::mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(epoch))));
    double loss_sum = 0.0;
    std::size_t epoch_steps = 0;
    while (auto skeleton = cursor.next(n, m)) {
      // Forward every utterance of the batch.
      embedded.clear();
      Matrix batch_rows(n * m, config.embedding);
      std::vector<std::int64_t> ids(n);
      std::vector<std::size_t> labels(n * m);
      for (std::size_t j = 0; j < n; ++j) {
        ids[j] = data.index.speakers[skeleton->speaker_slots[j]];
        for (std::size_t i = 0; i < m; ++i) {
          const Utterance& u = data.utterances[skeleton->at(j, i)];
          embedded.push_back(
              embed(instance_normalize(detail::random_crop(u.frames, config.crop_frames, rng)), params));
          const auto& e = embedded.back().value;
          std::copy(e.begin(), e.end(), batch_rows.row(j * m + i).begin());
          labels[j * m + i] = skeleton->speaker_slots[j];
        }
      }
      if (!all_finite(batch_rows.values()))
        throw TrainingError(objective + ": non-finite embedding at epoch " + std::to_string(epoch) +
                            ", step " + std::to_string(result.steps));
      const EmbeddingBatch batch(std::move(batch_rows), n, m, std::move(ids));

      LossResult lr;
      switch (config.objective) {
        case Objective::kSoftmax: lr = softmax_loss(batch, labels, *result.head); break;
        case Objective::kAmSoftmax:
          lr = am_softmax_loss(batch, labels, *result.head, {margin, config.scale});
          break;
        case Objective::kAamSoftmax:
          lr = aam_softmax_loss(batch, labels, *result.head, {margin, config.scale});
          break;
        case Objective::kTriplet: lr = triplet_loss(batch, margin, policy, epoch, rng); break;
        case Objective::kGe2e: lr = ge2e_loss(batch, *result.affine); break;
        case Objective::kPrototypical: lr = prototypical_loss(batch); break;
        case Objective::kAngularPrototypical:
          lr = angular_prototypical_loss(batch, *result.affine);
          break;
      }
      if (!std::isfinite(lr.loss))
        throw TrainingError(objective + ": non-finite loss at epoch " + std::to_string(epoch) +
                            ", step " + std::to_string(result.steps));

      // Backward through the embedder, then one joint Adam step.
      grads = EmbedderGradient::zeros_like(params);
      for (std::size_t r = 0; r < embedded.size(); ++r)
        backward_accumulate(lr.grad_embeddings.row(r), embedded[r].cache, params, grads);

      std::vector<std::span<double>> blocks = params.blocks();
      std::vector<std::span<const double>> grad_blocks = grads.blocks();
      if (result.head) {
        blocks.push_back(result.head->weights.values());
        blocks.push_back(result.head->bias);
        grad_blocks.push_back(lr.grad_head->weights.values());
        grad_blocks.push_back(lr.grad_head->bias);
      }
      if (result.affine) {
        blocks.emplace_back(&result.affine->w, 1);
        blocks.emplace_back(&result.affine->b, 1);
        grad_blocks.emplace_back(&*lr.grad_w, 1);
        grad_blocks.emplace_back(&*lr.grad_b, 1);
      }
      try {
        adam_step(opt, blocks, grad_blocks);
      } catch (const TrainingError& e) {
        throw TrainingError(objective + ": " + e.what() + " at epoch " + std::to_string(epoch) +
                            ", step " + std::to_string(result.steps));
      }
      if (result.affine) result.affine->project();
      ++params.generation;

      loss_sum += lr.loss;
      ++epoch_steps;
      ++result.steps;
      if (hooks.on_step) hooks.on_step({epoch, result.steps, lr.loss, margin, mining});
      if (config.max_steps && result.steps >= config.max_steps) break;
    }
    if (epoch_steps == 0)
      throw DomainError("train: epoch " + std::to_string(epoch) + " produced no batch of shape " +
                        std::to_string(n) + "x" + std::to_string(m));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / static_cast<double>(epoch_steps);
    rec.learning_rate = opt.learning_rate;
    rec.margin = margin;
    rec.mining = config.objective == Objective::kTriplet ? std::string(mining_mode_name(mining)) : "-";
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    rec.steps = epoch_steps;
    result.telemetry.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return result;
}

struct SweepRun {
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  double eer = 0.0;
  bool ok = false;
  std::string error;
  std::vector<EpochRecord> telemetry;
};

struct SweepRow {
  TrainRunConfig config;
  std::vector<SweepRun> runs;
  double mean_eer = 0.0;
  double std_eer = 0.0;  // population standard deviation over successful runs
  std::size_t failures = 0;
};

/// Population mean and standard deviation.
inline std::pair<double, double> mean_and_std(std::span<const double> xs) {
  if (xs.empty()) return {std::nan(""), std::nan("")};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return {mean, std::sqrt(var)};
}

/// Sort key: canonical objective order, then hyperparameters.
inline auto sweep_order_key(const TrainRunConfig& c) {
  const auto [n, m] = c.batch_shape();
  return std::make_tuple(static_cast<int>(c.objective), c.margin, c.scale, c.curriculum.has_value(),
                         m, n);
}

/// Trains and evaluates every cell `repeats` times (seed + repeat index) and
/// aggregates EERs. A failing run is recorded and the sweep continues. Up to
/// `jobs` runs execute concurrently; results do not depend on `jobs`.
inline std::vector<SweepRow> train_sweep(const std::vector<TrainRunConfig>& grid, std::size_t repeats,
                                         const Corpus& corpus, const EvalOptions& eval_opts,
                                         std::size_t jobs = 1,
                                         const std::function<void(const SweepRow&, const SweepRun&)>&
                                             on_run = {}) {
  if (repeats < 1) throw DomainError("train_sweep: repeats must be >= 1");
  std::vector<SweepRow> rows(grid.size());
  for (std::size_t c = 0; c < grid.size(); ++c) {
    rows[c].config = grid[c];
    rows[c].runs.resize(repeats);
  }
  const std::size_t total = grid.size() * repeats;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t task = next++; task < total; task = next++) {
      const std::size_t c = task / repeats;
      const std::size_t r = task % repeats;
      TrainRunConfig cfg = grid[c];
      cfg.seed = grid[c].seed + r;
      SweepRun& run = rows[c].runs[r];
      run.repeat = r;
      run.seed = cfg.seed;
      try {
        TrainResult tr = train(cfg, corpus.train);
        run.telemetry = std::move(tr.telemetry);
        run.eer = evaluate(tr.params, corpus.test, corpus.trials, eval_opts).report.eer;
        run.ok = true;
      } catch (const std::exception& e) {
        run.ok = false;
        run.error = e.what();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, total));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  for (auto& row : rows) {
    std::vector<double> eers;
    for (const auto& run : row.runs) {
      if (run.ok) eers.push_back(run.eer);
      else ++row.failures;
      if (on_run) on_run(row, run);
    }
    std::tie(row.mean_eer, row.std_eer) = mean_and_std(eers);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return sweep_order_key(a.config) < sweep_order_key(b.config);
  });
  return rows;
}

}  // namespace spkloss

#endif  // SPKLOSS_TRAINER_HPP_
