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

// JSON experiment configuration. Every section is optional; omitted keys
// keep their defaults, unknown keys are rejected.
//
//   {
//     "data":      { "train_speakers": 50, "test_speakers": 20, ... },
//     "model":     { "hidden": 64, "embedding": 64 },
//     "objective": { "name": "angular_prototypical", "margin": 0.2, "scale": 30,
//                    "curriculum": false, "w": 10, "b": -5 },
//     "train":     { "epochs": 20, "N": 30, "M": 2, "batch_size": 30, "seed": 1,
//                    "repeats": 1, "learning_rate": 0.001, "identity_cap": 100,
//                    "crop_frames": 20, "max_steps": 0,
//                    "mining": { "mode": "random", "fraction": 1.0, "activation_epoch": 0 } },
//     "eval":      { "crop_frames": 40, "num_crops": 10, "metric": "cosine",
//                    "trials_per_class": 500 },
//     "sweep":     { "grid": [ { "objective": "am_softmax", "margin": [0.1, 0.2],
//                                "scale": [15, 30] } ] }
//   }
//
// "curriculum" is either a boolean (the default schedule) or an object with
// the CurriculumSchedule fields. Inside a sweep grid entry any of objective,
// margin, scale, curriculum, N, M, batch_size may be a scalar or a list; the
// entry expands to the cartesian product on top of the base config.

#ifndef SPKLOSS_CONFIG_HPP_
#define SPKLOSS_CONFIG_HPP_

#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "spkloss/evaluation.hpp"
#include "spkloss/synthdata.hpp"
#include "spkloss/trainer.hpp"

namespace spkloss {

/// Malformed or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  SynthSpec data;
  TrainRunConfig run;
  std::size_t repeats = 1;
  EvalOptions eval;
  std::vector<TrainRunConfig> sweep;  // expanded grid; empty means {run}

  std::vector<TrainRunConfig> grid() const {
    return sweep.empty() ? std::vector<TrainRunConfig>{run} : sweep;
  }
};

namespace detail {

using nlohmann::json;

inline void check_keys(const json& obj, const std::string& where, std::set<std::string> allowed) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : obj.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
void read_field(const json& obj, const std::string& where, const char* key, T& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<T>)
        if (!v.is_number_unsigned()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else {
      if (!v.is_string()) throw ConfigError("");
    }
    out = v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError(where + "." + key + ": wrong type or out of range (" + v.dump() + ")");
  }
}

inline Objective read_objective_name(const json& v, const std::string& where) {
  if (!v.is_string()) throw ConfigError(where + ": objective name must be a string");
  const auto o = parse_objective(v.get<std::string>());
  if (!o) throw ConfigError(where + ": unknown objective '" + v.get<std::string>() + "'");
  return *o;
}

inline std::optional<CurriculumSchedule> read_curriculum(const json& v, const std::string& where) {
  if (v.is_boolean()) return v.get<bool>() ? std::optional<CurriculumSchedule>(CurriculumSchedule{}) : std::nullopt;
  check_keys(v, where,
             {"aam_start_margin", "aam_final_margin", "switch_epoch",
              "triplet_mining_activation_epoch", "triplet_hard_fraction"});
  CurriculumSchedule c;
  read_field(v, where, "aam_start_margin", c.aam_start_margin);
  read_field(v, where, "aam_final_margin", c.aam_final_margin);
  read_field(v, where, "switch_epoch", c.switch_epoch);
  read_field(v, where, "triplet_mining_activation_epoch", c.triplet_mining_activation_epoch);
  read_field(v, where, "triplet_hard_fraction", c.triplet_hard_fraction);
  return c;
}

inline std::vector<json> as_list(const json& v) {
  if (v.is_array()) return {v.begin(), v.end()};
  return {v};
}

inline void apply_grid_value(TrainRunConfig& c, const std::string& key, const json& v,
                             const std::string& where) {
  json wrapper = json::object();
  wrapper[key] = v;
  if (key == "objective") c.objective = read_objective_name(v, where);
  else if (key == "margin") read_field(wrapper, where, "margin", c.margin);
  else if (key == "scale") read_field(wrapper, where, "scale", c.scale);
  else if (key == "curriculum") c.curriculum = read_curriculum(v, where + ".curriculum");
  else if (key == "N") read_field(wrapper, where, "N", c.speakers_per_batch);
  else if (key == "M") read_field(wrapper, where, "M", c.utterances_per_speaker);
  else if (key == "batch_size") read_field(wrapper, where, "batch_size", c.batch_size);
}

inline void expand_entry(const json& entry, const std::string& where, const TrainRunConfig& base,
                         std::vector<TrainRunConfig>& out) {
  static const std::vector<std::string> kAxes = {"objective", "margin", "scale", "curriculum",
                                                 "N",         "M",      "batch_size"};
  check_keys(entry, where, {kAxes.begin(), kAxes.end()});
  std::vector<TrainRunConfig> cells{base};
  for (const auto& axis : kAxes) {
    if (!entry.contains(axis)) continue;
    const auto values = as_list(entry.at(axis));
    if (values.empty()) throw ConfigError(where + "." + axis + ": empty list");
    std::vector<TrainRunConfig> next;
    for (const auto& cell : cells)
      for (const auto& v : values) {
        TrainRunConfig c = cell;
        apply_grid_value(c, axis, v, where);
        next.push_back(c);
      }
    cells = std::move(next);
  }
  out.insert(out.end(), cells.begin(), cells.end());
}

}  // namespace detail

/// Parses and validates; throws ConfigError on any problem.
inline ExperimentConfig parse_config(const nlohmann::json& root) {
  using detail::read_field;
  detail::check_keys(root, "config", {"data", "model", "objective", "train", "eval", "sweep"});
  ExperimentConfig cfg;
  auto section = [&](const char* name) -> const nlohmann::json* {
    return root.contains(name) ? &root.at(name) : nullptr;
  };

  if (const auto* d = section("data")) {
    detail::check_keys(*d, "data",
                       {"train_speakers", "test_speakers", "utterances_per_speaker", "min_frames",
                        "max_frames", "features", "within_sigma", "frame_sigma", "phones",
                        "phone_scale", "speaker_scale", "channel_dims", "channel_scale", "seed"});
    auto& s = cfg.data;
    read_field(*d, "data", "train_speakers", s.train_speakers);
    read_field(*d, "data", "test_speakers", s.test_speakers);
    read_field(*d, "data", "utterances_per_speaker", s.utterances_per_speaker);
    read_field(*d, "data", "min_frames", s.min_frames);
    read_field(*d, "data", "max_frames", s.max_frames);
    read_field(*d, "data", "features", s.features);
    read_field(*d, "data", "within_sigma", s.within_sigma);
    read_field(*d, "data", "frame_sigma", s.frame_sigma);
    read_field(*d, "data", "phones", s.phones);
    read_field(*d, "data", "phone_scale", s.phone_scale);
    read_field(*d, "data", "speaker_scale", s.speaker_scale);
    read_field(*d, "data", "channel_dims", s.channel_dims);
    read_field(*d, "data", "channel_scale", s.channel_scale);
    read_field(*d, "data", "seed", s.seed);
  }
  auto& r = cfg.run;
  if (const auto* m = section("model")) {
    detail::check_keys(*m, "model", {"hidden", "embedding"});
    read_field(*m, "model", "hidden", r.hidden);
    read_field(*m, "model", "embedding", r.embedding);
  }
  if (const auto* o = section("objective")) {
    detail::check_keys(*o, "objective", {"name", "margin", "scale", "curriculum", "w", "b"});
    if (o->contains("name")) r.objective = detail::read_objective_name(o->at("name"), "objective.name");
    read_field(*o, "objective", "margin", r.margin);
    read_field(*o, "objective", "scale", r.scale);
    if (o->contains("curriculum")) r.curriculum = detail::read_curriculum(o->at("curriculum"), "objective.curriculum");
    read_field(*o, "objective", "w", r.affine_init.w);
    read_field(*o, "objective", "b", r.affine_init.b);
  }
  if (const auto* t = section("train")) {
    detail::check_keys(*t, "train",
                       {"epochs", "N", "M", "batch_size", "seed", "repeats", "learning_rate",
                        "identity_cap", "crop_frames", "max_steps", "mining"});
    read_field(*t, "train", "epochs", r.epochs);
    read_field(*t, "train", "N", r.speakers_per_batch);
    read_field(*t, "train", "M", r.utterances_per_speaker);
    read_field(*t, "train", "batch_size", r.batch_size);
    read_field(*t, "train", "seed", r.seed);
    read_field(*t, "train", "repeats", cfg.repeats);
    read_field(*t, "train", "learning_rate", r.learning_rate);
    read_field(*t, "train", "identity_cap", r.identity_cap);
    read_field(*t, "train", "crop_frames", r.crop_frames);
    read_field(*t, "train", "max_steps", r.max_steps);
    if (t->contains("mining")) {
      const auto& mn = t->at("mining");
      detail::check_keys(mn, "train.mining", {"mode", "fraction", "activation_epoch"});
      std::string mode(mining_mode_name(r.mining.mode));
      read_field(mn, "train.mining", "mode", mode);
      const auto parsed = parse_mining_mode(mode);
      if (!parsed) throw ConfigError("train.mining.mode: unknown mode '" + mode + "'");
      r.mining.mode = *parsed;
      read_field(mn, "train.mining", "fraction", r.mining.fraction);
      read_field(mn, "train.mining", "activation_epoch", r.mining.activation_epoch);
    }
  }
  if (const auto* e = section("eval")) {
    detail::check_keys(*e, "eval", {"crop_frames", "num_crops", "metric", "trials_per_class"});
    read_field(*e, "eval", "crop_frames", cfg.eval.crop_frames);
    read_field(*e, "eval", "num_crops", cfg.eval.num_crops);
    read_field(*e, "eval", "trials_per_class", cfg.data.pairs_per_class);
    if (e->contains("metric")) {
      std::string metric;
      read_field(*e, "eval", "metric", metric);
      const auto parsed = parse_score_metric(metric);
      if (!parsed) throw ConfigError("eval.metric: unknown metric '" + metric + "'");
      cfg.eval.metric = *parsed;
    }
  }
  if (const auto* s = section("sweep")) {
    detail::check_keys(*s, "sweep", {"grid"});
    if (s->contains("grid")) {
      const auto& grid = s->at("grid");
      if (!grid.is_array()) throw ConfigError("sweep.grid: expected a list");
      for (std::size_t i = 0; i < grid.size(); ++i)
        detail::expand_entry(grid[i], "sweep.grid[" + std::to_string(i) + "]", cfg.run, cfg.sweep);
    }
  }

  try {
    cfg.data.validate();
    for (const auto& c : cfg.grid()) {
      c.validate();
      const auto [n, m] = c.batch_shape();
      if (n > cfg.data.train_speakers)
        throw ConfigError(std::string(objective_name(c.objective)) + ": batch needs " +
                          std::to_string(n) + " speakers but data.train_speakers is " +
                          std::to_string(cfg.data.train_speakers));
      if (m > cfg.data.utterances_per_speaker)
        throw ConfigError(std::string(objective_name(c.objective)) + ": M exceeds utterances_per_speaker");
    }
    if (cfg.repeats < 1) throw ConfigError("train.repeats must be >= 1");
    if (cfg.eval.crop_frames < 1 || cfg.eval.num_crops < 1)
      throw ConfigError("eval: crop_frames and num_crops must be >= 1");
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(root);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

}  // namespace spkloss

#endif  // SPKLOSS_CONFIG_HPP_
