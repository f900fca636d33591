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

// Deterministic synthetic open-set speaker corpus.
//
// Every speaker owns a unit latent direction u. An utterance perturbs it to
// v = normalise(u + sigma_w * n) and emits T frames
//
//   x_t = phone_mean[k_t] + speaker_scale * loading[k_t] v      (speaker)
//       + channel_scale * h_t * (channel_basis r)                (nuisance)
//       + sigma_f * e_t                                          (frame noise)
//
// with k_t a uniformly drawn "phone", loading[k] a fixed orthogonal matrix per
// phone, r a per-utterance unit vector inside a fixed channel subspace and
// h_t, e_t standard normal. Per-utterance mean/variance normalisation removes
// any constant offset, so identity has to be carried by how each phone is
// shifted; the channel term varies per utterance and has to be learned away.
// With one phone, no channel and zero noise every frame of a speaker is the
// same vector.

#ifndef SPKLOSS_SYNTHDATA_HPP_
#define SPKLOSS_SYNTHDATA_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "spkloss/core_math.hpp"
#include "spkloss/embedder.hpp"
#include "spkloss/sampling.hpp"

namespace spkloss {

struct SynthSpec {
  std::size_t train_speakers = 50;
  std::size_t test_speakers = 20;
  std::size_t utterances_per_speaker = 40;
  std::size_t min_frames = 20;
  std::size_t max_frames = 60;
  std::size_t features = 16;
  double within_sigma = 0.1;
  double frame_sigma = 0.5;
  std::size_t phones = 6;
  double phone_scale = 1.0;
  double speaker_scale = 3.0;
  std::size_t channel_dims = 2;
  double channel_scale = 7.0;
  std::size_t pairs_per_class = 500;
  std::uint64_t seed = 1;

  void validate() const {
    if (train_speakers < 2) throw DomainError("SynthSpec: train_speakers must be >= 2");
    if (test_speakers < 2) throw DomainError("SynthSpec: test_speakers must be >= 2");
    if (utterances_per_speaker < 1) throw DomainError("SynthSpec: utterances_per_speaker must be >= 1");
    if (min_frames < 1 || max_frames < min_frames)
      throw DomainError("SynthSpec: need 1 <= min_frames <= max_frames");
    if (features < 1) throw DomainError("SynthSpec: features must be >= 1");
    if (!(within_sigma >= 0.0) || !(frame_sigma >= 0.0))
      throw DomainError("SynthSpec: noise levels must be >= 0");
    if (phones < 1) throw DomainError("SynthSpec: phones must be >= 1");
    if (!(phone_scale >= 0.0) || !(speaker_scale >= 0.0) || !(channel_scale >= 0.0))
      throw DomainError("SynthSpec: scales must be >= 0");
    if (channel_dims > features) throw DomainError("SynthSpec: channel_dims exceeds features");
  }
};

/// Utterances of one split with their speaker index. Handles are positions
/// in `utterances`.
struct Dataset {
  std::vector<Utterance> utterances;
  std::vector<std::string> names;
  DatasetIndex index;

  void reindex() {
    std::vector<std::int64_t> labels;
    std::vector<std::size_t> lengths;
    for (const auto& u : utterances) {
      labels.push_back(u.speaker);
      lengths.push_back(u.length());
    }
    index = DatasetIndex::from_labels(labels, lengths);
  }
};

/// Verification pair over handles of the test split.
struct Trial {
  UtteranceHandle a = 0;
  UtteranceHandle b = 0;
  bool target = false;

  friend bool operator==(const Trial&, const Trial&) = default;
};

using TrialList = std::vector<Trial>;

struct Corpus {
  Dataset train;
  Dataset test;
  TrialList trials;
};

namespace detail {

/// Gram-Schmidt on the columns of a rows x cols Gaussian draw (rows >= cols).
inline Matrix random_orthonormal_columns(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix q(rows, cols);
  for (std::size_t c = 0; c < cols; ++c) {
    for (;;) {
      Vector v(rows);
      for (double& x : v) x = normal(rng);
      for (std::size_t prev = 0; prev < c; ++prev) {
        double proj = 0.0;
        for (std::size_t r = 0; r < rows; ++r) proj += v[r] * q(r, prev);
        for (std::size_t r = 0; r < rows; ++r) v[r] -= proj * q(r, prev);
      }
      const double len = norm(v);
      if (len < 1e-8) continue;
      for (std::size_t r = 0; r < rows; ++r) q(r, c) = v[r] / len;
      break;
    }
  }
  return q;
}

inline Vector random_unit(std::size_t dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    Vector v(dim);
    for (double& x : v) x = normal(rng);
    const double len = norm(v);
    if (len < 1e-12) continue;
    for (double& x : v) x /= len;
    return v;
  }
}

struct SynthWorld {
  std::vector<Vector> phone_means;
  std::vector<Matrix> loadings;
  Matrix channel_basis;  // features x channel_dims
};

inline SynthWorld make_world(const SynthSpec& spec, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  SynthWorld w;
  for (std::size_t k = 0; k < spec.phones; ++k) {
    Vector mean(spec.features);
    for (double& x : mean) x = spec.phone_scale * normal(rng);
    w.phone_means.push_back(std::move(mean));
    w.loadings.push_back(random_orthonormal_columns(spec.features, spec.features, rng));
  }
  w.channel_basis = random_orthonormal_columns(spec.features, spec.channel_dims, rng);
  return w;
}

inline Utterance make_utterance(const SynthSpec& spec, const SynthWorld& world,
                                std::span<const double> direction, std::int64_t speaker, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t feats = spec.features;

  Vector v(direction.begin(), direction.end());
  if (spec.within_sigma > 0.0) {
    for (double& x : v) x += spec.within_sigma * normal(rng);
    const double len = norm(v);
    for (double& x : v) x /= len;
  }
  std::uniform_int_distribution<std::size_t> length(spec.min_frames, spec.max_frames);
  const std::size_t t_len = length(rng);

  // Speaker image of v under every phone loading.
  std::vector<Vector> shifted(spec.phones, Vector(feats));
  for (std::size_t k = 0; k < spec.phones; ++k)
    for (std::size_t f = 0; f < feats; ++f)
      shifted[k][f] = world.phone_means[k][f] + spec.speaker_scale * dot(world.loadings[k].row(f), v);

  Vector channel(feats, 0.0);
  if (spec.channel_dims > 0 && spec.channel_scale > 0.0) {
    const Vector r = random_unit(spec.channel_dims, rng);
    for (std::size_t f = 0; f < feats; ++f) channel[f] = dot(world.channel_basis.row(f), r);
  }

  Utterance u{Matrix(t_len, feats), speaker};
  std::uniform_int_distribution<std::size_t> phone(0, spec.phones - 1);
  for (std::size_t t = 0; t < t_len; ++t) {
    const std::size_t k = spec.phones > 1 ? phone(rng) : 0;
    const double gain = spec.channel_scale > 0.0 ? spec.channel_scale * normal(rng) : 0.0;
    auto row = u.frames.row(t);
    for (std::size_t f = 0; f < feats; ++f) {
      row[f] = shifted[k][f] + gain * channel[f];
      if (spec.frame_sigma > 0.0) row[f] += spec.frame_sigma * normal(rng);
    }
  }
  return u;
}

inline std::string utterance_name(const char* split, std::int64_t speaker, std::size_t k) {
  std::ostringstream os;
  os << split << "/spk" << speaker << "_utt" << k << ".bin";
  return os.str();
}

}  // namespace detail

/// `pairs_per_class` same-speaker and different-speaker trials, no self-pairs
/// and no repeated pair. Deterministic in `seed`.
inline TrialList build_trials(const DatasetIndex& test, std::size_t pairs_per_class,
                              std::uint64_t seed) {
  if (test.speaker_count() < 2) throw DomainError("build_trials: needs at least 2 test speakers");
  std::size_t same_available = 0;
  const std::size_t total = test.utterance_count();
  std::size_t sum_sq = 0;
  for (const auto& utts : test.by_speaker) {
    same_available += utts.size() * (utts.size() - 1) / 2;
    sum_sq += utts.size() * utts.size();
  }
  const std::size_t diff_available = (total * total - sum_sq) / 2;
  if (pairs_per_class > same_available || pairs_per_class > diff_available)
    throw DomainError("build_trials: not enough utterances for " + std::to_string(pairs_per_class) +
                      " pairs per class (same " + std::to_string(same_available) + ", different " +
                      std::to_string(diff_available) + ")");

  Rng rng(seed);
  std::set<std::pair<UtteranceHandle, UtteranceHandle>> seen;
  TrialList trials;
  auto ordered = [](UtteranceHandle a, UtteranceHandle b) {
    return std::make_pair(std::min(a, b), std::max(a, b));
  };

  // Enumerate when the request is a large share of what exists, otherwise
  // draw by rejection.
  auto collect = [&](bool target, std::size_t available) {
    if (pairs_per_class * 2 >= available) {
      std::vector<std::pair<UtteranceHandle, UtteranceHandle>> all;
      for (UtteranceHandle a = 0; a < total; ++a)
        for (UtteranceHandle b = a + 1; b < total; ++b)
          if ((test.speaker_slot[a] == test.speaker_slot[b]) == target) all.emplace_back(a, b);
      std::shuffle(all.begin(), all.end(), rng);
      for (std::size_t i = 0; i < pairs_per_class; ++i)
        trials.push_back({all[i].first, all[i].second, target});
      return;
    }
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    std::size_t got = 0;
    while (got < pairs_per_class) {
      const UtteranceHandle a = pick(rng);
      const UtteranceHandle b = pick(rng);
      if (a == b || (test.speaker_slot[a] == test.speaker_slot[b]) != target) continue;
      if (!seen.insert(ordered(a, b)).second) continue;
      trials.push_back({a, b, target});
      ++got;
    }
  };
  collect(true, same_available);
  collect(false, diff_available);
  return trials;
}

/// Generates disjoint train/test splits and the test trial list.
inline Corpus generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const detail::SynthWorld world = detail::make_world(spec, rng);

  Corpus corpus;
  auto fill = [&](Dataset& ds, const char* split, std::int64_t first_id, std::size_t count) {
    for (std::size_t s = 0; s < count; ++s) {
      const std::int64_t id = first_id + static_cast<std::int64_t>(s);
      const Vector direction = detail::random_unit(spec.features, rng);
      for (std::size_t k = 0; k < spec.utterances_per_speaker; ++k) {
        ds.utterances.push_back(detail::make_utterance(spec, world, direction, id, rng));
        ds.names.push_back(detail::utterance_name(split, id, k));
      }
    }
    ds.reindex();
  };
  // Test ids continue after the training ids, so the identity sets are disjoint.
  fill(corpus.train, "train", 0, spec.train_speakers);
  fill(corpus.test, "test", static_cast<std::int64_t>(spec.train_speakers), spec.test_speakers);

  for (std::int64_t id : corpus.test.index.speakers)
    if (std::find(corpus.train.index.speakers.begin(), corpus.train.index.speakers.end(), id) !=
        corpus.train.index.speakers.end())
      throw std::logic_error("generate: train/test identity overlap");

  if (spec.pairs_per_class > 0)
    corpus.trials = build_trials(corpus.test.index, spec.pairs_per_class, spec.seed ^ 0x7472ULL);
  return corpus;
}

// ---------------------------------------------------------------------------
// On-disk layout
//
//   <dir>/manifest.txt      "# spkloss corpus v1", then "<split> <speaker> <file>"
//   <dir>/trials.txt        "<label> <fileA> <fileB>", label 1 = same speaker
//   <dir>/<split>/spk<id>_utt<k>.bin
//
// Utterance files: 8-byte magic "SPKLUTT\0", u32 version (1), u32 reserved,
// i64 speaker, u64 T, u64 F, then T*F row-major doubles (native endianness).
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 8> kUtteranceMagic = {'S', 'P', 'K', 'L', 'U', 'T', 'T', '\0'};
inline constexpr std::uint32_t kUtteranceVersion = 1;

inline void write_utterance(const std::filesystem::path& path, const Utterance& u) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kUtteranceMagic.data(), kUtteranceMagic.size());
  const std::uint32_t header[2] = {kUtteranceVersion, 0};
  os.write(reinterpret_cast<const char*>(header), sizeof(header));
  const std::int64_t speaker = u.speaker;
  os.write(reinterpret_cast<const char*>(&speaker), sizeof(speaker));
  const std::uint64_t dims[2] = {u.length(), u.features()};
  os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  os.write(reinterpret_cast<const char*>(u.frames.data()),
           static_cast<std::streamsize>(u.frames.size() * sizeof(double)));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline Utterance read_utterance(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open utterance " + path.string());
  auto get = [&](void* dst, std::size_t bytes) {
    is.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (!is) throw std::runtime_error("truncated utterance file " + path.string());
  };
  std::array<char, 8> magic{};
  get(magic.data(), magic.size());
  if (magic != kUtteranceMagic) throw std::runtime_error("bad utterance magic in " + path.string());
  std::uint32_t header[2];
  get(header, sizeof(header));
  if (header[0] != kUtteranceVersion)
    throw std::runtime_error("unsupported utterance version in " + path.string());
  std::int64_t speaker = 0;
  get(&speaker, sizeof(speaker));
  std::uint64_t dims[2];
  get(dims, sizeof(dims));
  Utterance u{Matrix(dims[0], dims[1]), speaker};
  get(u.frames.data(), u.frames.size() * sizeof(double));
  return u;
}

inline void write_trials(std::ostream& os, const TrialList& trials, const Dataset& test) {
  for (const auto& t : trials)
    os << (t.target ? 1 : 0) << ' ' << test.names.at(t.a) << ' ' << test.names.at(t.b) << '\n';
}

/// Parses "<label> <fileA> <fileB>" lines against the names of `test`.
inline TrialList read_trials(std::istream& is, const Dataset& test) {
  std::map<std::string, UtteranceHandle> lookup;
  for (std::size_t h = 0; h < test.names.size(); ++h) lookup[test.names[h]] = h;
  TrialList trials;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int label = -1;
    std::string a, b;
    if (!(ls >> label >> a >> b) || (label != 0 && label != 1))
      throw DomainError("trial list line " + std::to_string(line_no) + ": expected '<0|1> <fileA> <fileB>'");
    const auto ia = lookup.find(a);
    const auto ib = lookup.find(b);
    if (ia == lookup.end()) throw DomainError("trial list: unknown utterance " + a);
    if (ib == lookup.end()) throw DomainError("trial list: unknown utterance " + b);
    if (ia->second == ib->second) throw DomainError("trial list: self-pair " + a);
    trials.push_back({ia->second, ib->second, label == 1});
  }
  return trials;
}

inline void export_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  manifest << "# spkloss corpus v1\n";
  auto dump = [&](const Dataset& ds, const char* split) {
    for (std::size_t h = 0; h < ds.utterances.size(); ++h) {
      write_utterance(dir / ds.names[h], ds.utterances[h]);
      manifest << split << ' ' << ds.utterances[h].speaker << ' ' << ds.names[h] << '\n';
    }
  };
  dump(corpus.train, "train");
  dump(corpus.test, "test");
  std::ofstream trials(dir / "trials.txt", std::ios::trunc);
  write_trials(trials, corpus.trials, corpus.test);
  if (!manifest || !trials) throw std::runtime_error("failed writing corpus to " + dir.string());
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("no manifest.txt in " + dir.string());
  Corpus corpus;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string split, name;
    std::int64_t speaker = 0;
    if (!(ls >> split >> speaker >> name)) throw std::runtime_error("malformed manifest line: " + line);
    Dataset* ds = split == "train" ? &corpus.train : split == "test" ? &corpus.test : nullptr;
    if (!ds) throw std::runtime_error("unknown split in manifest: " + split);
    Utterance u = read_utterance(dir / name);
    if (u.speaker != speaker) throw std::runtime_error("speaker mismatch for " + name);
    ds->utterances.push_back(std::move(u));
    ds->names.push_back(name);
  }
  corpus.train.reindex();
  corpus.test.reindex();
  std::ifstream trials(dir / "trials.txt");
  if (trials) corpus.trials = read_trials(trials, corpus.test);
  return corpus;
}

}  // namespace spkloss

#endif  // SPKLOSS_SYNTHDATA_HPP_
