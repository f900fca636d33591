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

#ifndef SPKLOSS_EMBEDDER_HPP_
#define SPKLOSS_EMBEDDER_HPP_

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spkloss/core_math.hpp"
#include "spkloss/sampling.hpp"

namespace spkloss {

/// T frames x F features plus the speaker label.
struct Utterance {
  Matrix frames;
  std::int64_t speaker = 0;

  std::size_t length() const { return frames.rows(); }
  std::size_t features() const { return frames.cols(); }
};

/// Stabiliser added to the per-feature standard deviation.
inline constexpr double kInstanceNormEpsilon = 1e-5;

/// Per-utterance mean and variance normalisation: every feature column is
/// centred on its temporal mean and divided by its temporal standard
/// deviation plus a small stabiliser.
inline Matrix instance_normalize(const Matrix& frames) {
  if (frames.rows() == 0) throw DomainError("instance_normalize: utterance has no frames");
  const std::size_t t_len = frames.rows();
  const std::size_t feats = frames.cols();
  Matrix out(t_len, feats);
  for (std::size_t f = 0; f < feats; ++f) {
    double mean = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) mean += frames(t, f);
    mean /= static_cast<double>(t_len);
    double var = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      const double c = frames(t, f) - mean;
      var += c * c;
    }
    var /= static_cast<double>(t_len);
    const double inv = 1.0 / (std::sqrt(var) + kInstanceNormEpsilon);
    for (std::size_t t = 0; t < t_len; ++t) out(t, f) = (frames(t, f) - mean) * inv;
  }
  return out;
}

inline Utterance instance_normalize(const Utterance& u) {
  return {instance_normalize(u.frames), u.speaker};
}

/// Two affine layers F -> H -> D with a ReLU in between, applied per frame
/// and averaged over time.
struct EmbedderParams {
  Matrix w1;  // H x F
  Vector b1;  // H
  Matrix w2;  // D x H
  Vector b2;  // D
  /// Bumped on every in-place update so stale forward caches can be caught.
  std::uint64_t generation = 0;

  std::size_t input_dim() const { return w1.cols(); }
  std::size_t hidden_dim() const { return w1.rows(); }
  std::size_t embed_dim() const { return w2.rows(); }

  static EmbedderParams glorot(std::size_t input, std::size_t hidden, std::size_t embed, Rng& rng) {
    if (input == 0 || hidden == 0 || embed == 0)
      throw DomainError("EmbedderParams: dimensions must be positive");
    EmbedderParams p{Matrix(hidden, input), Vector(hidden, 0.0), Matrix(embed, hidden),
                     Vector(embed, 0.0)};
    auto fill = [&rng](Matrix& m) {
      const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (double& w : m.values()) w = u(rng);
    };
    fill(p.w1);
    fill(p.w2);
    return p;
  }

  std::vector<std::span<double>> blocks() { return {w1.values(), b1, w2.values(), b2}; }
  std::vector<std::span<const double>> blocks() const { return {w1.values(), b1, w2.values(), b2}; }

  friend bool operator==(const EmbedderParams& a, const EmbedderParams& b) {
    return a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2;
  }
};

/// Activations kept from `embed` for the backward pass.
struct EmbedCache {
  Matrix input;          // T x F
  Matrix pre_activation; // T x H
  Vector pooled_hidden;  // H, temporal mean of ReLU outputs
  std::uint64_t generation = 0;
  const EmbedderParams* params = nullptr;
};

struct Embedding {
  Vector value;
  EmbedCache cache;
};

/// Forward pass. The second layer is affine, so applying it to the pooled
/// hidden state equals pooling its per-frame outputs.
inline Embedding embed(const Matrix& frames, const EmbedderParams& p) {
  if (frames.rows() == 0) throw DomainError("embed: utterance has no frames");
  if (frames.cols() != p.input_dim())
    throw DomainError("embed: feature dimension " + std::to_string(frames.cols()) +
                      " does not match embedder input " + std::to_string(p.input_dim()));
  const std::size_t t_len = frames.rows();
  const std::size_t hidden = p.hidden_dim();
  const std::size_t feats = p.input_dim();

  Embedding out;
  out.cache.input = frames;
  out.cache.pre_activation = Matrix(t_len, hidden);
  out.cache.pooled_hidden.assign(hidden, 0.0);
  out.cache.generation = p.generation;
  out.cache.params = &p;
  for (std::size_t t = 0; t < t_len; ++t) {
    const auto x = frames.row(t);
    auto z = out.cache.pre_activation.row(t);
    for (std::size_t h = 0; h < hidden; ++h) {
      const double* w = p.w1.data() + h * feats;
      double acc = p.b1[h];
      for (std::size_t f = 0; f < feats; ++f) acc += w[f] * x[f];
      z[h] = acc;
      if (acc > 0.0) out.cache.pooled_hidden[h] += acc;
    }
  }
  const double inv_t = 1.0 / static_cast<double>(t_len);
  for (double& v : out.cache.pooled_hidden) v *= inv_t;

  out.value.assign(p.embed_dim(), 0.0);
  for (std::size_t d = 0; d < p.embed_dim(); ++d)
    out.value[d] = p.b2[d] + dot(p.w2.row(d), out.cache.pooled_hidden);
  return out;
}

inline Embedding embed(const Utterance& u, const EmbedderParams& p) { return embed(u.frames, p); }

struct EmbedderGradient {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Matrix input;

  static EmbedderGradient zeros_like(const EmbedderParams& p) {
    return {Matrix(p.hidden_dim(), p.input_dim()), Vector(p.hidden_dim(), 0.0),
            Matrix(p.embed_dim(), p.hidden_dim()), Vector(p.embed_dim(), 0.0), Matrix()};
  }

  std::vector<std::span<const double>> blocks() const { return {w1.values(), b1, w2.values(), b2}; }
};

/// Reverse-mode gradient of `embed`, accumulated into `grads` (the input
/// gradient is overwritten). Subgradient of ReLU at 0 is 0.
inline void backward_accumulate(std::span<const double> grad_embedding, const EmbedCache& cache,
                                const EmbedderParams& p, EmbedderGradient& grads,
                                bool want_input_grad = false) {
  if (cache.params != &p || cache.generation != p.generation)
    throw DomainError("backward: cache does not belong to the current parameters");
  if (grad_embedding.size() != p.embed_dim())
    throw DomainError("backward: upstream gradient dimension mismatch");
  const std::size_t t_len = cache.input.rows();
  const std::size_t hidden = p.hidden_dim();
  const std::size_t feats = p.input_dim();
  const std::size_t out_dim = p.embed_dim();

  for (std::size_t d = 0; d < out_dim; ++d) {
    const double g = grad_embedding[d];
    grads.b2[d] += g;
    if (g == 0.0) continue;
    auto row = grads.w2.row(d);
    for (std::size_t h = 0; h < hidden; ++h) row[h] += g * cache.pooled_hidden[h];
  }
  // d(pooled)/d(hidden_t) = 1/T for every frame.
  Vector g_hidden(hidden, 0.0);
  const double inv_t = 1.0 / static_cast<double>(t_len);
  for (std::size_t d = 0; d < out_dim; ++d) {
    const double g = grad_embedding[d] * inv_t;
    if (g == 0.0) continue;
    const auto w = p.w2.row(d);
    for (std::size_t h = 0; h < hidden; ++h) g_hidden[h] += g * w[h];
  }
  if (want_input_grad) grads.input = Matrix(t_len, feats);
  for (std::size_t t = 0; t < t_len; ++t) {
    const auto x = cache.input.row(t);
    const auto z = cache.pre_activation.row(t);
    for (std::size_t h = 0; h < hidden; ++h) {
      if (!(z[h] > 0.0) || g_hidden[h] == 0.0) continue;
      const double g = g_hidden[h];
      grads.b1[h] += g;
      double* gw = grads.w1.data() + h * feats;
      for (std::size_t f = 0; f < feats; ++f) gw[f] += g * x[f];
      if (want_input_grad) {
        const double* w = p.w1.data() + h * feats;
        auto gi = grads.input.row(t);
        for (std::size_t f = 0; f < feats; ++f) gi[f] += g * w[f];
      }
    }
  }
}

/// Parameter and input gradients of `embed` for one upstream gradient.
inline EmbedderGradient backward(std::span<const double> grad_embedding, const EmbedCache& cache,
                                 const EmbedderParams& p) {
  EmbedderGradient grads = EmbedderGradient::zeros_like(p);
  backward_accumulate(grad_embedding, cache, p, grads, true);
  return grads;
}

/// Raised when training produces a non-finite quantity.
class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for a list of parameter blocks; sized on the first step.
struct OptimizerState {
  double learning_rate = 1e-3;
  std::uint64_t step = 0;
  AdamConfig config;
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;
};

/// One bias-corrected Adam update over matching parameter/gradient blocks.
inline void adam_step(OptimizerState& state, std::span<const std::span<double>> params,
                      std::span<const std::span<const double>> grads) {
  if (params.size() != grads.size()) throw DomainError("adam_step: block count mismatch");
  if (!(state.learning_rate > 0.0)) throw DomainError("adam_step: learning rate must be positive");
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size())
      throw DomainError("adam_step: block " + std::to_string(b) + " shape mismatch");
    if (!all_finite(grads[b]))
      throw TrainingError("adam_step: non-finite gradient in parameter block " + std::to_string(b));
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  } else if (state.first_moment.size() != params.size()) {
    throw DomainError("adam_step: parameter layout changed between steps");
  }
  ++state.step;
  const auto& c = state.config;
  const double step = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, step);
  const double correct2 = 1.0 - std::pow(c.beta2, step);
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto& m = state.first_moment[b];
    auto& v = state.second_moment[b];
    if (m.size() != params[b].size()) throw DomainError("adam_step: moment shape mismatch");
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      const double g = grads[b][i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[i] / correct1;
      const double v_hat = v[i] / correct2;
      params[b][i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

/// Step decay: base * 0.95^floor(epoch / 10).
inline double schedule_lr(int epoch, double base) {
  if (epoch < 0) throw DomainError("schedule_lr: epoch must be >= 0");
  return base * std::pow(0.95, epoch / 10);
}

// Checkpoint layout (native little-endian on every supported target):
//   8 bytes  magic "SPKLEMB\0"
//   u32      format version (1)
//   u32      reserved (0)
//   u64 x3   input F, hidden H, embedding D
//   f64      W1 (H x F, row-major), b1 (H), W2 (D x H, row-major), b2 (D)
inline constexpr std::array<char, 8> kCheckpointMagic = {'S', 'P', 'K', 'L', 'E', 'M', 'B', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const EmbedderParams& p) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  auto put = [&os](const void* data, std::size_t bytes) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  };
  put(kCheckpointMagic.data(), kCheckpointMagic.size());
  const std::uint32_t header[2] = {kCheckpointVersion, 0};
  put(header, sizeof(header));
  const std::uint64_t dims[3] = {p.input_dim(), p.hidden_dim(), p.embed_dim()};
  put(dims, sizeof(dims));
  for (const auto& block : p.blocks()) put(block.data(), block.size() * sizeof(double));
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

inline EmbedderParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  auto get = [&is, &path](void* data, std::size_t bytes) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
    if (!is) throw std::runtime_error("truncated checkpoint: " + path.string());
  };
  std::array<char, 8> magic{};
  get(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw std::runtime_error("not an embedder checkpoint: " + path.string());
  std::uint32_t header[2];
  get(header, sizeof(header));
  if (header[0] != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(header[0]));
  std::uint64_t dims[3];
  get(dims, sizeof(dims));
  EmbedderParams p{Matrix(dims[1], dims[0]), Vector(dims[1]), Matrix(dims[2], dims[1]),
                   Vector(dims[2])};
  for (auto block : p.blocks()) get(block.data(), block.size() * sizeof(double));
  return p;
}

}  // namespace spkloss

#endif  // SPKLOSS_EMBEDDER_HPP_
