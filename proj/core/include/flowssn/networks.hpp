// Copyright 2026 The FlowSSN Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Parameter containers, layers and the three network families: the prior
// encoder-decoder, the time-conditioned flow network and the autoregressive
// conditioners used by discrete flows.

#pragma once

#include "flowssn/autodiff.hpp"
#include "flowssn/distributions.hpp"
#include "flowssn/flows_continuous.hpp"
#include "flowssn/flows_discrete.hpp"
#include "flowssn/random.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace flowssn::nn {

using ad::Matrix;
using ad::Var;

/// Named parameters in insertion order with an EMA shadow of identical shapes.
class ParameterSet {
 public:
  /// Registers a trainable tensor; names must be unique.
  Var add(const std::string& name, Matrix init);

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].name; }
  Var& live(std::size_t i) { return entries_[i].live; }
  const Var& live(std::size_t i) const { return entries_[i].live; }
  const Matrix& shadow(std::size_t i) const { return entries_[i].shadow; }
  /// Index of a named parameter; throws std::out_of_range.
  std::size_t index(const std::string& name) const;

  /// Total scalar count.
  std::int64_t count() const;
  void zero_grad();

  /// shadow <- rate * shadow + (1 - rate) * live. rate must lie in [0, 1).
  void ema_update(double rate);
  /// Exchanges live values and the shadow (used to evaluate with EMA weights).
  void swap_live_and_shadow();

  std::vector<Matrix> snapshot() const;
  void load(const std::vector<Matrix>& values);

  std::int64_t step = 0;

 private:
  struct Entry {
    std::string name;
    Var live;
    Matrix shadow;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> lookup_;
};

/// Swaps the EMA shadow in for the lifetime of the object.
class ShadowScope {
 public:
  explicit ShadowScope(ParameterSet& params) : params_(params) { params_.swap_live_and_shadow(); }
  ~ShadowScope() { params_.swap_live_and_shadow(); }
  ShadowScope(const ShadowScope&) = delete;
  ShadowScope& operator=(const ShadowScope&) = delete;

 private:
  ParameterSet& params_;
};

/// Feature map (C, B*H*W).
struct Fmap {
  Var x;
  int batch = 0;
  int height = 0;
  int width = 0;
  int positions() const { return height * width; }
};

struct Linear {
  Var weight;  // (out, in)
  Var bias;    // (out, 1)
  Linear() = default;
  Linear(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng,
         bool zero_init = false);
  Var operator()(const Var& x) const;
};

struct Conv2d {
  Var weight;  // (out, k*k*in)
  Var bias;    // (out, 1)
  int kernel = 3;
  Conv2d() = default;
  Conv2d(ParameterSet& ps, const std::string& name, int in, int out, int kernel, Rng& rng,
         bool zero_init = false);
  Fmap operator()(const Fmap& x) const;
};

struct GroupNorm {
  Var gamma;
  Var beta;
  int groups = 1;
  GroupNorm() = default;
  GroupNorm(ParameterSet& ps, const std::string& name, int channels, int groups);
  Fmap operator()(const Fmap& x) const;
};

/// Largest divisor of channels not exceeding 8.
int default_groups(int channels);

struct ResBlock {
  GroupNorm norm1;
  Conv2d conv1;
  Linear time_proj;  // present when a time embedding is used
  GroupNorm norm2;
  Conv2d conv2;
  Conv2d skip;  // 1x1, present when channel counts differ
  bool has_time = false;
  bool has_skip = false;
  ResBlock() = default;
  ResBlock(ParameterSet& ps, const std::string& name, int in, int out, int time_dim, Rng& rng);
  Fmap operator()(const Fmap& x, const Var* temb) const;
};

struct SelfAttention2d {
  GroupNorm norm;
  Linear qkv;
  Linear proj;
  int channels = 0;
  SelfAttention2d() = default;
  SelfAttention2d(ParameterSet& ps, const std::string& name, int channels, Rng& rng);
  Fmap operator()(const Fmap& x) const;
};

/// Sinusoidal features of t: (sin(w_j t), cos(w_j t)) with w_j geometric in [1, max_freq].
/// Returns (dim, S). dim must be even.
Matrix sinusoidal_embedding(const Eigen::VectorXd& t, int dim, double max_freq = 50.0);

struct EncoderDecoderSpec {
  int in_channels = 1;
  int out_channels = 4;
  int base_width = 16;
  std::vector<int> multipliers{1, 2, 2};
  int blocks_per_level = 1;
  /// Levels (0 = full resolution) that get a self-attention layer after their blocks.
  std::vector<int> attention_levels;
  /// 0 disables time conditioning.
  int time_embedding = 0;
};

/// U-Net style encoder-decoder with skip concatenation. Output head is zero initialised.
class EncoderDecoder {
 public:
  EncoderDecoder(ParameterSet& ps, const std::string& name, const EncoderDecoderSpec& spec,
                 Rng& rng);
  /// x is (in_channels, B*H*W); H and W must be divisible by 2^(levels-1).
  Fmap forward(const Fmap& x, const Eigen::VectorXd* t) const;
  const EncoderDecoderSpec& spec() const { return spec_; }

 private:
  EncoderDecoderSpec spec_;
  Conv2d in_conv_;
  Linear time1_;
  Linear time2_;
  std::vector<std::vector<ResBlock>> down_;
  std::vector<std::vector<SelfAttention2d>> down_attn_;
  ResBlock mid_;
  std::vector<ResBlock> up_;
  std::vector<std::vector<SelfAttention2d>> up_attn_;
  GroupNorm out_norm_;
  Conv2d out_conv_;
};

/// Image tensor layout helpers: images are flat (c*h*w, B), channel-major.
Fmap images_to_fmap(const Var& flat, int channels, int height, int width);
Var fmap_to_images(const Fmap& f);

struct PriorSpec {
  int categories = 2;
  int height = 16;
  int width = 16;
  /// 0 for an unconditional prior held as free parameters.
  int input_channels = 1;
  EncoderDecoderSpec net;
  /// When set the base log-scale is frozen at 0.
  bool fixed_variance = false;
  /// Additional output channels per category (low-rank factors for the SSN).
  int rank = 0;
};

/// Output of the prior: a diagonal field and, for rank > 0, low-rank factors.
struct PriorOutput {
  Var mean;       // (k*d, B)
  Var raw_scale;  // (k*d, B), softplus input
  Var factors;    // (k*d, r*B), undefined when rank == 0
};

class PriorNetwork {
 public:
  PriorNetwork(ParameterSet& ps, const PriorSpec& spec, Rng& rng);
  /// x is (c*h*w, B) or nullptr for the unconditional prior (then B = 1).
  PriorOutput forward(const Var* x) const;
  dist::DiagGaussianField field(const Var* x) const;
  dist::LowRankGaussianSpec lowrank(const Var* x) const;
  const PriorSpec& spec() const { return spec_; }
  int dims() const { return spec_.categories * spec_.height * spec_.width; }

 private:
  PriorSpec spec_;
  std::unique_ptr<EncoderDecoder> net_;
  Var free_mean_;
  Var free_scale_;
  Var free_factors_;
};

struct FlowNetSpec {
  int categories = 2;
  int height = 16;
  int width = 16;
  /// Input image channels concatenated to y_t; 0 leaves the network unconditioned.
  int context_channels = 0;
  EncoderDecoderSpec net;
};

/// Logits for E[y | y_t] from (y_t, t) and optionally the input image.
class FlowNetwork final : public cont::LogitNetwork {
 public:
  FlowNetwork(ParameterSet& ps, const FlowNetSpec& spec, Rng& rng);
  /// context is (c*h*w, S) when the network is conditioned.
  Var logits(const Var& y_t, const Eigen::VectorXd& t, const Var* context) const override;
  int categories() const override { return spec_.categories; }
  const FlowNetSpec& spec() const { return spec_; }

 private:
  FlowNetSpec spec_;
  std::unique_ptr<EncoderDecoder> net_;
};

/// Single masked linear layer: shift = (W_mu . M) x + b_mu, log_scale = (W_s . M) x + b_s,
/// M strictly lower triangular. Weights start at zero.
class MadeLinearConditioner final : public flows::Conditioner {
 public:
  MadeLinearConditioner(ParameterSet& ps, const std::string& name, int dims, int context_dims);
  flows::AffineParams forward(const Var& input, const Var* context) const override;
  Eigen::Index dims() const override { return dims_; }

 private:
  int dims_;
  Matrix mask_;
  Var w_shift_, b_shift_, w_scale_, b_scale_;
  Var c_shift_, c_scale_;
};

struct TransformerSpec {
  flows::PatchShape patch;
  int width = 32;
  int blocks = 1;
  int mlp_ratio = 2;
  /// Channels of the optional context image (patchified alongside the field).
  int context_channels = 0;
};

/// Causal attention over raster-ordered patch tokens; token t sees tokens < t only.
class CausalTransformerConditioner final : public flows::Conditioner {
 public:
  CausalTransformerConditioner(ParameterSet& ps, const std::string& name,
                               const TransformerSpec& spec, Rng& rng);
  flows::AffineParams forward(const Var& input, const Var* context) const override;
  Eigen::Index dims() const override;
  std::vector<std::vector<Eigen::Index>> groups() const override;

 private:
  struct Block {
    GroupNorm norm1;
    Linear q, k, v, proj;
    GroupNorm norm2;
    Linear fc1, fc2;
  };
  Var tokens_of(const Var& field, int channels, Eigen::Index samples) const;
  Var field_of(const Var& tokens, Eigen::Index samples) const;

  TransformerSpec spec_;
  Linear embed_;
  Linear context_embed_;
  Var start_;
  Var position_;
  std::vector<Block> blocks_;
  GroupNorm out_norm_;
  Linear head_;
};

/// Checkpoint: magic, version, JSON header (config, names, shapes, step), raw float64
/// little-endian live values followed by the shadow values.
struct Checkpoint {
  std::string config_json;
  std::int64_t step = 0;
  std::vector<std::string> names;
  std::vector<Matrix> live;
  std::vector<Matrix> shadow;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& ps,
                     const std::string& config_json);
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Copies tensors into ps by name; throws std::runtime_error on missing names or shape
/// mismatch.
void load_checkpoint(const Checkpoint& ckpt, ParameterSet& ps);

}  // namespace flowssn::nn
