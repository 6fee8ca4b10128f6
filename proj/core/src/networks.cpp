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

#include "flowssn/networks.hpp"

#include "flowssn/binary_io.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace flowssn::nn {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'S', 'S', 'N', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

Matrix scaled_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  return standard_normal(rows, cols, rng) * stddev;
}

// Raw value whose softplus is one.
const double kUnitRawScale = std::log(std::numbers::e - 1.0);

Var silu(const Fmap& f) { return ad::silu(f.x); }

}  // namespace

Var ParameterSet::add(const std::string& name, Matrix init) {
  if (lookup_.count(name) != 0) {
    throw std::invalid_argument("duplicate parameter name " + name);
  }
  Entry e{name, ad::parameter(init), init};
  lookup_[name] = entries_.size();
  entries_.push_back(std::move(e));
  return entries_.back().live;
}

std::size_t ParameterSet::index(const std::string& name) const {
  auto it = lookup_.find(name);
  if (it == lookup_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

std::int64_t ParameterSet::count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.live.value().size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.live.zero_grad();
}

void ParameterSet::ema_update(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("ema rate must lie in [0, 1)");
  }
  for (auto& e : entries_) {
    e.shadow = rate * e.shadow + (1.0 - rate) * e.live.value();
  }
}

void ParameterSet::swap_live_and_shadow() {
  for (auto& e : entries_) e.live.mutable_value().swap(e.shadow);
}

std::vector<Matrix> ParameterSet::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.live.value());
  return out;
}

void ParameterSet::load(const std::vector<Matrix>& values) {
  if (values.size() != entries_.size()) {
    throw std::invalid_argument("parameter snapshot has the wrong number of tensors");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Matrix& v = values[i];
    if (v.rows() != entries_[i].live.rows() || v.cols() != entries_[i].live.cols()) {
      throw std::invalid_argument("parameter snapshot shape mismatch for " + entries_[i].name);
    }
    entries_[i].live.mutable_value() = v;
  }
}

Linear::Linear(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng,
               bool zero_init) {
  weight = ps.add(name + ".weight", zero_init ? Matrix::Zero(out, in)
                                              : scaled_normal(out, in, 1.0 / std::sqrt(in), rng));
  bias = ps.add(name + ".bias", Matrix::Zero(out, 1));
}

Var Linear::operator()(const Var& x) const {
  return ad::add_col_broadcast(ad::matmul(weight, x), bias);
}

Conv2d::Conv2d(ParameterSet& ps, const std::string& name, int in, int out, int k, Rng& rng,
               bool zero_init)
    : kernel(k) {
  const int fan_in = in * k * k;
  weight = ps.add(name + ".weight",
                  zero_init ? Matrix::Zero(out, fan_in)
                            : scaled_normal(out, fan_in, 1.0 / std::sqrt(fan_in), rng));
  bias = ps.add(name + ".bias", Matrix::Zero(out, 1));
}

Fmap Conv2d::operator()(const Fmap& x) const {
  return {ad::conv2d(x.x, weight, bias, x.batch, x.height, x.width, kernel), x.batch, x.height,
          x.width};
}

GroupNorm::GroupNorm(ParameterSet& ps, const std::string& name, int channels, int g)
    : groups(g) {
  gamma = ps.add(name + ".gamma", Matrix::Ones(channels, 1));
  beta = ps.add(name + ".beta", Matrix::Zero(channels, 1));
}

Fmap GroupNorm::operator()(const Fmap& x) const {
  return {ad::group_norm(x.x, gamma, beta, groups, x.batch, x.positions()), x.batch, x.height,
          x.width};
}

int default_groups(int channels) {
  for (int g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

ResBlock::ResBlock(ParameterSet& ps, const std::string& name, int in, int out, int time_dim,
                   Rng& rng)
    : norm1(ps, name + ".norm1", in, default_groups(in)),
      conv1(ps, name + ".conv1", in, out, 3, rng),
      norm2(ps, name + ".norm2", out, default_groups(out)),
      conv2(ps, name + ".conv2", out, out, 3, rng),
      has_time(time_dim > 0),
      has_skip(in != out) {
  if (has_time) time_proj = Linear(ps, name + ".time", time_dim, out, rng);
  if (has_skip) skip = Conv2d(ps, name + ".skip", in, out, 1, rng);
}

Fmap ResBlock::operator()(const Fmap& x, const Var* temb) const {
  Fmap h = norm2(conv1({silu(norm1(x)), x.batch, x.height, x.width}));
  // After the norm: with one channel per group a per-sample bias added before it
  // would be subtracted out again.
  if (has_time) {
    if (temb == nullptr) throw std::invalid_argument("ResBlock: time embedding required");
    h.x = ad::add_sample_bias(h.x, time_proj(ad::silu(*temb)), h.positions());
  }
  h = conv2({silu(h), h.batch, h.height, h.width});
  const Var base = has_skip ? skip(x).x : x.x;
  return {ad::add(base, h.x), x.batch, x.height, x.width};
}

SelfAttention2d::SelfAttention2d(ParameterSet& ps, const std::string& name, int c, Rng& rng)
    : norm(ps, name + ".norm", c, default_groups(c)),
      qkv(ps, name + ".qkv", c, 3 * c, rng),
      proj(ps, name + ".proj", c, c, rng, true),
      channels(c) {}

Fmap SelfAttention2d::operator()(const Fmap& x) const {
  const Var h = qkv(norm(x).x);
  const Var q = ad::slice_rows(h, 0, channels);
  const Var k = ad::slice_rows(h, channels, channels);
  const Var v = ad::slice_rows(h, 2 * channels, channels);
  const Var a = ad::attention(q, k, v, x.positions(), false);
  return {ad::add(x.x, proj(a)), x.batch, x.height, x.width};
}

Matrix sinusoidal_embedding(const Eigen::VectorXd& t, int dim, double max_freq) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("time embedding dim must be even");
  const int half = dim / 2;
  Matrix out(dim, t.size());
  for (int j = 0; j < half; ++j) {
    const double w = half == 1 ? 1.0 : std::pow(max_freq, static_cast<double>(j) / (half - 1));
    for (Eigen::Index s = 0; s < t.size(); ++s) {
      out(j, s) = std::sin(w * t(s));
      out(half + j, s) = std::cos(w * t(s));
    }
  }
  return out;
}

EncoderDecoder::EncoderDecoder(ParameterSet& ps, const std::string& name,
                               const EncoderDecoderSpec& spec, Rng& rng)
    : spec_(spec) {
  if (spec.multipliers.empty() || spec.base_width < 1 || spec.blocks_per_level < 1) {
    throw std::invalid_argument("encoder-decoder spec is empty");
  }
  const int levels = static_cast<int>(spec.multipliers.size());
  const int w = spec.base_width;
  int tdim = 0;
  if (spec.time_embedding > 0) {
    tdim = 4 * w;
    time1_ = Linear(ps, name + ".time1", spec.time_embedding, tdim, rng);
    time2_ = Linear(ps, name + ".time2", tdim, tdim, rng);
  }
  auto has_attn = [&](int level) {
    for (int a : spec.attention_levels) {
      if (a == level) return true;
    }
    return false;
  };
  in_conv_ = Conv2d(ps, name + ".in", spec.in_channels, w * spec.multipliers[0], 3, rng);
  int ch = w * spec.multipliers[0];
  std::vector<int> skip_ch;
  down_.resize(levels);
  down_attn_.resize(levels);
  for (int l = 0; l < levels; ++l) {
    const int out = w * spec.multipliers[l];
    for (int b = 0; b < spec.blocks_per_level; ++b) {
      const std::string n = name + ".down" + std::to_string(l) + "." + std::to_string(b);
      down_[l].emplace_back(ps, n, ch, out, tdim, rng);
      ch = out;
      if (has_attn(l)) down_attn_[l].emplace_back(ps, n + ".attn", ch, rng);
    }
    skip_ch.push_back(ch);
  }
  mid_ = ResBlock(ps, name + ".mid", ch, ch, tdim, rng);
  up_attn_.resize(levels);
  for (int l = levels - 1; l >= 0; --l) {
    const int out = w * spec.multipliers[l];
    const std::string n = name + ".up" + std::to_string(l);
    up_.emplace_back(ps, n, ch + skip_ch[l], out, tdim, rng);
    ch = out;
    if (has_attn(l)) up_attn_[l].emplace_back(ps, n + ".attn", ch, rng);
  }
  out_norm_ = GroupNorm(ps, name + ".out_norm", ch, default_groups(ch));
  out_conv_ = Conv2d(ps, name + ".out", ch, spec.out_channels, 3, rng, true);
}

Fmap EncoderDecoder::forward(const Fmap& x, const Eigen::VectorXd* t) const {
  const int levels = static_cast<int>(spec_.multipliers.size());
  const int factor = 1 << (levels - 1);
  if (x.x.rows() != spec_.in_channels) {
    throw std::invalid_argument("encoder-decoder expects " + std::to_string(spec_.in_channels) +
                                " input channels, got " + std::to_string(x.x.rows()));
  }
  if (x.height % factor != 0 || x.width % factor != 0) {
    throw std::invalid_argument("encoder-decoder input size must be divisible by " +
                                std::to_string(factor));
  }
  Var temb;
  const Var* tp = nullptr;
  if (spec_.time_embedding > 0) {
    if (t == nullptr || t->size() != x.batch) {
      throw std::invalid_argument("encoder-decoder needs one time value per batch element");
    }
    temb = time2_(ad::silu(time1_(ad::constant(sinusoidal_embedding(*t, spec_.time_embedding)))));
    tp = &temb;
  }
  Fmap h = in_conv_(x);
  std::vector<Fmap> skips;
  for (int l = 0; l < levels; ++l) {
    for (std::size_t b = 0; b < down_[l].size(); ++b) {
      h = down_[l][b](h, tp);
      if (b < down_attn_[l].size()) h = down_attn_[l][b](h);
    }
    skips.push_back(h);
    if (l + 1 < levels) {
      h = {ad::avg_pool2(h.x, h.batch, h.height, h.width), h.batch, h.height / 2, h.width / 2};
    }
  }
  h = mid_(h, tp);
  for (int i = 0; i < levels; ++i) {
    const int l = levels - 1 - i;
    h = {ad::concat_rows({h.x, skips[l].x}), h.batch, h.height, h.width};
    h = up_[i](h, tp);
    for (const auto& a : up_attn_[l]) h = a(h);
    if (l > 0) {
      h = {ad::upsample2(h.x, h.batch, h.height, h.width), h.batch, h.height * 2, h.width * 2};
    }
  }
  return out_conv_({ad::silu(out_norm_(h).x), h.batch, h.height, h.width});
}

Fmap images_to_fmap(const Var& flat, int channels, int height, int width) {
  if (flat.rows() != static_cast<Eigen::Index>(channels) * height * width) {
    throw std::invalid_argument("image rows do not match channels*height*width");
  }
  return {ad::flat_to_fmap(flat, channels), static_cast<int>(flat.cols()), height, width};
}

Var fmap_to_images(const Fmap& f) { return ad::fmap_to_flat(f.x, f.batch); }

PriorNetwork::PriorNetwork(ParameterSet& ps, const PriorSpec& spec, Rng& rng) : spec_(spec) {
  const int k = spec.categories;
  const Eigen::Index n = dims();
  if (spec.rank < 0) throw std::invalid_argument("prior rank must be >= 0");
  if (spec.input_channels == 0) {
    free_mean_ = ps.add("prior.mean", Matrix::Zero(n, 1));
    if (!spec.fixed_variance) {
      free_scale_ = ps.add("prior.raw_scale", Matrix::Constant(n, 1, kUnitRawScale));
    }
    if (spec.rank > 0) {
      free_factors_ = ps.add("prior.factors", scaled_normal(n, spec.rank, 0.01, rng));
    }
  } else {
    EncoderDecoderSpec net = spec.net;
    net.in_channels = spec.input_channels;
    net.out_channels = k * (2 + spec.rank);
    net_ = std::make_unique<EncoderDecoder>(ps, "prior", net, rng);
  }
}

PriorOutput PriorNetwork::forward(const Var* x) const {
  const int k = spec_.categories;
  const Eigen::Index n = dims();
  PriorOutput out;
  if (!net_) {
    if (x != nullptr) throw std::invalid_argument("unconditional prior takes no input");
    out.mean = free_mean_;
    out.raw_scale = spec_.fixed_variance ? Var() : free_scale_;
    if (spec_.rank > 0) out.factors = free_factors_;
    return out;
  }
  if (x == nullptr) throw std::invalid_argument("conditional prior requires an input image");
  const Fmap in = images_to_fmap(*x, spec_.input_channels, spec_.height, spec_.width);
  const Fmap f = net_->forward(in, nullptr);
  const int batch = in.batch;
  auto channels = [&](int start) {
    return fmap_to_images({ad::slice_rows(f.x, start, k), batch, f.height, f.width});
  };
  out.mean = channels(0);
  if (!spec_.fixed_variance) out.raw_scale = channels(k);
  if (spec_.rank > 0) {
    std::vector<Var> parts;
    for (int r = 0; r < spec_.rank; ++r) parts.push_back(channels((2 + r) * k));
    const Var stacked = spec_.rank == 1 ? parts.front() : ad::concat_cols(parts);
    // concat gives column r*B + b; factors want column b*r + r.
    auto index = std::make_shared<std::vector<Eigen::Index>>();
    index->reserve(static_cast<std::size_t>(n * spec_.rank * batch));
    for (int b = 0; b < batch; ++b) {
      for (int r = 0; r < spec_.rank; ++r) {
        const Eigen::Index col = static_cast<Eigen::Index>(r) * batch + b;
        for (Eigen::Index i = 0; i < n; ++i) index->push_back(col * n + i);
      }
    }
    out.factors = ad::gather(stacked, index, n, static_cast<Eigen::Index>(spec_.rank) * batch);
  }
  return out;
}

dist::DiagGaussianField PriorNetwork::field(const Var* x) const {
  const PriorOutput o = forward(x);
  if (!o.raw_scale.defined()) return dist::DiagGaussianField::unit_scale(o.mean);
  return dist::DiagGaussianField::from_raw(o.mean, o.raw_scale);
}

dist::LowRankGaussianSpec PriorNetwork::lowrank(const Var* x) const {
  const PriorOutput o = forward(x);
  const Var raw = o.raw_scale.defined()
                      ? o.raw_scale
                      : ad::constant(Matrix::Constant(o.mean.rows(), o.mean.cols(), kUnitRawScale));
  const Var factors = spec_.rank > 0 ? o.factors : ad::constant(Matrix(o.mean.rows(), 0));
  return dist::LowRankGaussianSpec::from_raw(o.mean, raw, factors, spec_.rank);
}

FlowNetwork::FlowNetwork(ParameterSet& ps, const FlowNetSpec& spec, Rng& rng) : spec_(spec) {
  EncoderDecoderSpec net = spec.net;
  net.in_channels = spec.categories + spec.context_channels;
  net.out_channels = spec.categories;
  if (net.time_embedding <= 0) net.time_embedding = 16;
  net_ = std::make_unique<EncoderDecoder>(ps, "flow", net, rng);
}

Var FlowNetwork::logits(const Var& y_t, const Eigen::VectorXd& t, const Var* context) const {
  const int k = spec_.categories;
  if (y_t.rows() != static_cast<Eigen::Index>(k) * spec_.height * spec_.width) {
    throw std::invalid_argument("flow network: y_t has " + std::to_string(y_t.rows()) +
                                " rows, expected k*h*w");
  }
  if (t.size() != y_t.cols()) {
    throw std::invalid_argument("flow network: need one time value per sample");
  }
  Fmap in = images_to_fmap(y_t, k, spec_.height, spec_.width);
  if (spec_.context_channels > 0) {
    if (context == nullptr || context->cols() != y_t.cols()) {
      throw std::invalid_argument("flow network: conditioned network requires a context column per sample");
    }
    const Fmap c = images_to_fmap(*context, spec_.context_channels, spec_.height, spec_.width);
    in.x = ad::concat_rows({in.x, c.x});
  }
  return fmap_to_images(net_->forward(in, &t));
}

MadeLinearConditioner::MadeLinearConditioner(ParameterSet& ps, const std::string& name, int dims,
                                             int context_dims)
    : dims_(dims) {
  mask_ = Matrix::Zero(dims, dims);
  for (int i = 0; i < dims; ++i) {
    for (int j = 0; j < i; ++j) mask_(i, j) = 1.0;
  }
  w_shift_ = ps.add(name + ".w_shift", Matrix::Zero(dims, dims));
  b_shift_ = ps.add(name + ".b_shift", Matrix::Zero(dims, 1));
  w_scale_ = ps.add(name + ".w_scale", Matrix::Zero(dims, dims));
  b_scale_ = ps.add(name + ".b_scale", Matrix::Zero(dims, 1));
  if (context_dims > 0) {
    c_shift_ = ps.add(name + ".c_shift", Matrix::Zero(dims, context_dims));
    c_scale_ = ps.add(name + ".c_scale", Matrix::Zero(dims, context_dims));
  }
}

flows::AffineParams MadeLinearConditioner::forward(const Var& input, const Var* context) const {
  if (input.rows() != dims_) {
    throw std::invalid_argument("MADE conditioner: input has wrong dimension");
  }
  const Var mask = ad::constant(mask_);
  Var shift = ad::add_col_broadcast(ad::matmul(ad::cmul(w_shift_, mask), input), b_shift_);
  Var scale = ad::add_col_broadcast(ad::matmul(ad::cmul(w_scale_, mask), input), b_scale_);
  if (c_shift_.defined()) {
    if (context == nullptr) throw std::invalid_argument("MADE conditioner: context required");
    shift = ad::add(shift, ad::matmul(c_shift_, *context));
    scale = ad::add(scale, ad::matmul(c_scale_, *context));
  }
  return {shift, scale};
}

CausalTransformerConditioner::CausalTransformerConditioner(ParameterSet& ps,
                                                           const std::string& name,
                                                           const TransformerSpec& spec, Rng& rng)
    : spec_(spec) {
  spec_.patch.validate();
  const int td = spec_.patch.token_dims();
  const int w = spec_.width;
  const int groups = 1;
  embed_ = Linear(ps, name + ".embed", td, w, rng);
  if (spec_.context_channels > 0) {
    const int cd = spec_.context_channels * spec_.patch.patch_h * spec_.patch.patch_w;
    context_embed_ = Linear(ps, name + ".context", cd, w, rng);
  }
  start_ = ps.add(name + ".start", scaled_normal(w, 1, 0.02, rng));
  position_ = ps.add(name + ".position", scaled_normal(w, spec_.patch.tokens(), 0.02, rng));
  for (int b = 0; b < spec_.blocks; ++b) {
    const std::string n = name + ".block" + std::to_string(b);
    Block blk;
    blk.norm1 = GroupNorm(ps, n + ".norm1", w, groups);
    blk.q = Linear(ps, n + ".q", w, w, rng);
    blk.k = Linear(ps, n + ".k", w, w, rng);
    blk.v = Linear(ps, n + ".v", w, w, rng);
    blk.proj = Linear(ps, n + ".proj", w, w, rng);
    blk.norm2 = GroupNorm(ps, n + ".norm2", w, groups);
    blk.fc1 = Linear(ps, n + ".fc1", w, spec_.mlp_ratio * w, rng);
    blk.fc2 = Linear(ps, n + ".fc2", spec_.mlp_ratio * w, w, rng);
    blocks_.push_back(std::move(blk));
  }
  out_norm_ = GroupNorm(ps, name + ".out_norm", w, groups);
  head_ = Linear(ps, name + ".head", w, 2 * td, rng, true);
}

Eigen::Index CausalTransformerConditioner::dims() const {
  return static_cast<Eigen::Index>(spec_.patch.k) * spec_.patch.height * spec_.patch.width;
}

std::vector<std::vector<Eigen::Index>> CausalTransformerConditioner::groups() const {
  std::vector<std::vector<Eigen::Index>> out(static_cast<std::size_t>(spec_.patch.tokens()));
  for (int t = 0; t < spec_.patch.tokens(); ++t) {
    for (int f = 0; f < spec_.patch.token_dims(); ++f) {
      out[static_cast<std::size_t>(t)].push_back(spec_.patch.field_index(t, f));
    }
  }
  return out;
}

Var CausalTransformerConditioner::tokens_of(const Var& field, int channels,
                                            Eigen::Index samples) const {
  flows::PatchShape shape = spec_.patch;
  shape.k = channels;
  const Eigen::Index rows = field.rows();
  const int tokens = shape.tokens();
  const int td = shape.token_dims();
  auto index = std::make_shared<std::vector<Eigen::Index>>();
  index->reserve(static_cast<std::size_t>(td * tokens * samples));
  for (Eigen::Index s = 0; s < samples; ++s) {
    for (int t = 0; t < tokens; ++t) {
      for (int f = 0; f < td; ++f) index->push_back(s * rows + shape.field_index(t, f));
    }
  }
  return ad::gather(field, index, td, samples * tokens);
}

Var CausalTransformerConditioner::field_of(const Var& tokens, Eigen::Index samples) const {
  const flows::PatchShape& shape = spec_.patch;
  const Eigen::Index n = dims();
  const int nt = shape.tokens();
  const int td = shape.token_dims();
  auto index = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(n * samples));
  for (Eigen::Index s = 0; s < samples; ++s) {
    for (int t = 0; t < nt; ++t) {
      for (int f = 0; f < td; ++f) {
        (*index)[static_cast<std::size_t>(s * n + shape.field_index(t, f))] =
            (s * nt + t) * td + f;
      }
    }
  }
  return ad::gather(tokens, index, n, samples);
}

flows::AffineParams CausalTransformerConditioner::forward(const Var& input,
                                                          const Var* context) const {
  if (input.rows() != dims()) {
    throw std::invalid_argument("transformer conditioner: input has wrong dimension");
  }
  const Eigen::Index samples = input.cols();
  const int nt = spec_.patch.tokens();
  const int w = spec_.width;
  const Eigen::Index len = samples * nt;
  const Var embedded = embed_(tokens_of(input, spec_.patch.k, samples));
  // Token t is fed the embedding of token t - 1; token 0 gets the start vector.
  auto shift_index = std::make_shared<std::vector<Eigen::Index>>();
  shift_index->reserve(static_cast<std::size_t>(w * len));
  auto pos_index = std::make_shared<std::vector<Eigen::Index>>();
  pos_index->reserve(static_cast<std::size_t>(w * len));
  for (Eigen::Index s = 0; s < samples; ++s) {
    for (int t = 0; t < nt; ++t) {
      const Eigen::Index src = t == 0 ? len : s * nt + t - 1;
      for (int r = 0; r < w; ++r) {
        shift_index->push_back(src * w + r);
        pos_index->push_back(static_cast<Eigen::Index>(t) * w + r);
      }
    }
  }
  Var h = ad::gather(ad::concat_cols({embedded, start_}), shift_index, w, len);
  h = ad::add(h, ad::gather(position_, pos_index, w, len));
  if (spec_.context_channels > 0) {
    if (context == nullptr || context->cols() != samples) {
      throw std::invalid_argument("transformer conditioner: context required per sample");
    }
    h = ad::add(h, context_embed_(tokens_of(*context, spec_.context_channels, samples)));
  }
  const int flat_batch = static_cast<int>(len);
  auto norm = [&](const GroupNorm& g, const Var& x) {
    return ad::group_norm(x, g.gamma, g.beta, 1, flat_batch, 1);
  };
  for (const auto& blk : blocks_) {
    const Var a = norm(blk.norm1, h);
    h = ad::add(h, blk.proj(ad::attention(blk.q(a), blk.k(a), blk.v(a), nt, true)));
    h = ad::add(h, blk.fc2(ad::silu(blk.fc1(norm(blk.norm2, h)))));
  }
  const Var out = head_(norm(out_norm_, h));
  const int td = spec_.patch.token_dims();
  return {field_of(ad::slice_rows(out, 0, td), samples),
          field_of(ad::slice_rows(out, td, td), samples)};
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& ps,
                     const std::string& config_json) {
  json header;
  header["format"] = "flowssn-checkpoint";
  header["dtype"] = "float64";
  header["byte_order"] = "little";
  header["layout"] = "row-major";
  header["step"] = ps.step;
  header["config"] = config_json.empty() ? json::object() : json::parse(config_json);
  json tensors = json::array();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    tensors.push_back({{"name", ps.name(i)},
                       {"rows", ps.live(i).rows()},
                       {"cols", ps.live(i).cols()}});
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::string buffer(kMagic, sizeof(kMagic));
  const std::uint32_t version = kCheckpointVersion;
  io::append_le(buffer, std::span<const std::uint32_t>(&version, 1));
  const std::uint64_t len = text.size();
  io::append_le(buffer, std::span<const std::uint64_t>(&len, 1));
  buffer += text;
  auto append_matrix = [&](const Matrix& m) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    io::append_le(buffer, std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())));
  };
  for (std::size_t i = 0; i < ps.size(); ++i) append_matrix(ps.live(i).value());
  for (std::size_t i = 0; i < ps.size(); ++i) append_matrix(ps.shadow(i));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::string buffer((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t fixed = sizeof(kMagic) + 4 + 8;
  if (buffer.size() < fixed || std::memcmp(buffer.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  const auto version = io::decode_le<std::uint32_t>(buffer.data() + sizeof(kMagic), 1)[0];
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " in " +
                             path.string());
  }
  const auto len = io::decode_le<std::uint64_t>(buffer.data() + sizeof(kMagic) + 4, 1)[0];
  if (buffer.size() < fixed + len) throw std::runtime_error("truncated checkpoint: " + path.string());
  const json header = json::parse(buffer.substr(fixed, len));
  Checkpoint ck;
  ck.config_json = header.at("config").dump();
  ck.step = header.at("step").get<std::int64_t>();
  std::size_t offset = fixed + len;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  std::size_t total = 0;
  for (const auto& t : header.at("tensors")) {
    ck.names.push_back(t.at("name").get<std::string>());
    shapes.emplace_back(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    total += static_cast<std::size_t>(shapes.back().first * shapes.back().second);
  }
  if (buffer.size() != offset + 2 * total * sizeof(double)) {
    throw std::runtime_error("checkpoint " + path.string() + " has " +
                             std::to_string(buffer.size()) + " bytes, expected " +
                             std::to_string(offset + 2 * total * sizeof(double)));
  }
  auto read_matrix = [&](Eigen::Index rows, Eigen::Index cols) {
    const auto values =
        io::decode_le<double>(buffer.data() + offset, static_cast<std::size_t>(rows * cols));
    offset += values.size() * sizeof(double);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = values[static_cast<std::size_t>(r * cols + c)];
    }
    return m;
  };
  for (const auto& [r, c] : shapes) ck.live.push_back(read_matrix(r, c));
  for (const auto& [r, c] : shapes) ck.shadow.push_back(read_matrix(r, c));
  return ck;
}

void load_checkpoint(const Checkpoint& ckpt, ParameterSet& ps) {
  if (ckpt.names.size() != ps.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(ckpt.names.size()) +
                             " tensors, model has " + std::to_string(ps.size()));
  }
  std::vector<Matrix> live(ps.size());
  std::vector<Matrix> shadow(ps.size());
  for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
    std::size_t j = 0;
    try {
      j = ps.index(ckpt.names[i]);
    } catch (const std::out_of_range&) {
      throw std::runtime_error("checkpoint tensor " + ckpt.names[i] + " is not in the model");
    }
    if (ckpt.live[i].rows() != ps.live(j).rows() || ckpt.live[i].cols() != ps.live(j).cols()) {
      throw std::runtime_error("checkpoint tensor " + ckpt.names[i] + " has shape " +
                               std::to_string(ckpt.live[i].rows()) + "x" +
                               std::to_string(ckpt.live[i].cols()) + ", model expects " +
                               std::to_string(ps.live(j).rows()) + "x" +
                               std::to_string(ps.live(j).cols()));
    }
    live[j] = ckpt.live[i];
    shadow[j] = ckpt.shadow[i];
  }
  ps.load(shadow);
  ps.swap_live_and_shadow();
  ps.load(live);
  ps.step = ckpt.step;
}

}  // namespace flowssn::nn
