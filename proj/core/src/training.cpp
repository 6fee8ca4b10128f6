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

#include "flowssn/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace flowssn::train {

namespace {

using nlohmann::json;

bool is_one_of(const std::string& v, std::initializer_list<const char*> options) {
  return std::any_of(options.begin(), options.end(), [&](const char* o) { return v == o; });
}

json solver_to_json(const cont::SolverConfig& s) {
  return {{"method", s.method == cont::SolverMethod::kEuler ? "euler" : "dopri5"},
          {"steps", s.steps},
          {"abs_tol", s.abs_tol},
          {"rel_tol", s.rel_tol},
          {"max_steps", s.max_steps}};
}

cont::SolverConfig solver_from_json(const json& j) {
  cont::SolverConfig s;
  const std::string method = j.value("method", "euler");
  if (method == "euler") {
    s.method = cont::SolverMethod::kEuler;
  } else if (method == "dopri5") {
    s.method = cont::SolverMethod::kDopri5;
  } else {
    throw std::invalid_argument("unknown solver method '" + method + "'");
  }
  s.steps = j.value("steps", s.steps);
  s.abs_tol = j.value("abs_tol", s.abs_tol);
  s.rel_tol = j.value("rel_tol", s.rel_tol);
  s.max_steps = j.value("max_steps", s.max_steps);
  return s;
}

json config_to_json(const RunConfig& c) {
  json j;
  j["model"] = c.model;
  j["dataset"] = c.dataset;
  j["val_dataset"] = c.val_dataset;
  j["objective"] = {{"variant", c.objective.variant},
                    {"mc_samples", c.objective.mc_samples},
                    {"beta", c.objective.beta},
                    {"kl_estimator", c.objective.kl_estimator}};
  j["optim"] = {{"lr", c.optim.lr},
                {"weight_decay", c.optim.weight_decay},
                {"warmup_steps", c.optim.warmup_steps},
                {"ema_rate", c.optim.ema_rate},
                {"clip_norm", c.optim.clip_norm},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps}};
  j["batch_size"] = c.batch_size;
  j["max_steps"] = c.max_steps;
  j["eval_every"] = c.eval_every;
  j["eval_m"] = c.eval_m;
  j["eval_images"] = c.eval_images;
  j["bpd_samples"] = c.bpd_samples;
  j["conditional"] = c.conditional ? json(*c.conditional) : json("auto");
  j["shared_samples"] = c.shared_samples;
  j["rank"] = c.rank;
  j["fixed_variance"] = c.fixed_variance;
  j["conditioner"] = c.conditioner;
  j["patch"] = {c.patch_h, c.patch_w};
  j["transformer_width"] = c.transformer_width;
  j["transformer_blocks"] = c.transformer_blocks;
  j["prior_width"] = c.prior_width;
  j["prior_multipliers"] = c.prior_multipliers;
  j["flow_width"] = c.flow_width;
  j["flow_multipliers"] = c.flow_multipliers;
  j["time_embedding"] = c.time_embedding;
  j["flow_conditioned"] = c.flow_conditioned;
  j["solver"] = solver_to_json(c.solver);
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  // Implementation choices recorded for reproducibility.
  j["architecture"] = {{"activation", "silu"},
                       {"normalisation", "group_norm"},
                       {"downsample", "avg_pool2"},
                       {"upsample", "nearest"},
                       {"time_features", "sinusoidal"}};
  return j;
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (known.count(it.key()) == 0) {
      throw std::invalid_argument("unknown key '" + it.key() + "' in " + where);
    }
  }
}

json shape_to_json(const DataShape& s) {
  return {{"categories", s.categories},
          {"height", s.height},
          {"width", s.width},
          {"image_channels", s.image_channels},
          {"name", s.name}};
}

DataShape shape_from_json(const json& j) {
  DataShape s;
  s.categories = j.at("categories").get<int>();
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.image_channels = j.at("image_channels").get<int>();
  s.name = j.at("name").get<std::string>();
  return s;
}

Matrix repeat_columns(const Matrix& x, int times) {
  Matrix out(x.rows(), x.cols() * times);
  for (Eigen::Index b = 0; b < x.cols(); ++b) out.middleCols(b * times, times) = x.col(b).replicate(1, times);
  return out;
}

double matrix_sq_norm(const Matrix& m) { return m.size() == 0 ? 0.0 : m.squaredNorm(); }

// Images of the first `count` records as (c*h*w, count) columns starting at `first`.
Matrix image_block(const datagen::Dataset& data, std::size_t first, std::size_t count) {
  const auto e = static_cast<Eigen::Index>(data.manifest.image_elements());
  Matrix out(e, static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    const auto img = data.image(first + i);
    for (Eigen::Index r = 0; r < e; ++r) out(r, static_cast<Eigen::Index>(i)) = img[static_cast<std::size_t>(r)];
  }
  return out;
}

// ---------------------------------------------------------------------------

nn::EncoderDecoderSpec prior_net_spec(const RunConfig& c) {
  nn::EncoderDecoderSpec s;
  s.base_width = c.prior_width;
  s.multipliers = c.prior_multipliers;
  return s;
}

nn::PriorSpec prior_spec(const RunConfig& c, const DataShape& shape, bool conditional, int rank) {
  nn::PriorSpec p;
  p.categories = shape.categories;
  p.height = shape.height;
  p.width = shape.width;
  p.input_channels = conditional ? shape.image_channels : 0;
  p.net = prior_net_spec(c);
  p.fixed_variance = c.fixed_variance;
  p.rank = rank;
  return p;
}

class SsnModel final : public Model {
 public:
  SsnModel(const RunConfig& c, const DataShape& shape, bool conditional)
      : Model(shape, conditional), m_(c.objective.mc_samples), shared_(c.shared_samples) {
    Rng rng(derive_seed(c.seed, 7));
    prior_ = std::make_unique<nn::PriorNetwork>(params_, prior_spec(c, shape, conditional, c.rank),
                                                rng);
  }

  Var loss(const Batch& batch, Rng& rng) override {
    const int k = shape_.categories;
    if (!conditional_) {
      const dist::LowRankGaussianSpec spec = prior_->lowrank(nullptr);
      if (shared_) {
        const Var eta = dist::lowrank_sample(spec, rng, m_);
        return ad::neg(ad::mean(obj::mc_log_likelihood_lse_shared(batch.labels, eta, k)));
      }
      const Var eta =
          dist::lowrank_sample(spec, rng, m_ * static_cast<int>(batch.labels.cols()));
      return ad::neg(ad::mean(obj::mc_log_likelihood_lse(batch.labels, eta, k)));
    }
    const Var x = ad::constant(batch.images);
    const Var eta = dist::lowrank_sample(prior_->lowrank(&x), rng, m_);
    return ad::neg(ad::mean(obj::mc_log_likelihood_lse(batch.labels, eta, k)));
  }

  Matrix sample_fields(const Matrix* images, int count, int m, Rng& rng,
                       const cont::SolverConfig&) override {
    ad::NoGradGuard guard;
    if (!conditional_) return dist::lowrank_sample(prior_->lowrank(nullptr), rng, count * m).value();
    const Var x = ad::constant(*images);
    return dist::lowrank_sample(prior_->lowrank(&x), rng, m).value();
  }

 private:
  std::unique_ptr<nn::PriorNetwork> prior_;
  int m_;
  bool shared_;
};

class DiscreteFlowModel final : public Model {
 public:
  DiscreteFlowModel(const RunConfig& c, const DataShape& shape, bool conditional)
      : Model(shape, conditional),
        m_(c.objective.mc_samples),
        shared_(c.shared_samples),
        variant_(c.objective.variant),
        beta_(c.objective.beta),
        kl_(obj::kl_estimator_from_string(c.objective.kl_estimator)) {
    Rng rng(derive_seed(c.seed, 7));
    prior_ = std::make_unique<nn::PriorNetwork>(params_, prior_spec(c, shape, conditional, 0), rng);
    iaf_.conditioner = make_conditioner(c, "iaf", rng);
    iaf_.direction = flows::Direction::kIAF;
    if (variant_ == "dual_flow") {
      maf_.conditioner = make_conditioner(c, "maf", rng);
      maf_.direction = flows::Direction::kMAF;
    }
  }

  Var loss(const Batch& batch, Rng& rng) override {
    const int k = shape_.categories;
    const Eigen::Index b = batch.labels.cols();
    Var x;
    const dist::DiagGaussianField field = conditional_
                                              ? prior_->field(&(x = ad::constant(batch.images)))
                                              : prior_->field(nullptr);
    const bool shared = !conditional_ && shared_;
    const int draws = conditional_ || shared ? m_ : m_ * static_cast<int>(b);
    const dist::DiagSample base = dist::diag_sample(field, rng, draws);
    const flows::CachedFlowSample cached = flows::iaf_forward(base.u, nullptr, iaf_);

    if (variant_ == "iaf_mc") {
      const Var ll = shared ? obj::mc_log_likelihood_lse_shared(batch.labels, cached.eta, k)
                            : obj::mc_log_likelihood_lse(batch.labels, cached.eta, k);
      return ad::neg(ad::mean(ll));
    }
    const Var mean_ll =
        shared ? ad::mean(dist::categorical_log_likelihood_pairs(batch.labels, cached.eta, k))
               : obj::mean_log_likelihood(batch.labels, cached.eta, k);
    if (variant_ == "entropy_reg") {
      if (beta_ == 0.0) return ad::neg(mean_ll);
      const Var h = ad::mean(flows::iaf_entropy_from_cache(field, cached));
      return ad::neg(ad::add(mean_ll, ad::scale(h, beta_)));
    }
    // dual_flow: the MAF shares the IAF base.
    const Var kl = obj::kl_estimate(flows::self_score(cached, field),
                                    flows::maf_log_prob(cached.eta, nullptr, maf_, field), kl_);
    return ad::neg(ad::sub(mean_ll, kl));
  }

  Matrix sample_fields(const Matrix* images, int count, int m, Rng& rng,
                       const cont::SolverConfig&) override {
    ad::NoGradGuard guard;
    Var x;
    const dist::DiagGaussianField field =
        conditional_ ? prior_->field(&(x = ad::constant(*images))) : prior_->field(nullptr);
    const dist::DiagSample base = dist::diag_sample(field, rng, conditional_ ? m : count * m);
    return flows::iaf_forward(base.u, nullptr, iaf_).eta.value();
  }

  const flows::AutoregressiveTransform& iaf() const { return iaf_; }

 private:
  std::shared_ptr<flows::Conditioner> make_conditioner(const RunConfig& c, const std::string& name,
                                                       Rng& rng) {
    if (c.conditioner == "made_linear") {
      return std::make_shared<nn::MadeLinearConditioner>(params_, name, shape_.dims(), 0);
    }
    nn::TransformerSpec t;
    t.patch = {shape_.categories, shape_.height, shape_.width, c.patch_h, c.patch_w};
    t.width = c.transformer_width;
    t.blocks = c.transformer_blocks;
    return std::make_shared<nn::CausalTransformerConditioner>(params_, name, t, rng);
  }

  std::unique_ptr<nn::PriorNetwork> prior_;
  flows::AutoregressiveTransform iaf_;
  flows::AutoregressiveTransform maf_;
  int m_;
  bool shared_;
  std::string variant_;
  double beta_;
  obj::KlEstimator kl_;
};

class ContinuousFlowModel final : public Model {
 public:
  ContinuousFlowModel(const RunConfig& c, const DataShape& shape, bool conditional)
      : Model(shape, conditional), flow_conditioned_(conditional && c.flow_conditioned) {
    Rng rng(derive_seed(c.seed, 7));
    prior_ = std::make_unique<nn::PriorNetwork>(params_, prior_spec(c, shape, conditional, 0), rng);
    nn::FlowNetSpec f;
    f.categories = shape.categories;
    f.height = shape.height;
    f.width = shape.width;
    f.context_channels = flow_conditioned_ ? shape.image_channels : 0;
    f.net.base_width = c.flow_width;
    f.net.multipliers = c.flow_multipliers;
    f.net.time_embedding = c.time_embedding;
    flow_ = std::make_unique<nn::FlowNetwork>(params_, f, rng);
  }

  Var loss(const Batch& batch, Rng& rng) override {
    const Eigen::Index b = batch.labels.cols();
    Var x;
    const dist::DiagGaussianField field = conditional_
                                              ? prior_->field(&(x = ad::constant(batch.images)))
                                              : prior_->field(nullptr);
    const Var u = dist::diag_sample(field, rng, conditional_ ? 1 : static_cast<int>(b)).u;
    Eigen::VectorXd t(b);
    for (Eigen::Index i = 0; i < b; ++i) t(i) = uniform01(rng);
    return obj::continuous_loss(batch.labels, flow_conditioned_ ? &x : nullptr, u, t, *flow_);
  }

  std::vector<std::vector<datagen::LabelMap>> sample(const Matrix* images, int count, int m,
                                                     Rng& rng,
                                                     const cont::SolverConfig& solver) override {
    const cont::IntegrationResult r = solve(images, count, m, rng, solver);
    return to_label_maps(r.classes, count, m);
  }

  Matrix sample_fields(const Matrix* images, int count, int m, Rng& rng,
                       const cont::SolverConfig& solver) override {
    return solve(images, count, m, rng, solver).y1;
  }

  bool has_logit_samples() const override { return false; }

  cont::IntegrationResult solve(const Matrix* images, int count, int m, Rng& rng,
                                const cont::SolverConfig& solver) const {
    ad::NoGradGuard guard;
    Var x;
    const dist::DiagGaussianField field =
        conditional_ ? prior_->field(&(x = ad::constant(*images))) : prior_->field(nullptr);
    const Matrix u = dist::diag_sample(field, rng, conditional_ ? m : count * m).u.value();
    if (flow_conditioned_) {
      const Matrix ctx = repeat_columns(*images, m);
      return cont::integrate(u, &ctx, *flow_, solver);
    }
    return cont::integrate(u, nullptr, *flow_, solver);
  }

  std::vector<std::vector<datagen::LabelMap>> to_label_maps(const Eigen::MatrixXi& classes,
                                                            int count, int m) const {
    std::vector<std::vector<datagen::LabelMap>> out(static_cast<std::size_t>(count));
    for (int b = 0; b < count; ++b) {
      for (int j = 0; j < m; ++j) {
        const Eigen::VectorXi col = classes.col(static_cast<Eigen::Index>(b) * m + j);
        out[static_cast<std::size_t>(b)].push_back(datagen::LabelMap::from_classes(
            std::span<const int>(col.data(), static_cast<std::size_t>(col.size())),
            shape_.categories, shape_.height, shape_.width));
      }
    }
    return out;
  }

 private:
  std::unique_ptr<nn::PriorNetwork> prior_;
  std::unique_ptr<nn::FlowNetwork> flow_;
  bool flow_conditioned_;
};

}  // namespace

// ---------------------------------------------------------------------------

void ObjectiveConfig::validate() const {
  if (!is_one_of(variant, {"ssn", "iaf_mc", "dual_flow", "entropy_reg", "continuous"})) {
    throw std::invalid_argument("unknown objective variant '" + variant + "'");
  }
  if (mc_samples < 1) throw std::invalid_argument("objective mc_samples must be >= 1");
  if (!(beta >= 0.0)) throw std::invalid_argument("objective beta must be >= 0");
  obj::kl_estimator_from_string(kl_estimator);
}

void RunConfig::validate() const {
  objective.validate();
  if (model == "ssn") {
    if (objective.variant != "ssn") throw std::invalid_argument("model ssn needs objective ssn");
    if (rank < 0) throw std::invalid_argument("rank must be >= 0");
  } else if (model == "flow_ssn_discrete") {
    if (!is_one_of(objective.variant, {"iaf_mc", "dual_flow", "entropy_reg"})) {
      throw std::invalid_argument("model flow_ssn_discrete needs objective iaf_mc, dual_flow or entropy_reg");
    }
    if (!is_one_of(conditioner, {"made_linear", "transformer"})) {
      throw std::invalid_argument("unknown conditioner '" + conditioner + "'");
    }
  } else if (model == "flow_ssn_continuous") {
    if (objective.variant != "continuous") {
      throw std::invalid_argument("model flow_ssn_continuous needs objective continuous");
    }
  } else {
    throw std::invalid_argument("unknown model '" + model + "'");
  }
  if (batch_size < 1 || max_steps < 0 || eval_every < 0 || eval_m < 1 || eval_images < 1 ||
      bpd_samples < 1) {
    throw std::invalid_argument("batch/step/eval sizes must be positive");
  }
  if (!(optim.lr > 0.0) || optim.warmup_steps < 0 || !(optim.ema_rate >= 0.0 && optim.ema_rate < 1.0) ||
      !(optim.clip_norm > 0.0) || !(optim.weight_decay >= 0.0)) {
    throw std::invalid_argument("invalid optimiser settings");
  }
  if (time_embedding < 2 || time_embedding % 2 != 0) {
    throw std::invalid_argument("time_embedding must be a positive even number");
  }
  solver.validate();
}

std::string RunConfig::to_json() const { return config_to_json(*this).dump(2); }

RunConfig RunConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  reject_unknown(j,
                 {"model", "dataset", "val_dataset", "objective", "optim", "batch_size",
                  "max_steps", "eval_every", "eval_m", "eval_images", "bpd_samples",
                  "conditional", "shared_samples", "rank", "fixed_variance", "conditioner",
                  "patch", "transformer_width", "transformer_blocks", "prior_width",
                  "prior_multipliers", "flow_width", "flow_multipliers", "time_embedding",
                  "flow_conditioned", "solver", "seed", "out_dir", "architecture"},
                 "run config");
  RunConfig c;
  c.model = j.value("model", c.model);
  c.dataset = j.value("dataset", c.dataset);
  c.val_dataset = j.value("val_dataset", c.val_dataset);
  if (j.contains("objective")) {
    const json& o = j["objective"];
    reject_unknown(o, {"variant", "mc_samples", "beta", "kl_estimator"}, "objective");
    c.objective.variant = o.value("variant", c.objective.variant);
    c.objective.mc_samples = o.value("mc_samples", c.objective.mc_samples);
    c.objective.beta = o.value("beta", c.objective.beta);
    c.objective.kl_estimator = o.value("kl_estimator", c.objective.kl_estimator);
  }
  if (j.contains("optim")) {
    const json& o = j["optim"];
    reject_unknown(o, {"lr", "weight_decay", "warmup_steps", "ema_rate", "clip_norm", "beta1",
                       "beta2", "eps"},
                   "optim");
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    c.optim.warmup_steps = o.value("warmup_steps", c.optim.warmup_steps);
    c.optim.ema_rate = o.value("ema_rate", c.optim.ema_rate);
    c.optim.clip_norm = o.value("clip_norm", c.optim.clip_norm);
    c.optim.beta1 = o.value("beta1", c.optim.beta1);
    c.optim.beta2 = o.value("beta2", c.optim.beta2);
    c.optim.eps = o.value("eps", c.optim.eps);
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_m = j.value("eval_m", c.eval_m);
  c.eval_images = j.value("eval_images", c.eval_images);
  c.bpd_samples = j.value("bpd_samples", c.bpd_samples);
  if (j.contains("conditional") && !j["conditional"].is_string()) {
    c.conditional = j["conditional"].get<bool>();
  } else if (j.contains("conditional") && j["conditional"].get<std::string>() != "auto") {
    throw std::invalid_argument("conditional must be true, false or \"auto\"");
  }
  c.shared_samples = j.value("shared_samples", c.shared_samples);
  c.rank = j.value("rank", c.rank);
  c.fixed_variance = j.value("fixed_variance", c.fixed_variance);
  c.conditioner = j.value("conditioner", c.conditioner);
  if (j.contains("patch")) {
    c.patch_h = j["patch"].at(0).get<int>();
    c.patch_w = j["patch"].at(1).get<int>();
  }
  c.transformer_width = j.value("transformer_width", c.transformer_width);
  c.transformer_blocks = j.value("transformer_blocks", c.transformer_blocks);
  c.prior_width = j.value("prior_width", c.prior_width);
  c.prior_multipliers = j.value("prior_multipliers", c.prior_multipliers);
  c.flow_width = j.value("flow_width", c.flow_width);
  c.flow_multipliers = j.value("flow_multipliers", c.flow_multipliers);
  c.time_embedding = j.value("time_embedding", c.time_embedding);
  c.flow_conditioned = j.value("flow_conditioned", c.flow_conditioned);
  if (j.contains("solver")) c.solver = solver_from_json(j["solver"]);
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.validate();
  return c;
}

DataShape DataShape::of(const datagen::DatasetManifest& m) {
  DataShape s;
  s.categories = m.label_shape[0];
  s.height = m.label_shape[1];
  s.width = m.label_shape[2];
  s.image_channels = m.image_shape[0];
  s.name = m.name;
  return s;
}

Batch make_batch(const datagen::Dataset& ds, const std::vector<std::size_t>& indices,
                 const std::vector<int>& annotators) {
  if (indices.size() != annotators.size()) {
    throw std::invalid_argument("make_batch: one annotator per index required");
  }
  Batch b;
  const auto e = static_cast<Eigen::Index>(ds.manifest.image_elements());
  const auto n = static_cast<Eigen::Index>(ds.manifest.label_elements());
  b.images.resize(e, static_cast<Eigen::Index>(indices.size()));
  b.labels.resize(n, static_cast<Eigen::Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    const auto img = ds.image(indices[i]);
    for (Eigen::Index r = 0; r < e; ++r) b.images(r, col) = img[static_cast<std::size_t>(r)];
    b.labels.col(col) = dist::one_hot_column(ds.label(indices[i], annotators[i]));
  }
  return b;
}

std::vector<std::vector<datagen::LabelMap>> Model::sample(const Matrix* images, int count, int m,
                                                          Rng& rng,
                                                          const cont::SolverConfig& solver) {
  const Matrix fields = sample_fields(images, count, m, rng, solver);
  const Eigen::MatrixXi classes = cont::argmax_classes(fields, shape_.categories);
  std::vector<std::vector<datagen::LabelMap>> out(static_cast<std::size_t>(count));
  for (int b = 0; b < count; ++b) {
    for (int j = 0; j < m; ++j) {
      const Eigen::VectorXi col = classes.col(static_cast<Eigen::Index>(b) * m + j);
      out[static_cast<std::size_t>(b)].push_back(datagen::LabelMap::from_classes(
          std::span<const int>(col.data(), static_cast<std::size_t>(col.size())),
          shape_.categories, shape_.height, shape_.width));
    }
  }
  return out;
}

Eigen::VectorXd Model::log_likelihood(const Matrix& labels, const Matrix* images, int m,
                                      Rng& rng) {
  if (!has_logit_samples()) {
    throw std::logic_error("model has no sample-based likelihood");
  }
  ad::NoGradGuard guard;
  const int k = shape_.categories;
  const cont::SolverConfig unused;
  if (!conditional_) {
    const Matrix eta = sample_fields(nullptr, 1, m, rng, unused);
    return obj::mc_log_likelihood_lse_shared(labels, ad::constant(eta), k).value().row(0).transpose();
  }
  const Matrix eta = sample_fields(images, static_cast<int>(labels.cols()), m, rng, unused);
  return obj::mc_log_likelihood_lse(labels, ad::constant(eta), k).value().row(0).transpose();
}

bool resolve_conditional(const RunConfig& config, const DataShape& shape) {
  return config.conditional.value_or(shape.name != "markovshapes");
}

std::unique_ptr<Model> make_model(const RunConfig& config, const DataShape& shape) {
  config.validate();
  const bool conditional = resolve_conditional(config, shape);
  if (config.model == "ssn") return std::make_unique<SsnModel>(config, shape, conditional);
  if (config.model == "flow_ssn_discrete") {
    return std::make_unique<DiscreteFlowModel>(config, shape, conditional);
  }
  return std::make_unique<ContinuousFlowModel>(config, shape, conditional);
}

Optimizer::Optimizer(nn::ParameterSet& params, const OptimConfig& config)
    : params_(params), config_(config) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_.push_back(Matrix::Zero(params_.live(i).rows(), params_.live(i).cols()));
    v_.push_back(Matrix::Zero(params_.live(i).rows(), params_.live(i).cols()));
  }
}

double Optimizer::learning_rate(std::int64_t s) const {
  if (config_.warmup_steps > 0 && s < config_.warmup_steps) {
    return config_.lr * static_cast<double>(s) / static_cast<double>(config_.warmup_steps);
  }
  return config_.lr;
}

double Optimizer::step() {
  double sq = 0.0;
  for (std::size_t i = 0; i < params_.size(); ++i) sq += matrix_sq_norm(params_.live(i).grad());
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;
  const double clip = norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
  const std::int64_t t = ++params_.step;
  const double lr = learning_rate(t);
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_.live(i);
    if (p.grad().size() == 0) continue;
    const Matrix g = p.grad() * clip;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    Matrix& w = p.mutable_value();
    w.array() -= lr * ((m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps) +
                       config_.weight_decay * w.array());
  }
  params_.ema_update(config_.ema_rate);
  return norm;
}

NonFiniteLossError::NonFiniteLossError(std::int64_t step, const std::string& dump)
    : std::runtime_error("non-finite loss at step " + std::to_string(step) + "\n" + dump),
      step_(step) {}

void write_log_csv(std::ostream& out, const std::vector<LogRow>& rows,
                   const std::string& eval_name) {
  out << "step,wallclock_s,loss,lr,grad_norm,eval_" << eval_name << '\n';
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.step << ',' << r.wallclock_s << ',' << r.loss << ',' << r.lr << ',' << r.grad_norm
        << ',';
    if (r.eval_metric) out << *r.eval_metric;
    out << '\n';
  }
}

double bits_per_dim(Model& model, const datagen::Dataset& data, int images, int m,
                    std::uint64_t seed) {
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(images), data.size());
  if (count == 0) throw std::invalid_argument("bits_per_dim: empty dataset");
  Rng rng(seed);
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  const Batch b = make_batch(data, idx, std::vector<int>(count, 0));
  double total = 0.0;
  if (model.conditional()) {
    constexpr std::size_t kChunk = 8;
    for (std::size_t s = 0; s < count; s += kChunk) {
      const std::size_t n = std::min(kChunk, count - s);
      const Matrix x = b.images.middleCols(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(n));
      const Matrix y = b.labels.middleCols(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(n));
      total += model.log_likelihood(y, &x, m, rng).sum();
    }
  } else {
    total = model.log_likelihood(b.labels, nullptr, m, rng).sum();
  }
  return obj::bits_per_dim(total / static_cast<double>(count), model.shape().pixels());
}

metrics::MetricReport evaluate(Model& model, const datagen::Dataset& data,
                               const EvalConfig& config) {
  metrics::MetricReport rep;
  rep.dataset = data.manifest.name;
  rep.seed = config.seed;
  nn::ShadowScope ema(model.params());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (!model.conditional()) {
    rep.m = config.bpd_samples;
    rep.n = 1;
    rep.ged16 = rep.ged_m = rep.diversity = rep.dice = rep.hm_iou = nan;
    if (model.has_logit_samples()) {
      rep.bpd = bits_per_dim(model, data, config.images, config.bpd_samples, config.seed);
      rep.has_bpd = true;
    }
    return rep;
  }
  rep.m = config.m;
  rep.n = data.manifest.annotators_per_image;
  const std::size_t count =
      std::min<std::size_t>(static_cast<std::size_t>(config.images), data.size());
  Rng rng(config.seed);
  double ged_small = 0.0, ged_m = 0.0, div = 0.0, dice = 0.0, hm = 0.0;
  constexpr std::size_t kChunk = 8;
  for (std::size_t s = 0; s < count; s += kChunk) {
    const std::size_t n = std::min(kChunk, count - s);
    const Matrix x = image_block(data, s, n);
    const auto samples = model.sample(&x, static_cast<int>(n), config.m, rng, config.solver);
    for (std::size_t i = 0; i < n; ++i) {
      metrics::SampleSet set;
      set.predictions = samples[i];
      for (int a = 0; a < rep.n; ++a) set.references.push_back(data.label(s + i, a));
      const metrics::GedResult g = metrics::ged_squared(set);
      ged_m += g.ged_squared;
      div += g.diversity;
      dice += metrics::mean_dice(set);
      hm += metrics::hm_iou(set);
      metrics::SampleSet head = set;
      head.predictions.resize(std::min<std::size_t>(set.predictions.size(),
                                                    static_cast<std::size_t>(config.m_small)));
      ged_small += metrics::ged_squared(head).ged_squared;
    }
  }
  const double c = static_cast<double>(count);
  rep.ged16 = ged_small / c;
  rep.ged_m = ged_m / c;
  rep.diversity = div / c;
  rep.dice = dice / c;
  rep.hm_iou = hm / c;
  return rep;
}

namespace {

std::string checkpoint_config(const RunConfig& config, const DataShape& shape) {
  return json{{"run", json::parse(config.to_json())}, {"shape", shape_to_json(shape)}}.dump();
}

std::string grad_dump(const nn::ParameterSet& ps) {
  std::ostringstream os;
  os << "gradient norms:\n";
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Matrix& g = ps.live(i).grad();
    os << "  " << ps.name(i) << ' ' << (g.size() == 0 ? 0.0 : g.norm()) << '\n';
  }
  return os.str();
}

}  // namespace

TrainResult train(Model& model, const RunConfig& config, const datagen::Dataset& train_data,
                  const datagen::Dataset* val_data) {
  config.validate();
  if (train_data.size() == 0) throw std::invalid_argument("training dataset is empty");
  namespace fs = std::filesystem;
  const bool write = !config.out_dir.empty();
  const fs::path out(config.out_dir);
  const std::string ckpt_config = checkpoint_config(config, model.shape());
  if (write) {
    fs::create_directories(out);
    std::ofstream(out / "config.json") << config.to_json() << '\n';
  }
  TrainResult result;
  result.eval_name = model.conditional() ? "ged16" : "bpd";
  nn::ParameterSet& ps = model.params();
  Optimizer opt(ps, config.optim);
  Rng noise(derive_seed(config.seed, 1));
  Rng order(derive_seed(config.seed, 2));
  std::vector<std::size_t> perm(train_data.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t cursor = perm.size();
  const int raters = train_data.manifest.annotators_per_image;
  const auto start = std::chrono::steady_clock::now();
  double best = std::numeric_limits<double>::infinity();

  auto run_eval = [&]() -> double {
    if (val_data == nullptr) return std::numeric_limits<double>::quiet_NaN();
    EvalConfig ec;
    ec.m = config.eval_m;
    ec.images = config.eval_images;
    ec.bpd_samples = config.bpd_samples;
    ec.solver = config.solver;
    ec.seed = derive_seed(config.seed, 3);
    const metrics::MetricReport r = evaluate(model, *val_data, ec);
    return model.conditional() ? r.ged16 : r.bpd;
  };

  for (int step = 1; step <= config.max_steps; ++step) {
    std::vector<std::size_t> idx;
    std::vector<int> ann;
    for (int i = 0; i < config.batch_size; ++i) {
      if (cursor == perm.size()) {
        std::shuffle(perm.begin(), perm.end(), order);
        cursor = 0;
      }
      idx.push_back(perm[cursor++]);
      ann.push_back(raters > 1 ? static_cast<int>(order() % static_cast<std::uint64_t>(raters)) : 0);
    }
    const Batch batch = make_batch(train_data, idx, ann);
    ps.zero_grad();
    const Var loss = model.loss(batch, noise);
    ad::backward(loss);
    if (!std::isfinite(loss.scalar())) throw NonFiniteLossError(step, grad_dump(ps));
    LogRow row;
    row.step = step;
    row.loss = loss.scalar();
    row.lr = opt.learning_rate(ps.step + 1);
    row.grad_norm = opt.step();
    if (!std::isfinite(row.grad_norm)) throw NonFiniteLossError(step, grad_dump(ps));
    const bool eval_now = (config.eval_every > 0 && step % config.eval_every == 0) ||
                          step == config.max_steps;
    if (eval_now && val_data != nullptr) {
      const double metric = run_eval();
      row.eval_metric = metric;
      if (metric < best) {
        best = metric;
        result.best_step = step;
        result.best_metric = metric;
        if (write) {
          nn::save_checkpoint(out / "best.ckpt", ps, ckpt_config);
          std::ofstream(out / "best.txt") << "step " << step << '\n'
                                          << result.eval_name << ' ' << std::setprecision(10)
                                          << metric << '\n';
        }
      }
    }
    row.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(row);
  }
  if (write) {
    nn::save_checkpoint(out / "final.ckpt", ps, ckpt_config);
    std::ofstream log(out / "train_log.csv");
    write_log_csv(log, result.log, result.eval_name);
  }
  return result;
}

std::unique_ptr<Model> load_model(const std::filesystem::path& checkpoint, RunConfig* config_out,
                                  DataShape* shape_out) {
  const nn::Checkpoint ck = nn::read_checkpoint(checkpoint);
  const json meta = json::parse(ck.config_json);
  if (!meta.contains("run") || !meta.contains("shape")) {
    throw std::runtime_error("checkpoint " + checkpoint.string() + " lacks an embedded run config");
  }
  const RunConfig config = RunConfig::from_json(meta["run"].dump());
  const DataShape shape = shape_from_json(meta["shape"]);
  auto model = make_model(config, shape);
  nn::load_checkpoint(ck, model->params());
  if (config_out != nullptr) *config_out = config;
  if (shape_out != nullptr) *shape_out = shape;
  return model;
}

Matrix model_label_covariance(Model& model, int draws, std::uint64_t seed) {
  if (model.conditional()) throw std::logic_error("label covariance needs an unconditional model");
  if (!model.has_logit_samples()) throw std::logic_error("label covariance needs logit samples");
  const int k = model.shape().categories;
  const Eigen::Index d = model.shape().pixels();
  Rng rng(seed);
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd bern = Eigen::VectorXd::Zero(d);
  Matrix s2 = Matrix::Zero(d, d);
  constexpr int kChunk = 2048;
  const cont::SolverConfig unused;
  for (int done = 0; done < draws;) {
    const int m = std::min(kChunk, draws - done);
    const Matrix p = dist::softmax_k(model.sample_fields(nullptr, 1, m, rng, unused), k)
                         .middleRows(d, d);
    s1 += p.rowwise().sum();
    bern += (p.array() * (1.0 - p.array())).matrix().rowwise().sum();
    s2.selfadjointView<Eigen::Lower>().rankUpdate(p);
    done += m;
  }
  s2 = s2.selfadjointView<Eigen::Lower>();
  const double n = static_cast<double>(draws);
  const Eigen::VectorXd mean = s1 / n;
  Matrix cov = s2 / n - mean * mean.transpose();
  cov.diagonal() += bern / n;
  return cov;
}

}  // namespace flowssn::train
