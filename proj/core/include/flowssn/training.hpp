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

// Models, optimisation loop, evaluation and run configuration.

#pragma once

#include "flowssn/datagen.hpp"
#include "flowssn/flows_continuous.hpp"
#include "flowssn/flows_discrete.hpp"
#include "flowssn/metrics.hpp"
#include "flowssn/networks.hpp"
#include "flowssn/objectives.hpp"
#include "flowssn/random.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowssn::train {

using ad::Matrix;
using ad::Var;

struct ObjectiveConfig {
  /// ssn | iaf_mc | dual_flow | entropy_reg | continuous
  std::string variant = "ssn";
  int mc_samples = 16;
  double beta = 0.0;
  std::string kl_estimator = "low_variance";

  void validate() const;
};

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  int warmup_steps = 0;
  double ema_rate = 0.999;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct RunConfig {
  /// ssn | flow_ssn_discrete | flow_ssn_continuous
  std::string model = "ssn";
  std::string dataset;
  std::string val_dataset;
  ObjectiveConfig objective;
  OptimConfig optim;
  int batch_size = 32;
  int max_steps = 5000;
  int eval_every = 0;  // 0 evaluates only at the end
  int eval_m = 16;
  int eval_images = 32;
  int bpd_samples = 512;
  /// Unset means: unconditional for MarkovShapes, conditional otherwise.
  std::optional<bool> conditional;
  /// Unconditional training draws one set of M samples shared by the whole batch.
  bool shared_samples = true;

  int rank = 2;  // SSN covariance rank
  bool fixed_variance = false;

  std::string conditioner = "made_linear";  // made_linear | transformer
  int patch_h = 2;
  int patch_w = 2;
  int transformer_width = 32;
  int transformer_blocks = 1;

  int prior_width = 16;
  std::vector<int> prior_multipliers{1, 2, 2};
  int flow_width = 8;
  std::vector<int> flow_multipliers{1, 1};
  int time_embedding = 16;
  bool flow_conditioned = false;

  cont::SolverConfig solver;
  std::uint64_t seed = 0;
  std::string out_dir;

  void validate() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
};

/// Shapes a model needs from a dataset.
struct DataShape {
  int categories = 2;
  int height = 16;
  int width = 16;
  int image_channels = 1;
  std::string name;
  static DataShape of(const datagen::DatasetManifest& m);
  int pixels() const { return height * width; }
  int dims() const { return categories * pixels(); }
};

struct Batch {
  Matrix images;  // (c*h*w, B), empty for unconditional models
  Matrix labels;  // (k*d, B) one-hot
};

/// Builds a batch from dataset indices; annotator picks the label map of each image.
Batch make_batch(const datagen::Dataset& ds, const std::vector<std::size_t>& indices,
                 const std::vector<int>& annotators);

class Model {
 public:
  virtual ~Model() = default;
  nn::ParameterSet& params() { return params_; }
  const DataShape& shape() const { return shape_; }
  bool conditional() const { return conditional_; }

  /// Scalar training loss (to be minimised).
  virtual Var loss(const Batch& batch, Rng& rng) = 0;
  /// M label maps per image, per-pixel argmax readout. images is (c*h*w, B) or
  /// nullptr for unconditional models (then count fields are drawn).
  virtual std::vector<std::vector<datagen::LabelMap>> sample(const Matrix* images, int count,
                                                             int m, Rng& rng,
                                                             const cont::SolverConfig& solver);
  /// Sample logits / final fields (k*d, count*M) before the argmax readout.
  virtual Matrix sample_fields(const Matrix* images, int count, int m, Rng& rng,
                               const cont::SolverConfig& solver) = 0;
  /// Whether sample_fields returns logits whose softmax defines p(y | eta).
  virtual bool has_logit_samples() const { return true; }
  /// LSE estimate of log p(y_b) per label column using M latent draws; (B).
  /// Throws std::logic_error for models without a sample-based likelihood.
  virtual Eigen::VectorXd log_likelihood(const Matrix& labels, const Matrix* images, int m,
                                         Rng& rng);

 protected:
  Model(const DataShape& shape, bool conditional) : shape_(shape), conditional_(conditional) {}
  nn::ParameterSet params_;
  DataShape shape_;
  bool conditional_;
};

std::unique_ptr<Model> make_model(const RunConfig& config, const DataShape& shape);
bool resolve_conditional(const RunConfig& config, const DataShape& shape);

/// AdamW with linear warmup, global-norm clipping and EMA of the parameters.
class Optimizer {
 public:
  Optimizer(nn::ParameterSet& params, const OptimConfig& config);
  /// Step size used by update number s (1-based): base * s / warmup while s < warmup.
  double learning_rate(std::int64_t s) const;
  /// Applies one update from the accumulated gradients; returns the pre-clip norm.
  double step();

 private:
  nn::ParameterSet& params_;
  OptimConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::int64_t step, const std::string& dump);
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct LogRow {
  std::int64_t step = 0;
  double wallclock_s = 0.0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::optional<double> eval_metric;
};

void write_log_csv(std::ostream& out, const std::vector<LogRow>& rows,
                   const std::string& eval_name);

struct EvalConfig {
  int m = 16;
  int m_small = 16;
  int images = 32;
  int bpd_samples = 512;
  std::uint64_t seed = 1234;
  cont::SolverConfig solver;
};

/// Evaluates with the EMA parameters. Unconditional datasets report BPD (GED fields NaN).
metrics::MetricReport evaluate(Model& model, const datagen::Dataset& data,
                               const EvalConfig& config);

/// BPD of labels under the model, LSE estimate with M draws (EMA weights not swapped in).
double bits_per_dim(Model& model, const datagen::Dataset& data, int images, int m,
                    std::uint64_t seed);

struct TrainResult {
  std::vector<LogRow> log;
  std::int64_t best_step = -1;
  double best_metric = 0.0;
  std::string eval_name;
};

/// Runs the optimisation loop. When config.out_dir is set, writes config.json,
/// train_log.csv, final.ckpt, best.ckpt and best.txt there.
TrainResult train(Model& model, const RunConfig& config, const datagen::Dataset& train_data,
                  const datagen::Dataset* val_data);

/// Reconstructs a model from a checkpoint (config embedded) and loads its weights.
std::unique_ptr<Model> load_model(const std::filesystem::path& checkpoint, RunConfig* config_out,
                                  DataShape* shape_out = nullptr);

/// Covariance over the binary foreground channel of the model's label distribution,
/// Cov(softmax(eta)_1) + diag(E[p(1-p)]), from N latent draws (unconditional models).
Matrix model_label_covariance(Model& model, int draws, std::uint64_t seed);

}  // namespace flowssn::train
