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

// Affine autoregressive flows over logit space.
//
// Both directions share one parameterisation: a conditioner maps an input field
// to a per-dimension shift and log-scale, where outputs for a dimension only see
// input dimensions in earlier autoregressive groups.
//
//   IAF:  eta_i = shift_i(u_<i)   + exp(s_i(u_<i))   * u_i   (parallel sampling)
//   MAF:  eta_i = shift_i(eta_<i) + exp(s_i(eta_<i)) * u_i   (parallel scoring)

#pragma once

#include "flowssn/autodiff.hpp"
#include "flowssn/distributions.hpp"
#include "flowssn/random.hpp"

#include <memory>
#include <vector>

namespace flowssn::flows {

using ad::Matrix;
using ad::Var;

/// Log-scales are clamped to this range before exponentiation.
inline constexpr double kLogScaleClamp = 7.0;

struct AffineParams {
  Var shift;      // (n, S)
  Var log_scale;  // (n, S)
};

class Conditioner {
 public:
  virtual ~Conditioner() = default;
  /// input is (n, S); context, when present, has one column per input column.
  virtual AffineParams forward(const Var& input, const Var* context) const = 0;
  virtual Eigen::Index dims() const = 0;
  /// Autoregressive groups in order; outputs of a group depend only on inputs of
  /// earlier groups. Defaults to one group per dimension in index order.
  virtual std::vector<std::vector<Eigen::Index>> groups() const;
};

/// shift = A x + c, log_scale = s, with A strictly lower triangular and fixed.
class LinearConditioner final : public Conditioner {
 public:
  LinearConditioner(Matrix weight, Eigen::VectorXd bias, Eigen::VectorXd log_scale);
  AffineParams forward(const Var& input, const Var* context) const override;
  Eigen::Index dims() const override { return bias_.size(); }

  /// mu = shift_value, s = log_scale_value everywhere, no dependence on the input.
  static std::shared_ptr<LinearConditioner> constant(Eigen::Index n, double shift_value,
                                                     double log_scale_value);

 private:
  Matrix weight_;
  Eigen::VectorXd bias_;
  Eigen::VectorXd log_scale_;
};

enum class Direction { kIAF, kMAF };

struct AutoregressiveTransform {
  std::shared_ptr<const Conditioner> conditioner;
  Direction direction = Direction::kIAF;

  Eigen::Index dims() const { return conditioner->dims(); }
  /// Conditioner pass with clamped log-scales.
  AffineParams params(const Var& input, const Var* context) const;
};

struct CachedFlowSample {
  Var eta;        // (n, S)
  Var u;          // (n, S)
  Var shift;      // (n, S)
  Var log_scale;  // (n, S), clamped
  Var log_det;    // (1, S), sum_i log_scale_i = log|det d eta / d u|
};

/// One parallel pass of an IAF-direction transform.
CachedFlowSample iaf_forward(const Var& u, const Var* context, const AutoregressiveTransform& t);

/// Sequential inverse of iaf_forward (one conditioner pass per group).
Matrix iaf_inverse(const Matrix& eta, const Matrix* context, const AutoregressiveTransform& t);

/// log p_base(u) - sum_i s_i from the cached quantities of iaf_forward; (1, S).
Var self_score(const CachedFlowSample& sample, const dist::DiagGaussianField& base);

/// Scores arbitrary eta under an IAF-direction transform via iaf_inverse (no gradient).
Matrix iaf_log_prob(const Matrix& eta, const Matrix* context, const AutoregressiveTransform& t,
                    const dist::DiagGaussianField& base);

/// Parallel scoring under a MAF-direction transform: u = (eta - shift(eta)) * exp(-s(eta)),
/// log p = log p_base(u) - sum_i s_i; (1, S).
Var maf_log_prob(const Var& eta, const Var* context, const AutoregressiveTransform& t,
                 const dist::DiagGaussianField& base);

/// Sequential sampling of a MAF-direction transform from base noise u.
Matrix maf_sample(const Matrix& u, const Matrix* context, const AutoregressiveTransform& t);

/// Linear autoregressive transform whose pushforward of N(0, I) is N(mean, L L^T).
/// L must be lower triangular with positive diagonal.
AutoregressiveTransform linear_ar_from_cholesky(const Matrix& lower, const Eigen::VectorXd& mean,
                                                Direction direction = Direction::kIAF);

/// H(base) + mean over M draws of sum_i s_i(u), per base field; returns (1, B).
Var iaf_entropy_estimate(const dist::DiagGaussianField& base, const AutoregressiveTransform& t,
                         Rng& rng, int samples, const Var* context = nullptr);
/// Same with the base draws supplied (u laid out as in diag_sample).
Var iaf_entropy_from_cache(const dist::DiagGaussianField& base, const CachedFlowSample& cached);

/// Patch grid of a (k, h, w) field.
struct PatchShape {
  int k = 2;
  int height = 0;
  int width = 0;
  int patch_h = 1;
  int patch_w = 1;

  int tokens() const { return (height / patch_h) * (width / patch_w); }
  int token_dims() const { return k * patch_h * patch_w; }
  /// Throws std::invalid_argument unless the patch tiles the field.
  void validate() const;
  /// Source index in the (k*h*w) field for token t, feature f (f = c*ph*pw + py*pw + px).
  Eigen::Index field_index(int token, int feature) const;
};

/// (k*h*w) column -> (token_dims, tokens), tokens in raster order.
Matrix patchify(const Eigen::VectorXd& field, const PatchShape& shape);
Eigen::VectorXd unpatchify(const Matrix& tokens, const PatchShape& shape);

}  // namespace flowssn::flows
