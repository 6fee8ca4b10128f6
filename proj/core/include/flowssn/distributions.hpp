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

// Probability primitives over logit space. Logit fields are column vectors of
// length k*d laid out category-major (row c*d + j is category c at pixel j); a
// batch of fields is a (k*d, B) matrix.

#pragma once

#include "flowssn/autodiff.hpp"
#include "flowssn/datagen.hpp"
#include "flowssn/random.hpp"

#include <span>

namespace flowssn::dist {

using ad::Matrix;
using ad::Var;

/// Lower bound applied to every softplus-produced scale and variance.
inline constexpr double kScaleFloor = 1e-5;

/// softplus(raw) + kScaleFloor.
Var positive_from_raw(const Var& raw);

/// Pixel-wise independent Gaussian over logits, one field per column.
struct DiagGaussianField {
  Var mean;       // (n, B)
  Var log_scale;  // (n, B)

  Eigen::Index dims() const { return mean.rows(); }
  Eigen::Index batch() const { return mean.cols(); }

  /// scale = softplus(raw_scale) + floor.
  static DiagGaussianField from_raw(const Var& mean, const Var& raw_scale);
  /// Scale frozen at 1.
  static DiagGaussianField unit_scale(const Var& mean);
};

/// Low-rank-plus-diagonal Gaussian N(mean, D + P P^T) per column.
struct LowRankGaussianSpec {
  Var mean;     // (n, B)
  Var diag;     // (n, B), the variances D, floored
  Var factors;  // (n, r*B); columns [b*r, (b+1)*r) hold P for field b
  int rank = 0;

  Eigen::Index dims() const { return mean.rows(); }
  Eigen::Index batch() const { return mean.cols(); }

  /// Builds the spec with D = softplus(raw_diag) + floor.
  static LowRankGaussianSpec from_raw(const Var& mean, const Var& raw_diag, const Var& factors,
                                      int rank);
  /// Dense covariance D + P P^T of field b.
  Matrix covariance(Eigen::Index b = 0) const;
};

/// Row-wise softmax over categories for each pixel column.
Matrix softmax_k(const Matrix& logits, int k);

/// One-hot label map as a (k*d, 1) column.
Matrix one_hot_column(const datagen::LabelMap& y);
/// Stacks label maps as columns.
Matrix one_hot_columns(std::span<const datagen::LabelMap> ys);

/// sum_ij y_ij log softmax(eta_{:, j})_i for each column pair. y and logits must
/// have equal shapes; returns (1, S).
Var categorical_log_likelihood(const Matrix& y, const Var& logits, int k);
/// Scalar convenience overload.
double categorical_log_likelihood(const datagen::LabelMap& y, const Matrix& logits);
/// All pairs: entry (b, s) is log p(y_b | eta_s). y is (n, B), logits (n, S).
Var categorical_log_likelihood_pairs(const Matrix& y, const Var& logits, int k);

struct DiagSample {
  Var u;         // (n, B*M), column b*M + m
  Matrix noise;  // standard normal draws with the same layout
};

/// Reparameterised draws mean + scale * eps, M per field.
DiagSample diag_sample(const DiagGaussianField& field, Rng& rng, int samples);
/// Same, with caller-provided standard normal noise of shape (n, B*M).
Var diag_sample_with_noise(const DiagGaussianField& field, const Matrix& noise);
/// Log density of u (n, B*M) under the field, M columns per field; returns (1, B*M).
Var diag_log_prob(const DiagGaussianField& field, const Var& u);
/// 0.5 * sum_i log(2 pi e sigma_i^2) per field; returns (1, B).
Var diag_entropy(const DiagGaussianField& field);

/// mean + sqrt(D) * eps1 + P eps2 with eps1 ~ N(0, I_n), eps2 ~ N(0, I_r); M per field.
Var lowrank_sample(const LowRankGaussianSpec& spec, Rng& rng, int samples);
Var lowrank_sample_with_noise(const LowRankGaussianSpec& spec, const Matrix& eps_diag,
                              const Matrix& eps_factor);

}  // namespace flowssn::dist
