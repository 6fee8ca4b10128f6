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

#include "flowssn/flows_discrete.hpp"

#include <cmath>
#include <stdexcept>

namespace flowssn::flows {

std::vector<std::vector<Eigen::Index>> Conditioner::groups() const {
  std::vector<std::vector<Eigen::Index>> g(static_cast<std::size_t>(dims()));
  for (Eigen::Index i = 0; i < dims(); ++i) g[static_cast<std::size_t>(i)] = {i};
  return g;
}

LinearConditioner::LinearConditioner(Matrix weight, Eigen::VectorXd bias,
                                     Eigen::VectorXd log_scale)
    : weight_(std::move(weight)), bias_(std::move(bias)), log_scale_(std::move(log_scale)) {
  const Eigen::Index n = bias_.size();
  if (weight_.rows() != n || weight_.cols() != n || log_scale_.size() != n) {
    throw std::invalid_argument("LinearConditioner: inconsistent sizes");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      if (weight_(i, j) != 0.0) {
        throw std::invalid_argument("LinearConditioner: weight must be strictly lower triangular");
      }
    }
  }
}

std::shared_ptr<LinearConditioner> LinearConditioner::constant(Eigen::Index n, double shift_value,
                                                               double log_scale_value) {
  return std::make_shared<LinearConditioner>(Matrix::Zero(n, n),
                                             Eigen::VectorXd::Constant(n, shift_value),
                                             Eigen::VectorXd::Constant(n, log_scale_value));
}

AffineParams LinearConditioner::forward(const Var& input, const Var*) const {
  if (input.rows() != dims()) {
    throw std::invalid_argument("LinearConditioner: input has wrong dimension");
  }
  Var shift = ad::add_col_broadcast(ad::matmul(ad::constant(weight_), input), ad::constant(bias_));
  Var log_scale = ad::constant(log_scale_.replicate(1, input.cols()));
  return {shift, log_scale};
}

AffineParams AutoregressiveTransform::params(const Var& input, const Var* context) const {
  AffineParams p = conditioner->forward(input, context);
  p.log_scale = ad::clamp(p.log_scale, -kLogScaleClamp, kLogScaleClamp);
  return p;
}

CachedFlowSample iaf_forward(const Var& u, const Var* context, const AutoregressiveTransform& t) {
  if (t.direction != Direction::kIAF) {
    throw std::invalid_argument("iaf_forward: transform is not IAF-direction");
  }
  CachedFlowSample out;
  out.u = u;
  AffineParams p = t.params(u, context);
  out.shift = p.shift;
  out.log_scale = p.log_scale;
  out.eta = ad::add(p.shift, ad::cmul(ad::exp(p.log_scale), u));
  out.log_det = ad::sum_rows(p.log_scale);
  return out;
}

Matrix iaf_inverse(const Matrix& eta, const Matrix* context, const AutoregressiveTransform& t) {
  ad::NoGradGuard guard;
  Matrix u = Matrix::Zero(eta.rows(), eta.cols());
  const Var ctx = context != nullptr ? ad::constant(*context) : Var();
  for (const auto& group : t.conditioner->groups()) {
    const AffineParams p = t.params(ad::constant(u), context != nullptr ? &ctx : nullptr);
    for (Eigen::Index i : group) {
      u.row(i) = (eta.row(i) - p.shift.value().row(i))
                     .cwiseProduct((-p.log_scale.value().row(i)).array().exp().matrix());
    }
  }
  return u;
}

Var self_score(const CachedFlowSample& sample, const dist::DiagGaussianField& base) {
  return ad::sub(dist::diag_log_prob(base, sample.u), sample.log_det);
}

Matrix iaf_log_prob(const Matrix& eta, const Matrix* context, const AutoregressiveTransform& t,
                    const dist::DiagGaussianField& base) {
  ad::NoGradGuard guard;
  const Matrix u = iaf_inverse(eta, context, t);
  const Var ctx = context != nullptr ? ad::constant(*context) : Var();
  const AffineParams p = t.params(ad::constant(u), context != nullptr ? &ctx : nullptr);
  return (dist::diag_log_prob(base, ad::constant(u)).value() -
          p.log_scale.value().colwise().sum());
}

Var maf_log_prob(const Var& eta, const Var* context, const AutoregressiveTransform& t,
                 const dist::DiagGaussianField& base) {
  if (t.direction != Direction::kMAF) {
    throw std::invalid_argument("maf_log_prob: transform is not MAF-direction");
  }
  const AffineParams p = t.params(eta, context);
  const Var u = ad::cmul(ad::sub(eta, p.shift), ad::exp(ad::neg(p.log_scale)));
  return ad::sub(dist::diag_log_prob(base, u), ad::sum_rows(p.log_scale));
}

Matrix maf_sample(const Matrix& u, const Matrix* context, const AutoregressiveTransform& t) {
  if (t.direction != Direction::kMAF) {
    throw std::invalid_argument("maf_sample: transform is not MAF-direction");
  }
  ad::NoGradGuard guard;
  Matrix eta = Matrix::Zero(u.rows(), u.cols());
  const Var ctx = context != nullptr ? ad::constant(*context) : Var();
  for (const auto& group : t.conditioner->groups()) {
    const AffineParams p = t.params(ad::constant(eta), context != nullptr ? &ctx : nullptr);
    for (Eigen::Index i : group) {
      eta.row(i) = p.shift.value().row(i) +
                   p.log_scale.value().row(i).array().exp().matrix().cwiseProduct(u.row(i));
    }
  }
  return eta;
}

AutoregressiveTransform linear_ar_from_cholesky(const Matrix& lower, const Eigen::VectorXd& mean,
                                                Direction direction) {
  const Eigen::Index n = lower.rows();
  if (lower.cols() != n || mean.size() != n) {
    throw std::invalid_argument("linear_ar_from_cholesky: L must be square and match mean");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(lower(i, i) > 0.0)) {
      throw std::invalid_argument("linear_ar_from_cholesky: diagonal entry " + std::to_string(i) +
                                  " is not positive");
    }
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (lower(i, j) != 0.0) {
        throw std::invalid_argument("linear_ar_from_cholesky: L is not lower triangular");
      }
    }
  }
  const Eigen::VectorXd diag = lower.diagonal();
  const Eigen::VectorXd log_scale = diag.array().log().matrix();
  AutoregressiveTransform t;
  t.direction = direction;
  if (direction == Direction::kIAF) {
    Matrix weight = lower.triangularView<Eigen::StrictlyLower>();
    t.conditioner = std::make_shared<LinearConditioner>(std::move(weight), mean, log_scale);
  } else {
    // eta - mean = (I - A)^{-1} diag(L) u with A = I - diag(L) L^{-1}.
    const Matrix linv = lower.triangularView<Eigen::Lower>().solve(Matrix::Identity(n, n));
    Matrix a = Matrix::Identity(n, n) - diag.asDiagonal() * linv;
    a = a.triangularView<Eigen::StrictlyLower>();
    const Eigen::VectorXd bias = mean - a * mean;
    t.conditioner = std::make_shared<LinearConditioner>(std::move(a), bias, log_scale);
  }
  return t;
}

Var iaf_entropy_from_cache(const dist::DiagGaussianField& base, const CachedFlowSample& cached) {
  const Eigen::Index b = base.batch();
  const Eigen::Index s = cached.log_det.cols();
  if (b == 0 || s % b != 0) {
    throw std::invalid_argument("iaf_entropy: sample count is not a multiple of the batch");
  }
  const Eigen::Index m = s / b;
  Matrix avg = Matrix::Zero(s, b);
  for (Eigen::Index i = 0; i < b; ++i) avg.block(i * m, i, m, 1).setConstant(1.0 / m);
  return ad::add(dist::diag_entropy(base), ad::matmul(cached.log_det, ad::constant(avg)));
}

Var iaf_entropy_estimate(const dist::DiagGaussianField& base, const AutoregressiveTransform& t,
                         Rng& rng, int samples, const Var* context) {
  const dist::DiagSample draw = dist::diag_sample(base, rng, samples);
  return iaf_entropy_from_cache(base, iaf_forward(draw.u, context, t));
}

void PatchShape::validate() const {
  if (k < 1 || height < 1 || width < 1 || patch_h < 1 || patch_w < 1) {
    throw std::invalid_argument("patch shape entries must be positive");
  }
  if (height % patch_h != 0 || width % patch_w != 0) {
    throw std::invalid_argument("field " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by patch " + std::to_string(patch_h) + "x" +
                                std::to_string(patch_w));
  }
}

Eigen::Index PatchShape::field_index(int token, int feature) const {
  const int tw = width / patch_w;
  const int ty = token / tw;
  const int tx = token % tw;
  const int per = patch_h * patch_w;
  const int c = feature / per;
  const int py = (feature % per) / patch_w;
  const int px = feature % patch_w;
  const int y = ty * patch_h + py;
  const int x = tx * patch_w + px;
  return (static_cast<Eigen::Index>(c) * height + y) * width + x;
}

Matrix patchify(const Eigen::VectorXd& field, const PatchShape& shape) {
  shape.validate();
  if (field.size() != static_cast<Eigen::Index>(shape.k) * shape.height * shape.width) {
    throw std::invalid_argument("patchify: field length does not match shape");
  }
  Matrix tokens(shape.token_dims(), shape.tokens());
  for (int t = 0; t < shape.tokens(); ++t) {
    for (int f = 0; f < shape.token_dims(); ++f) tokens(f, t) = field(shape.field_index(t, f));
  }
  return tokens;
}

Eigen::VectorXd unpatchify(const Matrix& tokens, const PatchShape& shape) {
  shape.validate();
  if (tokens.rows() != shape.token_dims() || tokens.cols() != shape.tokens()) {
    throw std::invalid_argument("unpatchify: token matrix does not match shape");
  }
  Eigen::VectorXd field(static_cast<Eigen::Index>(shape.k) * shape.height * shape.width);
  for (int t = 0; t < shape.tokens(); ++t) {
    for (int f = 0; f < shape.token_dims(); ++f) field(shape.field_index(t, f)) = tokens(f, t);
  }
  return field;
}

}  // namespace flowssn::flows
