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

#include "flowssn/distributions.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace flowssn::dist {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

}  // namespace

Var positive_from_raw(const Var& raw) { return ad::add_scalar(ad::softplus(raw), kScaleFloor); }

DiagGaussianField DiagGaussianField::from_raw(const Var& mean, const Var& raw_scale) {
  return {mean, ad::log(positive_from_raw(raw_scale))};
}

DiagGaussianField DiagGaussianField::unit_scale(const Var& mean) {
  return {mean, ad::constant(Matrix::Zero(mean.rows(), mean.cols()))};
}

LowRankGaussianSpec LowRankGaussianSpec::from_raw(const Var& mean, const Var& raw_diag,
                                                  const Var& factors, int rank) {
  if (rank < 0 || factors.cols() != static_cast<Eigen::Index>(rank) * mean.cols() ||
      factors.rows() != mean.rows()) {
    throw std::invalid_argument("low-rank factors must be (n, rank * batch)");
  }
  return {mean, positive_from_raw(raw_diag), factors, rank};
}

Matrix LowRankGaussianSpec::covariance(Eigen::Index b) const {
  Matrix cov = diag.value().col(b).asDiagonal();
  if (rank > 0) {
    const auto p = factors.value().middleCols(b * rank, rank);
    cov.noalias() += p * p.transpose();
  }
  return cov;
}

Matrix softmax_k(const Matrix& logits, int k) {
  ad::NoGradGuard guard;
  return ad::softmax_blocks(ad::constant(logits), k).value();
}

Matrix one_hot_column(const datagen::LabelMap& y) {
  Matrix col(static_cast<Eigen::Index>(y.values.size()), 1);
  for (std::size_t i = 0; i < y.values.size(); ++i) {
    col(static_cast<Eigen::Index>(i), 0) = y.values[i];
  }
  return col;
}

Matrix one_hot_columns(std::span<const datagen::LabelMap> ys) {
  if (ys.empty()) return Matrix();
  Matrix out(static_cast<Eigen::Index>(ys.front().values.size()),
             static_cast<Eigen::Index>(ys.size()));
  for (std::size_t b = 0; b < ys.size(); ++b) {
    if (ys[b].values.size() != ys.front().values.size()) {
      throw std::invalid_argument("label maps have differing shapes");
    }
    out.col(static_cast<Eigen::Index>(b)) = one_hot_column(ys[b]);
  }
  return out;
}

Var categorical_log_likelihood(const Matrix& y, const Var& logits, int k) {
  if (y.rows() != logits.rows() || y.cols() != logits.cols()) {
    throw std::invalid_argument("categorical_log_likelihood: label and logit shapes differ");
  }
  return ad::sum_rows(ad::cmul(ad::constant(y), ad::log_softmax_blocks(logits, k)));
}

double categorical_log_likelihood(const datagen::LabelMap& y, const Matrix& logits) {
  ad::NoGradGuard guard;
  return categorical_log_likelihood(one_hot_column(y), ad::constant(logits), y.k).scalar();
}

Var categorical_log_likelihood_pairs(const Matrix& y, const Var& logits, int k) {
  if (y.rows() != logits.rows()) {
    throw std::invalid_argument("categorical_log_likelihood_pairs: label and logit sizes differ");
  }
  return ad::matmul(ad::constant(y.transpose()), ad::log_softmax_blocks(logits, k));
}

Var diag_sample_with_noise(const DiagGaussianField& field, const Matrix& noise) {
  const Eigen::Index n = field.dims();
  const Eigen::Index b = field.batch();
  if (noise.rows() != n || b == 0 || noise.cols() % b != 0) {
    throw std::invalid_argument("diag_sample: noise shape does not match field");
  }
  const int m = static_cast<int>(noise.cols() / b);
  const Var mean = ad::repeat_cols(field.mean, m);
  const Var scale = ad::exp(ad::repeat_cols(field.log_scale, m));
  return ad::add(mean, ad::cmul(scale, ad::constant(noise)));
}

DiagSample diag_sample(const DiagGaussianField& field, Rng& rng, int samples) {
  if (samples < 1) throw std::invalid_argument("diag_sample: need at least one sample");
  DiagSample out;
  out.noise = standard_normal(field.dims(), field.batch() * samples, rng);
  out.u = diag_sample_with_noise(field, out.noise);
  return out;
}

Var diag_log_prob(const DiagGaussianField& field, const Var& u) {
  const Eigen::Index b = field.batch();
  if (u.rows() != field.dims() || u.cols() % b != 0) {
    throw std::invalid_argument("diag_log_prob: sample shape does not match field");
  }
  const int m = static_cast<int>(u.cols() / b);
  const Var log_scale = ad::repeat_cols(field.log_scale, m);
  const Var z = ad::cmul(ad::sub(u, ad::repeat_cols(field.mean, m)), ad::exp(ad::neg(log_scale)));
  const double n = static_cast<double>(field.dims());
  Var quad = ad::scale(ad::sum_rows(ad::square(z)), -0.5);
  return ad::add_scalar(ad::sub(quad, ad::sum_rows(log_scale)), -0.5 * n * kLog2Pi);
}

Var diag_entropy(const DiagGaussianField& field) {
  const double n = static_cast<double>(field.dims());
  return ad::add_scalar(ad::sum_rows(field.log_scale), 0.5 * n * (kLog2Pi + 1.0));
}

Var lowrank_sample_with_noise(const LowRankGaussianSpec& spec, const Matrix& eps_diag,
                              const Matrix& eps_factor) {
  const Eigen::Index n = spec.dims();
  const Eigen::Index b = spec.batch();
  if (eps_diag.rows() != n || eps_diag.cols() % b != 0) {
    throw std::invalid_argument("lowrank_sample: diagonal noise shape mismatch");
  }
  const int m = static_cast<int>(eps_diag.cols() / b);
  Var out = ad::add(ad::repeat_cols(spec.mean, m),
                    ad::cmul(ad::repeat_cols(ad::exp(ad::scale(ad::log(spec.diag), 0.5)), m),
                             ad::constant(eps_diag)));
  if (spec.rank > 0) {
    if (eps_factor.rows() != spec.rank || eps_factor.cols() != eps_diag.cols()) {
      throw std::invalid_argument("lowrank_sample: factor noise shape mismatch");
    }
    std::vector<Var> parts;
    parts.reserve(static_cast<std::size_t>(b));
    for (Eigen::Index i = 0; i < b; ++i) {
      parts.push_back(ad::matmul(ad::slice_cols(spec.factors, i * spec.rank, spec.rank),
                                 ad::constant(eps_factor.middleCols(i * m, m))));
    }
    out = ad::add(out, b == 1 ? parts.front() : ad::concat_cols(parts));
  }
  return out;
}

Var lowrank_sample(const LowRankGaussianSpec& spec, Rng& rng, int samples) {
  if (samples < 1) throw std::invalid_argument("lowrank_sample: need at least one sample");
  const Eigen::Index cols = spec.batch() * samples;
  Matrix eps_diag = standard_normal(spec.dims(), cols, rng);
  Matrix eps_factor = standard_normal(spec.rank, cols, rng);
  return lowrank_sample_with_noise(spec, eps_diag, eps_factor);
}

}  // namespace flowssn::dist
