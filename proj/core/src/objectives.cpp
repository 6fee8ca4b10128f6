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

#include "flowssn/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace flowssn::obj {

Var lse_over_samples(const Var& loglik) {
  const double log_m = std::log(static_cast<double>(loglik.cols()));
  return ad::add_scalar(ad::transpose(ad::logsumexp_cols(loglik)), -log_m);
}

namespace {

// (1, B*M) grouped per field -> (B, M).
Var per_field_table(const Var& ll, Eigen::Index batch) {
  const Eigen::Index s = ll.cols();
  if (batch < 1 || s % batch != 0) {
    throw std::invalid_argument("sample count is not a multiple of the batch");
  }
  const Eigen::Index m = s / batch;
  auto index = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(s));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index j = 0; j < m; ++j) {
      (*index)[static_cast<std::size_t>(j * batch + b)] = b * m + j;
    }
  }
  return ad::gather(ll, index, batch, m);
}

}  // namespace

Var mc_log_likelihood_lse(const Matrix& y, const Var& logits, int k) {
  const Eigen::Index batch = y.cols();
  if (batch < 1 || logits.cols() % batch != 0) {
    throw std::invalid_argument("mc_log_likelihood_lse: logits are not M samples per label");
  }
  const int m = static_cast<int>(logits.cols() / batch);
  Matrix yr(y.rows(), logits.cols());
  for (Eigen::Index b = 0; b < batch; ++b) yr.middleCols(b * m, m) = y.col(b).replicate(1, m);
  const Var ll = dist::categorical_log_likelihood(yr, logits, k);
  return lse_over_samples(per_field_table(ll, batch));
}

Var mc_log_likelihood_lse_shared(const Matrix& y, const Var& logits, int k) {
  return lse_over_samples(dist::categorical_log_likelihood_pairs(y, logits, k));
}

Var mean_log_likelihood(const Matrix& y, const Var& logits, int k) {
  const Eigen::Index batch = y.cols();
  if (batch < 1 || logits.cols() % batch != 0) {
    throw std::invalid_argument("mean_log_likelihood: logits are not M samples per label");
  }
  const int m = static_cast<int>(logits.cols() / batch);
  Matrix yr(y.rows(), logits.cols());
  for (Eigen::Index b = 0; b < batch; ++b) yr.middleCols(b * m, m) = y.col(b).replicate(1, m);
  return ad::mean(dist::categorical_log_likelihood(yr, logits, k));
}

KlEstimator kl_estimator_from_string(const std::string& name) {
  if (name == "naive") return KlEstimator::kNaive;
  if (name == "low_variance") return KlEstimator::kLowVariance;
  if (name == "reciprocal") return KlEstimator::kReciprocal;
  throw std::invalid_argument("unknown KL estimator '" + name +
                              "' (expected naive, low_variance or reciprocal)");
}

std::string to_string(KlEstimator e) {
  switch (e) {
    case KlEstimator::kNaive:
      return "naive";
    case KlEstimator::kLowVariance:
      return "low_variance";
    case KlEstimator::kReciprocal:
      return "reciprocal";
  }
  return "unknown";
}

Var kl_estimate(const Var& iaf_scores, const Var& maf_scores, KlEstimator estimator) {
  if (iaf_scores.rows() != maf_scores.rows() || iaf_scores.cols() != maf_scores.cols()) {
    throw std::invalid_argument("kl_estimate: score shapes differ");
  }
  const Var r = ad::sub(iaf_scores, maf_scores);
  switch (estimator) {
    case KlEstimator::kNaive:
      return ad::mean(r);
    case KlEstimator::kLowVariance:
      return ad::mean(ad::sub(ad::expm1(r), r));
    case KlEstimator::kReciprocal:
      return ad::mean(ad::add(ad::expm1(ad::neg(r)), r));
  }
  throw std::invalid_argument("kl_estimate: unknown estimator");
}

DualFlowTerms dual_flow_elbo(const Matrix& y, const flows::CachedFlowSample& iaf,
                             const dist::DiagGaussianField& iaf_base,
                             const flows::AutoregressiveTransform& maf,
                             const dist::DiagGaussianField& maf_base, const Var* maf_context,
                             int k, KlEstimator estimator) {
  DualFlowTerms out;
  out.log_likelihood = mean_log_likelihood(y, iaf.eta, k);
  const Var self = flows::self_score(iaf, iaf_base);
  const Var cross = flows::maf_log_prob(iaf.eta, maf_context, maf, maf_base);
  out.kl = kl_estimate(self, cross, estimator);
  out.elbo = ad::sub(out.log_likelihood, out.kl);
  return out;
}

Var entropy_regularised_objective(const Matrix& y, const flows::CachedFlowSample& iaf,
                                  const dist::DiagGaussianField& base, int k, double beta) {
  if (!(beta >= 0.0)) throw std::invalid_argument("entropy weight beta must be >= 0");
  const Var ll = mean_log_likelihood(y, iaf.eta, k);
  if (beta == 0.0) return ll;
  return ad::add(ll, ad::scale(ad::mean(flows::iaf_entropy_from_cache(base, iaf)), beta));
}

Var continuous_loss(const Matrix& y, const Var* context, const Var& u, const Eigen::VectorXd& t,
                    const cont::LogitNetwork& net) {
  const cont::PathPoint p = cont::interpolate(u, y, t);
  const Var logits = net.logits(p.y_t, p.t, context);
  return ad::neg(ad::mean(dist::categorical_log_likelihood(y, logits, net.categories())));
}

double bits_per_dim(double total_log_likelihood, double pixel_count) {
  if (!(pixel_count > 0.0)) throw std::invalid_argument("bits_per_dim: pixel_count must be > 0");
  return -total_log_likelihood / (pixel_count * std::log(2.0));
}

}  // namespace flowssn::obj
