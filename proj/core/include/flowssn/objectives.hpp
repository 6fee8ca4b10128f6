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

// Training objectives. Functions returning log-likelihood style quantities are
// to be maximised; continuous_loss is already negated.

#pragma once

#include "flowssn/autodiff.hpp"
#include "flowssn/distributions.hpp"
#include "flowssn/flows_continuous.hpp"
#include "flowssn/flows_discrete.hpp"

#include <string>

namespace flowssn::obj {

using ad::Matrix;
using ad::Var;

/// Row-wise LSE(l_1..l_M) - log M for a (B, M) table of per-sample log-likelihoods;
/// returns (1, B).
Var lse_over_samples(const Var& loglik);

/// Monte Carlo estimate of log p(y | x) for each field. y is (n, B); logits are
/// (n, B*M) with column b*M + m belonging to field b. Returns (1, B).
Var mc_log_likelihood_lse(const Matrix& y, const Var& logits, int k);
/// Same with M logit samples shared by every label in the batch; logits (n, M).
Var mc_log_likelihood_lse_shared(const Matrix& y, const Var& logits, int k);

/// Mean over all samples of log p(y_b | eta) where sample columns are grouped per
/// field as in mc_log_likelihood_lse; scalar.
Var mean_log_likelihood(const Matrix& y, const Var& logits, int k);

enum class KlEstimator {
  kNaive,        // mean of r
  kLowVariance,  // mean of expm1(r) - r with r = log p_IAF - log p_MAF
  kReciprocal,   // mean of expm1(-r) + r
};
KlEstimator kl_estimator_from_string(const std::string& name);
std::string to_string(KlEstimator e);

/// KL(p_IAF || p_MAF) from scores of IAF draws under both models, each (1, S).
Var kl_estimate(const Var& iaf_scores, const Var& maf_scores, KlEstimator estimator);

struct DualFlowTerms {
  Var elbo;            // scalar, mean over the batch
  Var log_likelihood;  // scalar
  Var kl;              // scalar
};

/// E[log p(y | eta)] - KL(p_IAF || p_MAF) from cached IAF draws. The MAF scorer sees the
/// IAF samples; maf_base holds one field per batch element like the IAF base.
DualFlowTerms dual_flow_elbo(const Matrix& y, const flows::CachedFlowSample& iaf,
                             const dist::DiagGaussianField& iaf_base,
                             const flows::AutoregressiveTransform& maf,
                             const dist::DiagGaussianField& maf_base, const Var* maf_context,
                             int k, KlEstimator estimator);

/// E[log p(y | eta)] + beta * H(p_IAF) with the cached entropy estimator; scalar.
Var entropy_regularised_objective(const Matrix& y, const flows::CachedFlowSample& iaf,
                                  const dist::DiagGaussianField& base, int k, double beta);

/// -mean_b log p(y_b | eta(interpolate(u_b, y_b, t_b), t_b)); u is (n, B), t has B entries.
Var continuous_loss(const Matrix& y, const Var* context, const Var& u, const Eigen::VectorXd& t,
                    const cont::LogitNetwork& net);

/// -log_likelihood / (pixels * log 2).
double bits_per_dim(double total_log_likelihood, double pixel_count);

}  // namespace flowssn::obj
