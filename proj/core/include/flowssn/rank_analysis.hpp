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

// Spectral diagnostics for covariances of softmax-pushed low-rank Gaussians.

#pragma once

#include "flowssn/distributions.hpp"
#include "flowssn/random.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <ostream>
#include <vector>

namespace flowssn::rank {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Singular values in descending order. Symmetric inputs use an eigensolver.
VectorXd singular_values(const MatrixXd& m);

/// exp of the Shannon entropy of the normalised singular values (0 log 0 = 0).
/// Throws std::invalid_argument for an all-zero matrix.
double effective_rank(const MatrixXd& m);
double effective_rank_from_singular_values(const VectorXd& sv);

/// Number of singular values strictly above rel_tol * sigma_max. rel_tol in (0, 1).
int numerical_rank(const MatrixXd& m, double rel_tol);
int numerical_rank_from_singular_values(const VectorXd& sv, double rel_tol);

/// A single (unbatched) low-rank Gaussian over logits with plain matrices.
struct LowRankParams {
  VectorXd mean;     // (k*d)
  VectorXd diag;     // (k*d), variances
  MatrixXd factors;  // (k*d, r)

  int rank() const { return static_cast<int>(factors.cols()); }
  MatrixXd covariance() const;
};

/// Ensemble used for rank experiments: P_ij ~ N(0, 1) / sqrt(r), D = diag_value * I, mean 0.
LowRankParams random_lowrank(int k, int d, int r, std::uint64_t seed, double diag_value = 0.1);

/// Empirical covariance of y = softmax_k(eta), eta ~ N(mean, D + P P^T), from N draws.
/// Draws are produced in fixed-size chunks, chunk c seeded by derive_seed(seed, c),
/// and combined in chunk order.
MatrixXd pushforward_covariance_mc(const LowRankParams& spec, int k, int d, std::int64_t samples,
                                   std::uint64_t seed);

struct RankReport {
  int assumed_rank = 0;
  int numerical_rank = 0;
  double effective_rank = 0.0;
  VectorXd singular_values;
  std::int64_t samples = 0;
  double rel_tol = 0.0;
  std::uint64_t seed = 0;
};

struct SublinearityResult {
  std::vector<RankReport> reports;
  /// Divided differences (erank(r_{i+1}) - erank(r_i)) / (r_{i+1} - r_i).
  std::vector<double> slopes;
  /// Fraction of adjacent slope pairs that do not increase.
  double concavity = 0.0;
  /// Cov(y) for each grid entry, in grid order.
  std::vector<MatrixXd> covariances;
};

/// Rank sweep over random_lowrank specs (spec r seeded by derive_seed(seed, r)).
/// rank_grid must be strictly increasing.
SublinearityResult sublinearity_report(const std::vector<int>& rank_grid, int k, int d,
                                       std::int64_t samples, std::uint64_t seed,
                                       double rel_tol = 1e-4, double diag_value = 0.1);

/// CSV with header r,numerical_rank,effective_rank,N,rel_tol,seed.
void write_rank_csv(std::ostream& out, const std::vector<RankReport>& rows);

}  // namespace flowssn::rank
