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

#include "flowssn/rank_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <stdexcept>

namespace flowssn::rank {

VectorXd singular_values(const MatrixXd& m) {
  if (m.size() == 0) return VectorXd();
  VectorXd sv;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if (m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
    sv = es.eigenvalues().cwiseAbs();
  } else {
    Eigen::BDCSVD<MatrixXd> svd(m);
    sv = svd.singularValues();
  }
  std::sort(sv.data(), sv.data() + sv.size(), std::greater<>());
  return sv;
}

double effective_rank_from_singular_values(const VectorXd& sv) {
  const double total = sv.sum();
  if (!(total > 0.0)) {
    throw std::invalid_argument("effective_rank: matrix is zero");
  }
  double h = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    const double p = sv(i) / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::exp(h);
}

double effective_rank(const MatrixXd& m) { return effective_rank_from_singular_values(singular_values(m)); }

int numerical_rank_from_singular_values(const VectorXd& sv, double rel_tol) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) {
    throw std::invalid_argument("numerical_rank: rel_tol must lie in (0, 1)");
  }
  if (sv.size() == 0) return 0;
  const double cut = rel_tol * sv.maxCoeff();
  int count = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > cut) ++count;
  }
  return count;
}

int numerical_rank(const MatrixXd& m, double rel_tol) {
  return numerical_rank_from_singular_values(singular_values(m), rel_tol);
}

MatrixXd LowRankParams::covariance() const {
  MatrixXd cov = diag.asDiagonal();
  cov.noalias() += factors * factors.transpose();
  return cov;
}

LowRankParams random_lowrank(int k, int d, int r, std::uint64_t seed, double diag_value) {
  if (k < 1 || d < 1 || r < 0) throw std::invalid_argument("random_lowrank: invalid sizes");
  Rng rng(seed);
  LowRankParams p;
  const int n = k * d;
  p.mean = VectorXd::Zero(n);
  p.diag = VectorXd::Constant(n, diag_value);
  p.factors = standard_normal(n, r, rng) / std::sqrt(static_cast<double>(std::max(r, 1)));
  return p;
}

MatrixXd pushforward_covariance_mc(const LowRankParams& spec, int k, int d, std::int64_t samples,
                                   std::uint64_t seed) {
  const int n = k * d;
  if (spec.mean.size() != n || spec.diag.size() != n || spec.factors.rows() != n) {
    throw std::invalid_argument("pushforward_covariance_mc: spec does not match k*d");
  }
  if (samples < 2) throw std::invalid_argument("pushforward_covariance_mc: need >= 2 samples");
  constexpr std::int64_t kChunk = 8192;
  const VectorXd sd = spec.diag.cwiseMax(0.0).cwiseSqrt();
  // Shift by the softmax of the mean to keep the accumulated moments well conditioned.
  const VectorXd shift = dist::softmax_k(spec.mean, k).col(0);
  VectorXd s1 = VectorXd::Zero(n);
  MatrixXd s2 = MatrixXd::Zero(n, n);
  std::int64_t done = 0;
  for (std::uint64_t chunk = 0; done < samples; ++chunk) {
    const std::int64_t m = std::min(kChunk, samples - done);
    Rng rng(derive_seed(seed, chunk));
    MatrixXd eta = standard_normal(n, m, rng);
    eta = sd.asDiagonal() * eta;
    if (spec.rank() > 0) {
      eta.noalias() += spec.factors * standard_normal(spec.rank(), m, rng);
    }
    eta.colwise() += spec.mean;
    MatrixXd y = dist::softmax_k(eta, k);
    y.colwise() -= shift;
    s1 += y.rowwise().sum();
    s2.selfadjointView<Eigen::Lower>().rankUpdate(y);
    done += m;
  }
  s2 = s2.selfadjointView<Eigen::Lower>();
  const double nn = static_cast<double>(samples);
  const VectorXd mean = s1 / nn;
  MatrixXd cov = (s2 - nn * mean * mean.transpose()) / (nn - 1.0);
  return 0.5 * (cov + cov.transpose());
}

SublinearityResult sublinearity_report(const std::vector<int>& rank_grid, int k, int d,
                                       std::int64_t samples, std::uint64_t seed, double rel_tol,
                                       double diag_value) {
  for (std::size_t i = 1; i < rank_grid.size(); ++i) {
    if (rank_grid[i] <= rank_grid[i - 1]) {
      throw std::invalid_argument("sublinearity_report: rank grid must be strictly increasing");
    }
  }
  SublinearityResult out;
  for (int r : rank_grid) {
    const std::uint64_t spec_seed = derive_seed(seed, static_cast<std::uint64_t>(r));
    const LowRankParams spec = random_lowrank(k, d, r, spec_seed, diag_value);
    const MatrixXd cov = pushforward_covariance_mc(spec, k, d, samples, derive_seed(spec_seed, 1));
    RankReport rep;
    rep.assumed_rank = r;
    rep.singular_values = singular_values(cov);
    rep.numerical_rank = numerical_rank_from_singular_values(rep.singular_values, rel_tol);
    rep.effective_rank = effective_rank_from_singular_values(rep.singular_values);
    rep.samples = samples;
    rep.rel_tol = rel_tol;
    rep.seed = spec_seed;
    out.reports.push_back(std::move(rep));
    out.covariances.push_back(cov);
  }
  for (std::size_t i = 1; i < out.reports.size(); ++i) {
    const double dr = rank_grid[i] - rank_grid[i - 1];
    out.slopes.push_back((out.reports[i].effective_rank - out.reports[i - 1].effective_rank) / dr);
  }
  if (out.slopes.size() >= 2) {
    int ok = 0;
    for (std::size_t i = 1; i < out.slopes.size(); ++i) {
      if (out.slopes[i] <= out.slopes[i - 1]) ++ok;
    }
    out.concavity = static_cast<double>(ok) / static_cast<double>(out.slopes.size() - 1);
  } else {
    out.concavity = 1.0;
  }
  return out;
}

void write_rank_csv(std::ostream& out, const std::vector<RankReport>& rows) {
  out << "r,numerical_rank,effective_rank,N,rel_tol,seed\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.assumed_rank << ',' << r.numerical_rank << ',' << r.effective_rank << ','
        << r.samples << ',' << r.rel_tol << ',' << r.seed << '\n';
  }
}

}  // namespace flowssn::rank
