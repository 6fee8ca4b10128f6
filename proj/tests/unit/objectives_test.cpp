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
#include "flowssn/training.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace flowssn::obj {
namespace {

using flows::AutoregressiveTransform;
using flows::Direction;
using flows::LinearConditioner;
using testing::gradient_check;

AutoregressiveTransform identity_flow(Eigen::Index n, Direction d) {
  AutoregressiveTransform t;
  t.conditioner = LinearConditioner::constant(n, 0.0, 0.0);
  t.direction = d;
  return t;
}

Matrix random_labels(int k, int d, int b, Rng& rng) {
  Matrix y = Matrix::Zero(k * d, b);
  for (int col = 0; col < b; ++col) {
    for (int j = 0; j < d; ++j) y(static_cast<int>(rng() % static_cast<unsigned>(k)) * d + j, col) = 1.0;
  }
  return y;
}

double diag_gaussian_kl(const Matrix& mq, const Matrix& lq, const Matrix& mp, const Matrix& lp) {
  const Eigen::ArrayXXd sq2 = (2.0 * lq.array()).exp();
  const Eigen::ArrayXXd sp2 = (2.0 * lp.array()).exp();
  return ((lp - lq).array() + (sq2 + (mq - mp).array().square()) / (2.0 * sp2) - 0.5).sum();
}

struct KlDraws {
  Var self;
  Var cross;
};

// Scores of M draws from q under q (self) and under p (cross), identity flows.
KlDraws kl_draws(const dist::DiagGaussianField& q, const dist::DiagGaussianField& p, int m,
                 Rng& rng) {
  const auto iaf = identity_flow(q.dims(), Direction::kIAF);
  const auto maf = identity_flow(q.dims(), Direction::kMAF);
  const auto draw = dist::diag_sample(q, rng, m);
  const auto cached = flows::iaf_forward(draw.u, nullptr, iaf);
  return {flows::self_score(cached, q), flows::maf_log_prob(cached.eta, nullptr, maf, p)};
}

TEST(LseOverSamples, SingleSampleIsCategoricalLikelihood) {
  Rng rng(1);
  const Matrix y = random_labels(3, 5, 2, rng);
  const Matrix logits = standard_normal(15, 2, rng);
  const Matrix direct = dist::categorical_log_likelihood(y, ad::constant(logits), 3).value();
  const Matrix lse = mc_log_likelihood_lse(y, ad::constant(logits), 3).value();
  EXPECT_LT((direct - lse).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LseOverSamples, IdenticalSamplesMatchSingleSample) {
  Rng rng(2);
  const Matrix y = random_labels(2, 6, 1, rng);
  const Matrix logits = standard_normal(12, 1, rng);
  const double one = mc_log_likelihood_lse(y, ad::constant(logits), 2).scalar();
  const double many = mc_log_likelihood_lse(y, ad::constant(logits.replicate(1, 9)), 2).scalar();
  EXPECT_NEAR(one, many, 1e-12);
}

TEST(LseOverSamples, TwoSampleExample) {
  const Matrix table = (Matrix(1, 2) << -1.0, -3.0).finished();
  EXPECT_NEAR(lse_over_samples(ad::constant(table)).scalar(), -1.5662, 1e-4);
}

TEST(LseOverSamples, BoundsAndMonotonicity) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + trial % 9;
    const Matrix l = 10.0 * standard_normal(1, m, rng);
    const double v = lse_over_samples(ad::constant(l)).scalar();
    const double mx = l.maxCoeff();
    EXPECT_LE(mx - std::log(m), v + 1e-12);
    EXPECT_LE(v, mx + 1e-12);
    Matrix bumped = l;
    bumped(0, static_cast<Eigen::Index>(rng() % static_cast<unsigned>(m))) += 0.5;
    EXPECT_GE(lse_over_samples(ad::constant(bumped)).scalar(), v);
  }
}

TEST(LseOverSamples, SharedSamplesMatchReplicatedSamples) {
  Rng rng(4);
  const int k = 2, d = 8, b = 3, m = 5;
  const Matrix y = random_labels(k, d, b, rng);
  const Matrix logits = standard_normal(k * d, m, rng);
  const Matrix shared = mc_log_likelihood_lse_shared(y, ad::constant(logits), k).value();
  const Matrix rep = mc_log_likelihood_lse(y, ad::constant(logits.replicate(1, b)), k).value();
  EXPECT_LT((shared - rep).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LseOverSamples, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  const Matrix y = random_labels(2, 4, 2, rng);
  Var logits = ad::parameter(standard_normal(8, 2 * 3, rng));
  auto f = [&] { return ad::mean(mc_log_likelihood_lse(y, logits, 2)); };
  EXPECT_LT(gradient_check({logits}, f).rel_error, 1e-4);
}

TEST(KlEstimate, IdenticalScoresGiveZero) {
  Rng rng(6);
  const Var s = ad::constant(standard_normal(1, 20, rng));
  for (auto e : {KlEstimator::kNaive, KlEstimator::kLowVariance, KlEstimator::kReciprocal}) {
    EXPECT_EQ(kl_estimate(s, s, e).scalar(), 0.0);
  }
}

TEST(KlEstimate, NaiveIsMeanScoreDifference) {
  Rng rng(7);
  const Matrix a = standard_normal(1, 30, rng);
  const Matrix b = standard_normal(1, 30, rng);
  EXPECT_NEAR(kl_estimate(ad::constant(a), ad::constant(b), KlEstimator::kNaive).scalar(),
              (a - b).mean(), 1e-14);
}

TEST(KlEstimate, LowVarianceTermsAreNonNegative) {
  for (double r = -30.0; r <= 30.0; r += 0.01) {
    const Var v = ad::constant(Matrix::Constant(1, 1, r));
    EXPECT_GE(kl_estimate(v, ad::constant(Matrix::Zero(1, 1)), KlEstimator::kLowVariance).scalar(),
              0.0)
        << r;
    EXPECT_GE(kl_estimate(v, ad::constant(Matrix::Zero(1, 1)), KlEstimator::kReciprocal).scalar(),
              0.0)
        << r;
  }
}

TEST(KlEstimate, EstimatorNamesRoundTrip) {
  for (const char* n : {"naive", "low_variance", "reciprocal"}) {
    EXPECT_EQ(to_string(kl_estimator_from_string(n)), n);
  }
  EXPECT_THROW(kl_estimator_from_string("other"), std::invalid_argument);
}

TEST(DualFlowElbo, IdenticalFlowsHaveZeroKl) {
  Rng rng(8);
  const int n = 8, b = 2, m = 4;
  const dist::DiagGaussianField base{ad::constant(standard_normal(n, b, rng)),
                                     ad::constant(0.3 * standard_normal(n, b, rng))};
  const auto iaf = identity_flow(n, Direction::kIAF);
  const auto maf = identity_flow(n, Direction::kMAF);
  const auto cached = flows::iaf_forward(dist::diag_sample(base, rng, m).u, nullptr, iaf);
  const Matrix y = random_labels(2, 4, b, rng);
  for (auto e : {KlEstimator::kNaive, KlEstimator::kLowVariance, KlEstimator::kReciprocal}) {
    const auto terms = dual_flow_elbo(y, cached, base, maf, base, nullptr, 2, e);
    EXPECT_NEAR(terms.kl.scalar(), 0.0, 1e-8);
    EXPECT_NEAR(terms.elbo.scalar(), terms.log_likelihood.scalar(), 1e-8);
    EXPECT_NEAR(terms.log_likelihood.scalar(),
                mean_log_likelihood(y, cached.eta, 2).scalar(), 1e-12);
  }
}

// The naive estimate has relative standard error sqrt(2 / (KL * M)) under a mean shift, so a
// 2% band at M = 1e4 needs KL of about 8 to sit at four standard errors.
TEST(DualFlowElbo, MonteCarloKlMatchesClosedForm) {
  Rng rng(9);
  const int n = 256;
  const Matrix mq = 0.4 * standard_normal(n, 1, rng);
  const Matrix lq = 0.2 * standard_normal(n, 1, rng);
  const Matrix mp = mq.array() + 0.25;
  const Matrix lp = lq.array() + 0.02;
  const dist::DiagGaussianField q{ad::constant(mq), ad::constant(lq)};
  const dist::DiagGaussianField p{ad::constant(mp), ad::constant(lp)};
  const double truth = diag_gaussian_kl(mq, lq, mp, lp);
  ASSERT_GT(truth, 7.0);
  const auto draws = kl_draws(q, p, 10000, rng);
  const double naive = kl_estimate(draws.self, draws.cross, KlEstimator::kNaive).scalar();
  EXPECT_LT(std::abs(naive - truth) / truth, 0.02) << naive << " vs " << truth;

  // The same numbers through the ELBO entry point.
  const auto iaf = identity_flow(n, Direction::kIAF);
  const auto maf = identity_flow(n, Direction::kMAF);
  Rng again(10);
  const auto cached = flows::iaf_forward(dist::diag_sample(q, again, 10000).u, nullptr, iaf);
  const Matrix y = Matrix::Zero(n, 1);
  const auto terms = dual_flow_elbo(y, cached, q, maf, p, nullptr, 2, KlEstimator::kNaive);
  EXPECT_LT(std::abs(terms.kl.scalar() - truth) / truth, 0.02);
}

// expm1(-r) + r is unbiased but its relative error cannot fall below sqrt(2 / M), so it is
// held to its own standard error rather than a fixed percentage.
TEST(DualFlowElbo, ReciprocalKlIsUnbiased) {
  Rng rng(19);
  const int n = 4;
  const Matrix mq = 0.4 * standard_normal(n, 1, rng);
  const Matrix lq = 0.2 * standard_normal(n, 1, rng);
  const Matrix mp = mq + 0.3 * standard_normal(n, 1, rng);
  const Matrix lp = lq.array() + 0.15;
  const dist::DiagGaussianField q{ad::constant(mq), ad::constant(lq)};
  const dist::DiagGaussianField p{ad::constant(mp), ad::constant(lp)};
  const double truth = diag_gaussian_kl(mq, lq, mp, lp);
  const auto draws = kl_draws(q, p, 10000, rng);
  const Matrix r = draws.self.value() - draws.cross.value();
  const Eigen::ArrayXXd t = (-r.array()).exp() - 1.0 + r.array();
  const double est = t.mean();
  const double se = std::sqrt((t - est).square().mean() / static_cast<double>(t.size()));
  EXPECT_NEAR(kl_estimate(draws.self, draws.cross, KlEstimator::kReciprocal).scalar(), est, 1e-12);
  EXPECT_LT(std::abs(est - truth), 4.0 * se) << est << " vs " << truth;
}

// The default estimator is mean(expm1(r) - r) with r = log q - log p on draws from q, as
// written. Its expectation is E_q[q/p] - 1 - KL(q||p), not KL(q||p); for equal-variance
// Gaussians E_q[q/p] = exp(sum delta^2 / sigma^2).
TEST(DualFlowElbo, LowVarianceFormTracksItsOwnExpectationNotKl) {
  Rng rng(11);
  const int n = 2;
  const Matrix mq = Matrix::Zero(n, 1);
  const Matrix mp = Matrix::Constant(n, 1, 0.2);
  const Matrix ls = Matrix::Zero(n, 1);
  const dist::DiagGaussianField q{ad::constant(mq), ad::constant(ls)};
  const dist::DiagGaussianField p{ad::constant(mp), ad::constant(ls)};
  const double delta2 = (mq - mp).squaredNorm();
  const double kl = 0.5 * delta2;
  const double expected = std::expm1(delta2) - kl;

  const auto draws = kl_draws(q, p, 200000, rng);
  const Matrix r = (draws.self.value() - draws.cross.value());
  const Eigen::ArrayXXd terms = r.array().exp() - 1.0 - r.array();
  const double est = terms.mean();
  const double se = std::sqrt((terms - est).square().mean() / static_cast<double>(terms.size()));
  EXPECT_NEAR(kl_estimate(draws.self, draws.cross, KlEstimator::kLowVariance).scalar(), est, 1e-12);
  EXPECT_LT(std::abs(est - expected), 4.0 * se);
  EXPECT_GT(std::abs(est - kl), 10.0 * se);  // visibly biased relative to the KL itself
}

TEST(KlEstimate, LowVarianceFormHasSmallerVarianceThanNaive) {
  Rng rng(12);
  const int n = 2;
  const dist::DiagGaussianField q{ad::constant(Matrix::Zero(n, 1)), ad::constant(Matrix::Zero(n, 1))};
  const dist::DiagGaussianField p{ad::constant(Matrix::Constant(n, 1, 0.2)),
                                  ad::constant(Matrix::Constant(n, 1, 0.1))};
  std::vector<double> naive, low;
  for (int rep = 0; rep < 200; ++rep) {
    const auto d = kl_draws(q, p, 64, rng);
    naive.push_back(kl_estimate(d.self, d.cross, KlEstimator::kNaive).scalar());
    low.push_back(kl_estimate(d.self, d.cross, KlEstimator::kLowVariance).scalar());
  }
  auto variance = [](const std::vector<double>& v) {
    double m = 0.0, s = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
  };
  EXPECT_LE(variance(low), variance(naive));
}

TEST(DualFlowElbo, GradientMatchesFiniteDifferences) {
  Rng rng(13);
  const int n = 8, b = 2, m = 3;
  nn::ParameterSet ps;
  auto iaf_c = std::make_shared<nn::MadeLinearConditioner>(ps, "iaf", n, 0);
  auto maf_c = std::make_shared<nn::MadeLinearConditioner>(ps, "maf", n, 0);
  Var mean = ps.add("mean", standard_normal(n, b, rng));
  Var log_scale = ps.add("log_scale", 0.2 * standard_normal(n, b, rng));
  // Larger weights give r near 40 on some draws, where a 1e-3 step cannot resolve exp(r).
  testing::randomise(ps, rng, 0.1);
  AutoregressiveTransform iaf{iaf_c, Direction::kIAF};
  AutoregressiveTransform maf{maf_c, Direction::kMAF};
  const Matrix noise = standard_normal(n, b * m, rng);
  const Matrix y = random_labels(2, 4, b, rng);
  for (auto e : {KlEstimator::kNaive, KlEstimator::kLowVariance, KlEstimator::kReciprocal}) {
    auto f = [&] {
      const dist::DiagGaussianField base{mean, log_scale};
      const auto cached = flows::iaf_forward(dist::diag_sample_with_noise(base, noise), nullptr, iaf);
      return dual_flow_elbo(y, cached, base, maf, base, nullptr, 2, e).elbo;
    };
    EXPECT_LT(gradient_check(testing::leaves_of(ps), f).rel_error, 1e-4) << to_string(e);
  }
}

TEST(EntropyRegularised, BetaZeroIsMeanLikelihoodAndIdentityEntropyIsBaseEntropy) {
  Rng rng(14);
  const int n = 8, b = 2, m = 3;
  const dist::DiagGaussianField base{ad::constant(standard_normal(n, b, rng)),
                                     ad::constant(0.3 * standard_normal(n, b, rng))};
  const auto iaf = identity_flow(n, Direction::kIAF);
  const auto cached = flows::iaf_forward(dist::diag_sample(base, rng, m).u, nullptr, iaf);
  const Matrix y = random_labels(2, 4, b, rng);
  const double ll = mean_log_likelihood(y, cached.eta, 2).scalar();
  EXPECT_EQ(entropy_regularised_objective(y, cached, base, 2, 0.0).scalar(), ll);
  const double h = dist::diag_entropy(base).value().mean();
  EXPECT_NEAR(entropy_regularised_objective(y, cached, base, 2, 1.0).scalar(), ll + h, 1e-12);
  EXPECT_EQ(flows::iaf_entropy_from_cache(base, cached).value(), dist::diag_entropy(base).value());
  EXPECT_THROW(entropy_regularised_objective(y, cached, base, 2, -1.0), std::invalid_argument);
}

TEST(EntropyRegularised, GradientMatchesFiniteDifferences) {
  Rng rng(15);
  const int n = 8, b = 2, m = 3;
  nn::ParameterSet ps;
  auto c = std::make_shared<nn::MadeLinearConditioner>(ps, "iaf", n, 0);
  Var mean = ps.add("mean", Matrix::Zero(n, b));
  Var log_scale = ps.add("log_scale", Matrix::Zero(n, b));
  testing::randomise(ps, rng, 0.2);
  AutoregressiveTransform iaf{c, Direction::kIAF};
  const Matrix noise = standard_normal(n, b * m, rng);
  const Matrix y = random_labels(2, 4, b, rng);
  auto f = [&] {
    const dist::DiagGaussianField base{mean, log_scale};
    const auto cached = flows::iaf_forward(dist::diag_sample_with_noise(base, noise), nullptr, iaf);
    return entropy_regularised_objective(y, cached, base, 2, 0.7);
  };
  EXPECT_LT(gradient_check(testing::leaves_of(ps), f).rel_error, 1e-4);
}

TEST(EntropyRegularised, LargerBetaRaisesLearnedBaseScale) {
  const auto data = datagen::markovshapes_dataset({256, 4, 1});
  double mean_raw[2] = {0.0, 0.0};
  int idx = 0;
  for (double beta : {0.0, 1.0}) {
    train::RunConfig c;
    c.model = "flow_ssn_discrete";
    c.objective.variant = "entropy_reg";
    c.objective.beta = beta;
    c.objective.mc_samples = 8;
    c.batch_size = 16;
    c.max_steps = 300;
    c.optim.lr = 3e-3;
    c.seed = 3;
    auto model = train::make_model(c, train::DataShape::of(data.manifest));
    train::train(*model, c, data, nullptr);
    auto& ps = model->params();
    mean_raw[idx++] = ps.live(ps.index("prior.raw_scale")).value().mean();
  }
  EXPECT_GT(mean_raw[1], mean_raw[0]);
}

struct ZeroNet final : cont::LogitNetwork {
  Var logits(const Var& y_t, const Eigen::VectorXd&, const Var*) const override {
    return ad::constant(Matrix::Zero(y_t.rows(), y_t.cols()));
  }
  int categories() const override { return 2; }
};

// Returns 40 * (true one-hot) regardless of the input.
struct OracleNet final : cont::LogitNetwork {
  Matrix y;
  Var logits(const Var&, const Eigen::VectorXd&, const Var*) const override {
    return ad::constant(40.0 * y);
  }
  int categories() const override { return 2; }
};

TEST(ContinuousLoss, ZeroNetworkGivesDLogK) {
  Rng rng(16);
  const int d = 16;
  const Matrix y = random_labels(2, d, 3, rng);
  ZeroNet net;
  const double loss = continuous_loss(y, nullptr, ad::constant(standard_normal(2 * d, 3, rng)),
                                      Eigen::VectorXd::Constant(3, 0.3), net)
                          .scalar();
  EXPECT_NEAR(loss, d * std::log(2.0), 1e-12);
}

TEST(ContinuousLoss, SaturatedNetworkGivesNearZeroLoss) {
  Rng rng(17);
  OracleNet net;
  net.y = random_labels(2, 16, 2, rng);
  const double loss = continuous_loss(net.y, nullptr, ad::constant(standard_normal(32, 2, rng)),
                                      Eigen::VectorXd::Constant(2, 0.6), net)
                          .scalar();
  EXPECT_LT(loss, 1e-6);
}

TEST(ContinuousLoss, GradientFlowsToPriorThroughBaseSample) {
  Rng rng(18);
  nn::ParameterSet ps;
  nn::FlowNetSpec spec;
  spec.height = 4;
  spec.width = 4;
  spec.net.base_width = 4;
  spec.net.multipliers = {1, 1};
  spec.net.time_embedding = 4;
  nn::FlowNetwork net(ps, spec, rng);
  testing::randomise(ps, rng, 0.3);
  Var mean = ad::parameter(standard_normal(32, 2, rng));
  Var raw = ad::parameter(standard_normal(32, 2, rng));
  const Matrix noise = standard_normal(32, 2, rng);
  const Matrix y = random_labels(2, 16, 2, rng);
  const Eigen::VectorXd t = (Eigen::VectorXd(2) << 0.3, 0.6).finished();
  auto f = [&] {
    const Var u = dist::diag_sample_with_noise(dist::DiagGaussianField::from_raw(mean, raw), noise);
    return continuous_loss(y, nullptr, u, t, net);
  };
  const auto check = gradient_check({mean, raw}, f);
  EXPECT_GT(check.analytic_norm, 0.0);
  EXPECT_LT(check.rel_error, 1e-4);
}

TEST(BitsPerDim, Examples) {
  EXPECT_NEAR(bits_per_dim(-256.0 * std::log(2.0), 256.0), 1.0, 1e-15);
  EXPECT_EQ(bits_per_dim(0.0, 100.0), 0.0);
  // Uniform Bernoulli model on 64 binary pixels.
  const Matrix y = Matrix::Zero(128, 1);
  Matrix yy = y;
  yy.topRows(64).setOnes();
  const double ll = dist::categorical_log_likelihood(yy, ad::constant(Matrix::Zero(128, 1)), 2).scalar();
  EXPECT_NEAR(bits_per_dim(ll, 64.0), 1.0, 1e-14);
  EXPECT_THROW(bits_per_dim(-1.0, 0.0), std::invalid_argument);
}

}  // namespace
}  // namespace flowssn::obj
