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

#include "flowssn/flows_continuous.hpp"
#include "flowssn/networks.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace flowssn::cont {
namespace {

using testing::gradient_check;

nn::FlowNetSpec toy_spec(int context_channels = 0) {
  nn::FlowNetSpec spec;
  spec.categories = 2;
  spec.height = 4;
  spec.width = 4;
  spec.context_channels = context_channels;
  spec.net.base_width = 4;
  spec.net.multipliers = {1, 1};
  spec.net.time_embedding = 4;
  return spec;
}

// Smooth stand-in for a trained expectation network: softmax(A y + b + t c).
struct SmoothField {
  Matrix a, b, c;
  int k = 2;
  explicit SmoothField(int n, Rng& rng)
      : a(0.5 * standard_normal(n, n, rng)), b(standard_normal(n, 1, rng)),
        c(standard_normal(n, 1, rng)) {}
  Matrix operator()(const Matrix& y, double t) const {
    Matrix logits = a * y;
    logits.colwise() += (b + t * c).col(0);
    return ad::softmax_blocks(ad::constant(logits), k).value();
  }
};

TEST(Interpolate, EndpointsAreExactAndMidpointIsHalf) {
  Rng rng(1);
  const Matrix u = standard_normal(8, 3, rng);
  const Matrix y = standard_normal(8, 3, rng);
  EXPECT_EQ(interpolate(ad::constant(u), y, 0.0).y_t.value(), u);
  EXPECT_EQ(interpolate(ad::constant(u), y, 1.0).y_t.value(), y);
  const Matrix mid = interpolate(ad::constant(Matrix::Zero(8, 3)), Matrix::Ones(8, 3), 0.5).y_t.value();
  EXPECT_EQ(mid, Matrix::Constant(8, 3, 0.5));

  Eigen::VectorXd per_column(3);
  per_column << 0.0, 1.0, 0.25;
  const Matrix mixed = interpolate(ad::constant(u), y, per_column).y_t.value();
  EXPECT_EQ(mixed.col(0), u.col(0));
  EXPECT_EQ(mixed.col(1), y.col(1));
  EXPECT_LT((mixed.col(2) - (0.75 * u.col(2) + 0.25 * y.col(2))).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Interpolate, RejectsTimeOutsideUnitIntervalAndShapeMismatch) {
  const Var u = ad::constant(Matrix::Zero(4, 1));
  EXPECT_THROW(interpolate(u, Matrix::Zero(4, 1), -0.1), std::invalid_argument);
  EXPECT_THROW(interpolate(u, Matrix::Zero(4, 1), 1.5), std::invalid_argument);
  EXPECT_THROW(interpolate(u, Matrix::Zero(4, 2), 0.5), std::invalid_argument);
}

TEST(Velocity, FixedPointAndShapeContract) {
  Rng rng(2);
  const Matrix u = standard_normal(6, 2, rng);
  EXPECT_EQ(velocity(u, u), Matrix::Zero(6, 2));
  EXPECT_THROW(velocity(Matrix::Zero(6, 1), u), std::invalid_argument);
}

TEST(Integrate, ConstantExpectationReachedExactlyForAnyStepCount) {
  Rng rng(3);
  const Matrix u = 3.0 * standard_normal(8, 4, rng);
  Matrix target = Matrix::Zero(8, 4);
  for (int s = 0; s < 4; ++s) {
    for (int j = 0; j < 4; ++j) target((j + s) % 2 == 0 ? j : 4 + j, s) = 1.0;
  }
  const ExpectationFn constant = [&](const Matrix&, double) { return target; };
  for (int steps : {1, 10, 50}) {
    SolverConfig cfg;
    cfg.steps = steps;
    const auto res = integrate(u, constant, 2, cfg);
    EXPECT_LT((res.y1 - target).cwiseAbs().maxCoeff(), 1e-12) << "T = " << steps;
    EXPECT_EQ(res.evaluations, steps + 1);
  }
  SolverConfig adaptive;
  adaptive.method = SolverMethod::kDopri5;
  EXPECT_LT((integrate(u, constant, 2, adaptive).y1 - target).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Integrate, SingleStepIsOneEulerUpdate) {
  Rng rng(4);
  SmoothField f(8, rng);
  const Matrix u = standard_normal(8, 3, rng);
  SolverConfig cfg;
  cfg.steps = 1;
  const auto res = integrate(u, [&](const Matrix& y, double t) { return f(y, t); }, 2, cfg);
  EXPECT_EQ(res.y1, u + (f(u, 0.0) - u));
}

TEST(Integrate, EulerConvergesAtFirstOrderAndMatchesAdaptive) {
  Rng rng(5);
  SmoothField f(8, rng);
  const ExpectationFn fn = [&](const Matrix& y, double t) { return f(y, t); };
  const Matrix u = standard_normal(8, 5, rng);
  auto euler = [&](int steps) {
    SolverConfig cfg;
    cfg.steps = steps;
    return integrate(u, fn, 2, cfg).y1;
  };
  std::vector<double> gaps;
  for (int t : {5, 10, 20, 40}) gaps.push_back((euler(t) - euler(2 * t)).cwiseAbs().maxCoeff());
  for (std::size_t i = 1; i < gaps.size(); ++i) {
    EXPECT_LT(gaps[i], gaps[i - 1]);
    EXPECT_NEAR(gaps[i - 1] / gaps[i], 2.0, 0.5);
  }
  SolverConfig adaptive;
  adaptive.method = SolverMethod::kDopri5;
  const auto res = integrate(u, fn, 2, adaptive);
  EXPECT_LT((res.y1 - euler(250)).cwiseAbs().maxCoeff(), 1e-2);
  EXPECT_GT(res.accepted_steps, 0);
}

TEST(Integrate, BlowUpIsReportedAsSolverError) {
  const Matrix u = Matrix::Ones(2, 1);
  const ExpectationFn explode = [](const Matrix& y, double) -> Matrix {
    return y.array().square().matrix() * 1e3;
  };
  SolverConfig adaptive;
  adaptive.method = SolverMethod::kDopri5;
  EXPECT_THROW(integrate(u, explode, 2, adaptive), SolverError);
  SolverConfig euler;
  euler.steps = 200;
  EXPECT_THROW(integrate(u, explode, 2, euler), SolverError);
}

TEST(Integrate, AdaptiveStepBudgetIsEnforced) {
  Rng rng(6);
  SmoothField f(8, rng);
  SolverConfig cfg;
  cfg.method = SolverMethod::kDopri5;
  cfg.abs_tol = 1e-14;
  cfg.rel_tol = 1e-14;
  cfg.max_steps = 3;
  EXPECT_THROW(integrate(standard_normal(8, 2, rng), [&](const Matrix& y, double t) { return f(y, t); },
                         2, cfg),
               SolverError);
}

TEST(SolverConfig, Validation) {
  SolverConfig c;
  EXPECT_NO_THROW(c.validate());
  c.steps = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SolverConfig{};
  c.abs_tol = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SolverConfig{};
  c.rel_tol = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(PredictExpectation, ZeroHeadGivesUniform) {
  Rng rng(7);
  nn::ParameterSet ps;
  nn::FlowNetwork net(ps, toy_spec(), rng);
  const Var y = ad::constant(standard_normal(32, 3, rng));
  const Matrix p = predict_expectation(y, Eigen::VectorXd::Constant(3, 0.4), nullptr, net).value();
  EXPECT_LT((p.array() - 0.5).abs().maxCoeff(), 1e-15);
  EXPECT_THROW(predict_expectation(y, Eigen::VectorXd::Constant(3, 1.2), nullptr, net),
               std::invalid_argument);
}

TEST(PredictExpectation, GradientWithRespectToStateMatchesFiniteDifferences) {
  Rng rng(8);
  nn::ParameterSet ps;
  nn::FlowNetwork net(ps, toy_spec(), rng);
  testing::randomise(ps, rng, 0.3);
  Var y = ad::parameter(standard_normal(32, 2, rng));
  const Matrix w = standard_normal(32, 2, rng);
  const Eigen::VectorXd t = (Eigen::VectorXd(2) << 0.2, 0.7).finished();
  auto f = [&] { return ad::sum(ad::cmul(predict_expectation(y, t, nullptr, net), ad::constant(w))); };
  EXPECT_LT(gradient_check({y}, f).rel_error, 1e-4);
}

TEST(PredictExpectation, InvariantToPerPixelLogitShift) {
  // A network whose logits differ by a per-pixel constant yields the same expectation.
  struct Shifted final : LogitNetwork {
    Matrix base, shift;
    Var logits(const Var&, const Eigen::VectorXd&, const Var*) const override {
      Matrix out = base;
      out.topRows(4) += shift;
      out.bottomRows(4) += shift;
      return ad::constant(out);
    }
    int categories() const override { return 2; }
  };
  Rng rng(9);
  Shifted a, b;
  a.base = b.base = standard_normal(8, 2, rng);
  a.shift = Matrix::Zero(4, 2);
  b.shift = 5.0 * standard_normal(4, 2, rng);
  const Var y = ad::constant(Matrix::Zero(8, 2));
  const Eigen::VectorXd t = Eigen::VectorXd::Constant(2, 0.5);
  EXPECT_LT((predict_expectation(y, t, nullptr, a).value() -
             predict_expectation(y, t, nullptr, b).value())
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(Integrate, NetworkSolveIsDeterministicAndFinite) {
  Rng rng(10);
  nn::ParameterSet ps;
  nn::FlowNetwork net(ps, toy_spec(1), rng);
  testing::randomise(ps, rng, 0.3);
  const Matrix u = standard_normal(32, 4, rng);
  const Matrix ctx = standard_normal(16, 4, rng);
  SolverConfig cfg;
  cfg.steps = 10;
  const auto a = integrate(u, &ctx, net, cfg);
  const auto b = integrate(u, &ctx, net, cfg);
  EXPECT_EQ(a.y1, b.y1);
  EXPECT_EQ(a.classes, b.classes);
  EXPECT_TRUE(a.y1.allFinite());
  EXPECT_EQ(a.classes.rows(), 16);
  EXPECT_EQ(a.classes.cols(), 4);
}

TEST(ArgmaxClasses, PicksLargestCategoryPerPixel) {
  Matrix f(6, 1);
  f << 0.1, 0.9, 0.3,  // class 0
      0.5, 0.05, 0.3;  // class 1 (ties resolve to the lower class)
  const Eigen::MatrixXi c = argmax_classes(f, 2);
  EXPECT_EQ(c(0, 0), 1);
  EXPECT_EQ(c(1, 0), 0);
  EXPECT_EQ(c(2, 0), 0);
  EXPECT_THROW(argmax_classes(Matrix::Zero(5, 1), 2), std::invalid_argument);
}

}  // namespace
}  // namespace flowssn::cont
