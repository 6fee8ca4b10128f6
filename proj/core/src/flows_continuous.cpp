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

#include <algorithm>
#include <cmath>
#include <string>

namespace flowssn::cont {

namespace {

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::invalid_argument("time " + std::to_string(t) + " lies outside [0, 1]");
  }
}

void require_finite(const Matrix& y, double t) {
  if (!y.allFinite()) {
    throw SolverError("non-finite state at t = " + std::to_string(t));
  }
}

}  // namespace

PathPoint interpolate(const Var& u, const Matrix& y, const Eigen::VectorXd& t) {
  if (u.rows() != y.rows() || u.cols() != y.cols()) {
    throw std::invalid_argument("interpolate: u and y shapes differ");
  }
  if (t.size() != 1 && t.size() != y.cols()) {
    throw std::invalid_argument("interpolate: need one time per column");
  }
  for (Eigen::Index i = 0; i < t.size(); ++i) check_time(t(i));
  const Eigen::VectorXd tt = t.size() == 1 ? Eigen::VectorXd::Constant(y.cols(), t(0)) : t;
  PathPoint p;
  p.t = tt;
  p.u = u;
  // Endpoints are copied rather than computed so that t = 0 and t = 1 are exact.
  Matrix keep_u = (1.0 - tt.array()).matrix().transpose().replicate(y.rows(), 1);
  Matrix from_y(y.rows(), y.cols());
  for (Eigen::Index s = 0; s < y.cols(); ++s) {
    if (tt(s) == 0.0) {
      from_y.col(s).setZero();
    } else if (tt(s) == 1.0) {
      from_y.col(s) = y.col(s);
    } else {
      from_y.col(s) = tt(s) * y.col(s);
    }
  }
  p.y_t = ad::add(ad::cmul(u, ad::constant(std::move(keep_u))), ad::constant(std::move(from_y)));
  return p;
}

PathPoint interpolate(const Var& u, const Matrix& y, double t) {
  return interpolate(u, y, Eigen::VectorXd::Constant(1, t));
}

Matrix velocity(const Matrix& expectation, const Matrix& u) {
  if (expectation.rows() != u.rows() || expectation.cols() != u.cols()) {
    throw std::invalid_argument("velocity: expectation is " + std::to_string(expectation.rows()) +
                                "x" + std::to_string(expectation.cols()) + ", u is " +
                                std::to_string(u.rows()) + "x" + std::to_string(u.cols()));
  }
  return expectation - u;
}

Var predict_expectation(const Var& y_t, const Eigen::VectorXd& t, const Var* context,
                        const LogitNetwork& net) {
  for (Eigen::Index i = 0; i < t.size(); ++i) check_time(t(i));
  return ad::softmax_blocks(net.logits(y_t, t, context), net.categories());
}

void SolverConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("solver steps must be >= 1");
  if (!(abs_tol > 0.0) || !(rel_tol > 0.0)) {
    throw std::invalid_argument("solver tolerances must be positive");
  }
  if (max_steps < 1) throw std::invalid_argument("solver max_steps must be >= 1");
}

Eigen::MatrixXi argmax_classes(const Matrix& fields, int k) {
  if (k < 1 || fields.rows() % k != 0) {
    throw std::invalid_argument("argmax_classes: rows are not a multiple of k");
  }
  const Eigen::Index d = fields.rows() / k;
  Eigen::MatrixXi out(d, fields.cols());
  for (Eigen::Index s = 0; s < fields.cols(); ++s) {
    for (Eigen::Index j = 0; j < d; ++j) {
      int best = 0;
      for (int c = 1; c < k; ++c) {
        if (fields(c * d + j, s) > fields(best * d + j, s)) best = c;
      }
      out(j, s) = best;
    }
  }
  return out;
}

IntegrationResult integrate(const Matrix& u, const ExpectationFn& expectation, int k,
                            const SolverConfig& solver) {
  solver.validate();
  IntegrationResult out;
  auto field = [&](const Matrix& y, double t) {
    ++out.evaluations;
    return velocity(expectation(y, t), u);
  };
  Matrix y = u;
  if (solver.method == SolverMethod::kEuler) {
    const double h = 1.0 / solver.steps;
    for (int i = 0; i < solver.steps; ++i) {
      const double t = static_cast<double>(i) / solver.steps;
      y += h * field(y, t);
      require_finite(y, t + h);
      ++out.accepted_steps;
    }
  } else {
    // Dormand-Prince 5(4) with FSAL and standard step-size control.
    constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    constexpr double a21 = 1.0 / 5;
    constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                     a54 = -212.0 / 729;
    constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                     a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                     b6 = 11.0 / 84;
    constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                     e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
    double t = 0.0;
    double h = 0.05;
    Matrix k1 = field(y, t);
    int steps = 0;
    while (t < 1.0) {
      if (++steps > solver.max_steps) {
        throw SolverError("adaptive solver exceeded " + std::to_string(solver.max_steps) +
                          " steps at t = " + std::to_string(t));
      }
      if (h < 1e-12) {
        throw SolverError("adaptive solver step size underflow at t = " + std::to_string(t));
      }
      h = std::min(h, 1.0 - t);
      const Matrix k2 = field(y + h * a21 * k1, t + c2 * h);
      const Matrix k3 = field(y + h * (a31 * k1 + a32 * k2), t + c3 * h);
      const Matrix k4 = field(y + h * (a41 * k1 + a42 * k2 + a43 * k3), t + c4 * h);
      const Matrix k5 = field(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), t + c5 * h);
      const Matrix k6 =
          field(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), t + h);
      const Matrix y_new = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
      const double t_new = std::min(1.0, t + h);
      const Matrix k7 = field(y_new, t_new);
      const Matrix err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
      const Matrix sc = (solver.abs_tol +
                         solver.rel_tol * y.cwiseAbs().cwiseMax(y_new.cwiseAbs()).array())
                            .matrix();
      const double norm =
          std::sqrt((err.array() / sc.array()).square().mean());
      if (!std::isfinite(norm)) {
        throw SolverError("adaptive solver produced a non-finite error estimate at t = " +
                          std::to_string(t));
      }
      if (norm <= 1.0) {
        y = y_new;
        t = t_new;
        k1 = k7;
        ++out.accepted_steps;
        require_finite(y, t);
      } else {
        ++out.rejected_steps;
      }
      const double factor =
          norm == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(norm, -0.2), 0.2, 5.0);
      h *= factor;
    }
  }
  out.y1 = y;
  out.classes = argmax_classes(expectation(y, 1.0), k);
  ++out.evaluations;
  return out;
}

IntegrationResult integrate(const Matrix& u, const Matrix* context, const LogitNetwork& net,
                            const SolverConfig& solver) {
  ad::NoGradGuard guard;
  const Var ctx = context != nullptr ? ad::constant(*context) : Var();
  const ExpectationFn fn = [&](const Matrix& y, double t) {
    return predict_expectation(ad::constant(y), Eigen::VectorXd::Constant(y.cols(), t),
                               context != nullptr ? &ctx : nullptr, net)
        .value();
  };
  return integrate(u, fn, net.categories(), solver);
}

}  // namespace flowssn::cont
