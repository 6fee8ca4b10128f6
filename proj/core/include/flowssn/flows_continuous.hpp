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

// Continuous-time sampling along the linear path y_t = (1 - t) u + t y.
//
// The sampler carries (y_t, u) in pairs: the drift is E[y | y_t] - u with u the
// base draw the solve started from, so a constant expectation y* is reached
// exactly at t = 1 by any Euler grid.

#pragma once

#include "flowssn/autodiff.hpp"

#include <Eigen/Dense>

#include <functional>
#include <stdexcept>
#include <string>

namespace flowssn::cont {

using ad::Matrix;
using ad::Var;

/// Logit-producing network over flat (k*d, S) fields, one time value per column.
class LogitNetwork {
 public:
  virtual ~LogitNetwork() = default;
  /// context, when present, is (context_rows, S).
  virtual Var logits(const Var& y_t, const Eigen::VectorXd& t, const Var* context) const = 0;
  virtual int categories() const = 0;
};

struct PathPoint {
  Var y_t;
  Eigen::VectorXd t;
  Var u;
};

/// (1 - t) u + t y with one t per column (or a single t for every column).
/// Throws std::invalid_argument for t outside [0, 1] or mismatched shapes.
PathPoint interpolate(const Var& u, const Matrix& y, const Eigen::VectorXd& t);
PathPoint interpolate(const Var& u, const Matrix& y, double t);

/// expectation - u. Throws std::invalid_argument on shape mismatch.
Matrix velocity(const Matrix& expectation, const Matrix& u);

/// softmax over categories of the network logits; columns sum to 1 per pixel.
Var predict_expectation(const Var& y_t, const Eigen::VectorXd& t, const Var* context,
                        const LogitNetwork& net);

enum class SolverMethod { kEuler, kDopri5 };

struct SolverConfig {
  SolverMethod method = SolverMethod::kEuler;
  int steps = 50;
  double abs_tol = 1e-6;
  double rel_tol = 1e-6;
  int max_steps = 100000;

  /// Throws std::invalid_argument unless steps >= 1 and tolerances > 0.
  void validate() const;
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IntegrationResult {
  Matrix y1;                // (k*d, S) final state
  Eigen::MatrixXi classes;  // (d, S) argmax of E[y | y_1]
  int evaluations = 0;      // network calls
  int accepted_steps = 0;
  int rejected_steps = 0;
};

/// Expectation oracle used by the solver: (y_t, t) -> E[y | y_t], both (k*d, S).
using ExpectationFn = std::function<Matrix(const Matrix& y_t, double t)>;

/// Solves dy/dt = E[y | y_t] - u from y_0 = u to t = 1.
IntegrationResult integrate(const Matrix& u, const ExpectationFn& expectation, int k,
                            const SolverConfig& solver);
/// Network-driven solve; the network parameters are read only.
IntegrationResult integrate(const Matrix& u, const Matrix* context, const LogitNetwork& net,
                            const SolverConfig& solver);

/// Per-pixel argmax over categories for flat (k*d, S) fields; returns (d, S).
Eigen::MatrixXi argmax_classes(const Matrix& fields, int k);

}  // namespace flowssn::cont
