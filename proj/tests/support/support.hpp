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

// Oracles and helpers shared by the unit and acceptance tests.

#pragma once

#include "flowssn/autodiff.hpp"
#include "flowssn/datagen.hpp"
#include "flowssn/networks.hpp"
#include "flowssn/random.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace flowssn::testing {

struct GradCheck {
  double rel_error = 0.0;  // |analytic - numeric| / max(|analytic|, |numeric|), norm-wise
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  Eigen::Index entries = 0;
};

/// Central differences of a scalar function of the given leaves against reverse mode.
GradCheck gradient_check(const std::vector<ad::Var>& leaves, const std::function<ad::Var()>& f,
                         double step = 1e-3);

std::vector<ad::Var> leaves_of(nn::ParameterSet& ps);

/// Fills every parameter with N(0, scale^2) draws.
void randomise(nn::ParameterSet& ps, Rng& rng, double scale);

/// Binary masks from explicit 0/1 foreground values.
datagen::LabelMap mask(const std::vector<int>& foreground, int height, int width);
datagen::LabelMap random_mask(Rng& rng, int height, int width, double p);

/// 1 - IoU counted directly from the foreground bits, empty/empty = 0.
double brute_distance(const datagen::LabelMap& a, const datagen::LabelMap& b);

struct BruteGed {
  double ged_squared;
  double diversity;
};
BruteGed brute_ged(const std::vector<datagen::LabelMap>& predictions,
                   const std::vector<datagen::LabelMap>& references);

/// Best mean IoU over all permutations after tiling the references to M.
double brute_hm_iou(const std::vector<datagen::LabelMap>& predictions,
                    const std::vector<datagen::LabelMap>& references);

/// Minimum assignment cost by exhaustive search.
double brute_assignment_cost(const Eigen::MatrixXd& cost);

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& tag);

std::string read_file(const std::filesystem::path& p);

/// log N(x; mean, cov) by Cholesky.
double dense_gaussian_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                                  const Eigen::MatrixXd& cov);

}  // namespace flowssn::testing
