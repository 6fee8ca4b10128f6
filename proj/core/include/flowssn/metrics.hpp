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

// Stochastic segmentation metrics over sets of label maps. Distances use
// d = 1 - IoU; IoU and Dice of two empty masks are 1.

#pragma once

#include "flowssn/datagen.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace flowssn::metrics {

using datagen::LabelMap;

/// Binary mask IoU and Dice. Throws std::invalid_argument on size mismatch.
double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

/// Label-map IoU/Dice: the foreground class when k = 2, otherwise the mean over
/// classes 1..k-1.
double iou(const LabelMap& a, const LabelMap& b);
double dice(const LabelMap& a, const LabelMap& b);
inline double distance(const LabelMap& a, const LabelMap& b) { return 1.0 - iou(a, b); }

struct SampleSet {
  std::vector<LabelMap> predictions;  // M
  std::vector<LabelMap> references;   // N

  /// Throws std::invalid_argument unless both sets are non-empty and share (k, h, w).
  void validate() const;
};

struct GedResult {
  double ged_squared = 0.0;     // 2 E[d(y, y^)] - E[d(y^, y^')] - E[d(y, y')]
  double cross = 0.0;           // E[d(y, y^)] over all N*M pairs
  double diversity = 0.0;       // E[d(y^, y^')] over all M^2 ordered pairs
  double reference_term = 0.0;  // E[d(y, y')] over all N^2 ordered pairs
};

GedResult ged_squared(const SampleSet& set);

/// Minimum-cost perfect matching of a square cost matrix; entry i is the column
/// assigned to row i.
std::vector<int> linear_sum_assignment(const Eigen::MatrixXd& cost);

/// References are repeated ceil(M/N) times and truncated to M, then matched to the
/// predictions by minimum total (1 - IoU); returns the mean matched IoU.
double hm_iou(const SampleSet& set);

/// Mean Dice over all (prediction, reference) pairs.
double mean_dice(const SampleSet& set);

/// Per-pixel entropy (bits) of the class frequencies across predictions; length h*w.
Eigen::VectorXd uncertainty_map(const SampleSet& set);

struct MetricReport {
  std::string dataset;
  std::string checkpoint;
  int m = 0;
  int n = 0;
  double ged16 = 0.0;
  double ged_m = 0.0;
  double diversity = 0.0;
  double dice = 0.0;
  double hm_iou = 0.0;
  std::uint64_t seed = 0;
  double bpd = 0.0;
  bool has_bpd = false;
};

/// Header: dataset,checkpoint,M,N,ged16,ged<M>,diversity,dice,hm_iou,seed[,bpd].
void write_metric_csv(std::ostream& out, const std::vector<MetricReport>& rows);

}  // namespace flowssn::metrics
