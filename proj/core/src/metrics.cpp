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

#include "flowssn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <stdexcept>

namespace flowssn::metrics {

namespace {

void require_same_size(std::size_t a, std::size_t b) {
  if (a != b) {
    throw std::invalid_argument("mask sizes differ (" + std::to_string(a) + " vs " +
                                std::to_string(b) + ")");
  }
}

struct Counts {
  std::int64_t inter = 0;
  std::int64_t a = 0;
  std::int64_t b = 0;
};

Counts class_counts(const LabelMap& x, const LabelMap& y, int c) {
  Counts n;
  const std::size_t d = x.pixels();
  const std::size_t off = static_cast<std::size_t>(c) * d;
  for (std::size_t j = 0; j < d; ++j) {
    const bool p = x.values[off + j] != 0;
    const bool q = y.values[off + j] != 0;
    n.inter += (p && q) ? 1 : 0;
    n.a += p ? 1 : 0;
    n.b += q ? 1 : 0;
  }
  return n;
}

double iou_from(const Counts& n) {
  const std::int64_t uni = n.a + n.b - n.inter;
  return uni == 0 ? 1.0 : static_cast<double>(n.inter) / static_cast<double>(uni);
}

double dice_from(const Counts& n) {
  const std::int64_t tot = n.a + n.b;
  return tot == 0 ? 1.0 : 2.0 * static_cast<double>(n.inter) / static_cast<double>(tot);
}

template <typename F>
double over_classes(const LabelMap& a, const LabelMap& b, F f) {
  if (a.k != b.k || a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("label maps have different shapes");
  }
  if (a.k < 2) throw std::invalid_argument("label maps need at least two classes");
  double total = 0.0;
  for (int c = 1; c < a.k; ++c) total += f(class_counts(a, b, c));
  return total / (a.k - 1);
}

Eigen::MatrixXd distances(const std::vector<LabelMap>& a, const std::vector<LabelMap>& b) {
  Eigen::MatrixXd d(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = distance(a[i], b[j]);
    }
  }
  return d;
}

}  // namespace

double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  require_same_size(a.size(), b.size());
  Counts n;
  for (std::size_t i = 0; i < a.size(); ++i) {
    n.inter += (a[i] && b[i]) ? 1 : 0;
    n.a += a[i] ? 1 : 0;
    n.b += b[i] ? 1 : 0;
  }
  return iou_from(n);
}

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  require_same_size(a.size(), b.size());
  Counts n;
  for (std::size_t i = 0; i < a.size(); ++i) {
    n.inter += (a[i] && b[i]) ? 1 : 0;
    n.a += a[i] ? 1 : 0;
    n.b += b[i] ? 1 : 0;
  }
  return dice_from(n);
}

double iou(const LabelMap& a, const LabelMap& b) { return over_classes(a, b, iou_from); }
double dice(const LabelMap& a, const LabelMap& b) { return over_classes(a, b, dice_from); }

void SampleSet::validate() const {
  if (predictions.empty() || references.empty()) {
    throw std::invalid_argument("sample set needs at least one prediction and one reference");
  }
  const LabelMap& f = predictions.front();
  auto same = [&](const LabelMap& m) {
    return m.k == f.k && m.height == f.height && m.width == f.width;
  };
  if (!std::all_of(predictions.begin(), predictions.end(), same) ||
      !std::all_of(references.begin(), references.end(), same)) {
    throw std::invalid_argument("sample set maps do not share one shape");
  }
}

GedResult ged_squared(const SampleSet& set) {
  set.validate();
  GedResult r;
  r.cross = distances(set.references, set.predictions).mean();
  r.diversity = distances(set.predictions, set.predictions).mean();
  r.reference_term = distances(set.references, set.references).mean();
  r.ged_squared = 2.0 * r.cross - r.diversity - r.reference_term;
  return r;
}

std::vector<int> linear_sum_assignment(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw std::invalid_argument("assignment cost matrix must be square");
  if (n == 0) return {};
  // Shortest augmenting path with row/column potentials, 1-based internally.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(n, -1);
  for (int j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

double hm_iou(const SampleSet& set) {
  set.validate();
  const std::size_t m = set.predictions.size();
  const std::size_t n = set.references.size();
  std::vector<LabelMap> tiled;
  tiled.reserve(m);
  for (std::size_t i = 0; i < m; ++i) tiled.push_back(set.references[i % n]);
  Eigen::MatrixXd score(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      score(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          iou(set.predictions[i], tiled[j]);
    }
  }
  const Eigen::MatrixXd cost = (1.0 - score.array()).matrix();
  const std::vector<int> a = linear_sum_assignment(cost);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) total += score(static_cast<Eigen::Index>(i), a[i]);
  return total / static_cast<double>(m);
}

double mean_dice(const SampleSet& set) {
  set.validate();
  double total = 0.0;
  for (const auto& p : set.predictions) {
    for (const auto& r : set.references) total += dice(p, r);
  }
  return total / static_cast<double>(set.predictions.size() * set.references.size());
}

Eigen::VectorXd uncertainty_map(const SampleSet& set) {
  if (set.predictions.empty()) throw std::invalid_argument("uncertainty_map: no predictions");
  const LabelMap& f = set.predictions.front();
  const std::size_t d = f.pixels();
  const double m = static_cast<double>(set.predictions.size());
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t j = 0; j < d; ++j) {
    double h = 0.0;
    for (int c = 0; c < f.k; ++c) {
      double count = 0.0;
      for (const auto& p : set.predictions) count += p.at(c, j);
      const double q = count / m;
      if (q > 0.0) h -= q * std::log2(q);
    }
    out(static_cast<Eigen::Index>(j)) = h;
  }
  return out;
}

void write_metric_csv(std::ostream& out, const std::vector<MetricReport>& rows) {
  const bool bpd = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.has_bpd; });
  const int m = rows.empty() ? 0 : rows.front().m;
  out << "dataset,checkpoint,M,N,ged16,ged" << m << ",diversity,dice,hm_iou,seed";
  if (bpd) out << ",bpd";
  out << '\n' << std::setprecision(12);
  for (const auto& r : rows) {
    out << r.dataset << ',' << r.checkpoint << ',' << r.m << ',' << r.n << ',' << r.ged16 << ','
        << r.ged_m << ',' << r.diversity << ',' << r.dice << ',' << r.hm_iou << ',' << r.seed;
    if (bpd) out << ',' << r.bpd;
    out << '\n';
  }
}

}  // namespace flowssn::metrics
