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

#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <unistd.h>

namespace flowssn::testing {

GradCheck gradient_check(const std::vector<ad::Var>& leaves, const std::function<ad::Var()>& f,
                         double step) {
  for (auto leaf : leaves) leaf.zero_grad();
  const ad::Var loss = f();
  ad::backward(loss);

  std::vector<double> analytic;
  std::vector<double> numeric;
  for (auto leaf : leaves) {
    const Eigen::MatrixXd g = leaf.grad().size() == 0
                                  ? Eigen::MatrixXd::Zero(leaf.rows(), leaf.cols())
                                  : Eigen::MatrixXd(leaf.grad());
    for (Eigen::Index i = 0; i < leaf.value().size(); ++i) analytic.push_back(g.data()[i]);
  }
  {
    ad::NoGradGuard guard;
    for (auto leaf : leaves) {
      for (Eigen::Index i = 0; i < leaf.value().size(); ++i) {
        double& v = leaf.mutable_value().data()[i];
        const double saved = v;
        v = saved + step;
        const double up = f().scalar();
        v = saved - step;
        const double down = f().scalar();
        v = saved;
        numeric.push_back((up - down) / (2.0 * step));
      }
    }
  }
  for (auto leaf : leaves) leaf.zero_grad();

  GradCheck out;
  out.entries = static_cast<Eigen::Index>(analytic.size());
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  out.analytic_norm = std::sqrt(na);
  out.numeric_norm = std::sqrt(nn);
  out.rel_error = std::sqrt(diff) / std::max({out.analytic_norm, out.numeric_norm, 1e-12});
  return out;
}

std::vector<ad::Var> leaves_of(nn::ParameterSet& ps) {
  std::vector<ad::Var> out;
  for (std::size_t i = 0; i < ps.size(); ++i) out.push_back(ps.live(i));
  return out;
}

void randomise(nn::ParameterSet& ps, Rng& rng, double scale) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Eigen::MatrixXd& v = ps.live(i).mutable_value();
    v = scale * standard_normal(v.rows(), v.cols(), rng);
  }
}

datagen::LabelMap mask(const std::vector<int>& foreground, int height, int width) {
  if (static_cast<int>(foreground.size()) != height * width) {
    throw std::invalid_argument("mask: wrong pixel count");
  }
  return datagen::LabelMap::from_classes(foreground, 2, height, width);
}

datagen::LabelMap random_mask(Rng& rng, int height, int width, double p) {
  std::vector<int> fg(static_cast<std::size_t>(height * width));
  for (auto& v : fg) v = uniform01(rng) < p ? 1 : 0;
  return mask(fg, height, width);
}

double brute_distance(const datagen::LabelMap& a, const datagen::LabelMap& b) {
  int inter = 0, uni = 0;
  for (int j = 0; j < a.pixels(); ++j) {
    const bool x = a.at(1, j) != 0;
    const bool y = b.at(1, j) != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  if (uni == 0) return 0.0;
  return 1.0 - static_cast<double>(inter) / uni;
}

BruteGed brute_ged(const std::vector<datagen::LabelMap>& predictions,
                   const std::vector<datagen::LabelMap>& references) {
  auto mean_over = [](const auto& xs, const auto& ys) {
    double s = 0.0;
    for (const auto& x : xs) {
      for (const auto& y : ys) s += brute_distance(x, y);
    }
    return s / static_cast<double>(xs.size() * ys.size());
  };
  const double cross = mean_over(references, predictions);
  const double div = mean_over(predictions, predictions);
  const double ref = mean_over(references, references);
  return {2.0 * cross - div - ref, div};
}

double brute_hm_iou(const std::vector<datagen::LabelMap>& predictions,
                    const std::vector<datagen::LabelMap>& references) {
  const std::size_t m = predictions.size();
  std::vector<datagen::LabelMap> tiled;
  while (tiled.size() < m) {
    for (const auto& r : references) {
      if (tiled.size() < m) tiled.push_back(r);
    }
  }
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1.0;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += 1.0 - brute_distance(predictions[i], tiled[perm[i]]);
    best = std::max(best, s / static_cast<double>(m));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double brute_assignment_cost(const Eigen::MatrixXd& cost) {
  std::vector<int> perm(static_cast<std::size_t>(cost.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = INFINITY;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) s += cost(static_cast<Eigen::Index>(i), perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::filesystem::path scratch_dir(const std::string& tag) {
  static int counter = 0;
  const auto p = std::filesystem::temp_directory_path() /
                 ("flowssn_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                  std::to_string(counter++));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double dense_gaussian_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                                  const Eigen::MatrixXd& cov) {
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::VectorXd z = llt.matrixL().solve(x - mean);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double n = static_cast<double>(x.size());
  return -0.5 * z.squaredNorm() - 0.5 * logdet - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

}  // namespace flowssn::testing
