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

#include "flowssn/datagen.hpp"
#include "flowssn/metrics.hpp"
#include "flowssn/rank_analysis.hpp"
#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace flowssn::datagen {
namespace {

namespace fs = std::filesystem;
using testing::read_file;
using testing::scratch_dir;

int config_index(const QuadrantStates& s) {
  int idx = 0;
  for (auto q : s) idx = idx * kStateCount + static_cast<int>(q);
  return idx;
}

QuadrantStates config_states(int idx) {
  QuadrantStates s{};
  for (int q = kQuadrantCount - 1; q >= 0; --q) {
    s[static_cast<std::size_t>(q)] = static_cast<QuadrantState>(idx % kStateCount);
    idx /= kStateCount;
  }
  return s;
}

// Sample covariance (1/N normalisation) of N rendered images, computed from the
// empirical configuration frequencies; identical to averaging over the images.
Eigen::MatrixXd empirical_covariance(const TransitionMatrix& trans, const Distribution4& init,
                                     const ShapeAtlas& atlas, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> counts(256, 0);
  for (int i = 0; i < n; ++i) ++counts[config_index(markovshapes_sample_states(rng, trans, init))];
  const int d = atlas.pixel_count();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(d, d);
  for (int c = 0; c < 256; ++c) {
    if (counts[c] == 0) continue;
    const Eigen::VectorXd x = render_foreground(config_states(c), atlas);
    const double f = static_cast<double>(counts[c]) / n;
    mean += f * x;
    second += f * x * x.transpose();
  }
  return second - mean * mean.transpose();
}

TEST(TransitionMatrix, MarkovShapesMatrixIsDoublyStochastic) {
  const auto t = TransitionMatrix::markov_shapes();
  Eigen::Matrix4d expected;
  expected << 0.25, 0.25, 0.25, 0.25,  //
      0.25, 3.0 / 40, 27.0 / 80, 27.0 / 80,  //
      0.25, 27.0 / 80, 3.0 / 40, 27.0 / 80,  //
      0.25, 27.0 / 80, 27.0 / 80, 3.0 / 40;
  EXPECT_LT((t.entries() - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NO_THROW(TransitionMatrix{expected});
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(t.entries().row(i).sum(), 1.0, 1e-12);
    EXPECT_NEAR(t.entries().col(i).sum(), 1.0, 1e-12);
  }
}

TEST(TransitionMatrix, RejectsMatricesThatAreNotDoublyStochastic) {
  Eigen::Matrix4d row_only = Eigen::Matrix4d::Zero();
  row_only.col(0).setOnes();  // rows sum to 1, columns do not
  EXPECT_THROW(TransitionMatrix{row_only}, std::invalid_argument);
  Eigen::Matrix4d negative = Eigen::Matrix4d::Identity();
  negative(0, 0) = 1.5;
  negative(0, 1) = -0.5;
  EXPECT_THROW(TransitionMatrix{negative}, std::invalid_argument);
}

TEST(MarkovShapes, RejectsInitialDistributionNotSummingToOne) {
  Rng rng(0);
  const auto atlas = ShapeAtlas::standard(8);
  EXPECT_THROW(markovshapes_sample(rng, TransitionMatrix::markov_shapes(), atlas,
                                   Distribution4{0.5, 0.5, 0.5, 0.0}),
               std::invalid_argument);
  EXPECT_NO_THROW(markovshapes_sample(rng, TransitionMatrix::markov_shapes(), atlas,
                                      Distribution4{0.1, 0.2, 0.3, 0.4 + 5e-10}));
}

TEST(MarkovShapes, SampleIsBinaryLabelMapOfExpectedShape) {
  Rng rng(3);
  const auto lm =
      markovshapes_sample(rng, TransitionMatrix::markov_shapes(), ShapeAtlas::standard(8));
  EXPECT_EQ(lm.k, 2);
  EXPECT_EQ(lm.height, 16);
  EXPECT_EQ(lm.width, 16);
  EXPECT_EQ(lm.values.size(), 2u * 256u);
  EXPECT_TRUE(lm.valid());
}

TEST(MarkovShapes, FixedSeedGivesIdenticalMaps) {
  const auto atlas = ShapeAtlas::standard(8);
  Rng a(42), b(42);
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(markovshapes_sample(a, TransitionMatrix::markov_shapes(), atlas).values,
              markovshapes_sample(b, TransitionMatrix::markov_shapes(), atlas).values);
  }
}

TEST(MarkovShapes, QuadrantStatesAreStampedInTraversalOrder) {
  const auto atlas = ShapeAtlas::standard(8);
  const QuadrantStates s{QuadrantState::kSquare, QuadrantState::kEmpty, QuadrantState::kEmpty,
                         QuadrantState::kDot};
  const LabelMap lm = render_label(s, atlas);
  auto quadrant_sum = [&](int qy, int qx) {
    int total = 0;
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) total += lm.at(1, (qy * 8 + y) * 16 + qx * 8 + x);
    }
    return total;
  };
  EXPECT_EQ(quadrant_sum(0, 0), 36);  // 6x6 square
  EXPECT_EQ(quadrant_sum(0, 1), 0);
  EXPECT_EQ(quadrant_sum(1, 0), 0);
  EXPECT_EQ(quadrant_sum(1, 1), 4);  // 2x2 dot
}

TEST(MarkovShapes, UniformInitKeepsEveryQuadrantMarginalUniform) {
  const int n = 100000;
  Rng rng(11);
  std::array<std::array<int, 4>, 4> hist{};
  for (int i = 0; i < n; ++i) {
    const auto s = markovshapes_sample_states(rng, TransitionMatrix::markov_shapes(), kUniformInit);
    for (int q = 0; q < 4; ++q) ++hist[q][static_cast<int>(s[q])];
  }
  const double se = std::sqrt(0.25 * 0.75 / n);
  for (int q = 0; q < 4; ++q) {
    for (int s = 0; s < 4; ++s) {
      EXPECT_LT(std::abs(hist[q][s] / static_cast<double>(n) - 0.25), 4.0 * se)
          << "quadrant " << q << " state " << s;
    }
  }
}

TEST(MarkovShapesEnumerate, ProbabilitiesSumToOne) {
  const auto all = markovshapes_enumerate(TransitionMatrix::markov_shapes());
  ASSERT_EQ(all.size(), 256u);
  double total = 0.0;
  for (const auto& c : all) total += c.probability;
  EXPECT_NEAR(total, 1.0, 1e-12);

  Eigen::Matrix4d m;
  m << 0.1, 0.2, 0.3, 0.4, 0.4, 0.1, 0.2, 0.3, 0.3, 0.4, 0.1, 0.2, 0.2, 0.3, 0.4, 0.1;
  const auto other = markovshapes_enumerate(TransitionMatrix(m), Distribution4{0.7, 0.1, 0.1, 0.1});
  total = 0.0;
  for (const auto& c : other) total += c.probability;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(MarkovShapesEnumerate, DeterministicChainHasSingleConfiguration) {
  const auto all =
      markovshapes_enumerate(TransitionMatrix::identity(), Distribution4{1.0, 0.0, 0.0, 0.0});
  int nonzero = 0;
  for (const auto& c : all) {
    if (c.probability > 0.0) {
      ++nonzero;
      EXPECT_EQ(c.probability, 1.0);
      for (auto s : c.states) EXPECT_EQ(s, QuadrantState::kEmpty);
    }
  }
  EXPECT_EQ(nonzero, 1);
}

TEST(MarkovShapesEnumerate, AllEmptyProbabilityIsOneIn256) {
  for (const auto& c : markovshapes_enumerate(TransitionMatrix::markov_shapes())) {
    bool all_empty = true;
    for (auto s : c.states) all_empty = all_empty && s == QuadrantState::kEmpty;
    if (all_empty) {
      EXPECT_NEAR(c.probability, 1.0 / 256.0, 1e-15);
    }
  }
}

TEST(MarkovShapesCovariance, ExactCovarianceHasRankTwelve) {
  const auto mp = markovshapes_exact_covariance(TransitionMatrix::markov_shapes(), kUniformInit,
                                                ShapeAtlas::standard(8));
  EXPECT_EQ(rank::numerical_rank(mp.covariance, 1e-8), 12);
}

TEST(MarkovShapesCovariance, IsSymmetricPsdWithBernoulliDiagonal) {
  const auto mp = markovshapes_exact_covariance(TransitionMatrix::markov_shapes(), kUniformInit,
                                                ShapeAtlas::standard(8));
  const auto& c = mp.covariance;
  EXPECT_LT((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-10);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
  EXPECT_GT(es.eigenvalues().minCoeff(), -1e-10);
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    const double p = mp.mean(i);
    EXPECT_NEAR(c(i, i), p * (1.0 - p), 1e-12);
  }
}

TEST(MarkovShapesCovariance, RankTwelveForEveryQuadrantSize) {
  for (int q : {4, 6, 8, 10, 12}) {
    const auto mp = markovshapes_exact_covariance(TransitionMatrix::markov_shapes(), kUniformInit,
                                                  ShapeAtlas::standard(q));
    EXPECT_EQ(rank::numerical_rank(mp.covariance, 1e-8), 12) << "quadrant size " << q;
  }
}

TEST(MarkovShapesCovariance, RankTwelveForRandomAffinelyIndependentAtlas) {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    std::array<std::vector<std::uint8_t>, 3> templates;
    for (auto& t : templates) {
      t.resize(16);
      for (auto& v : t) v = uniform01(rng) < 0.5 ? 1 : 0;
    }
    try {
      const ShapeAtlas atlas(4, templates);
      const auto mp =
          markovshapes_exact_covariance(TransitionMatrix::markov_shapes(), kUniformInit, atlas);
      EXPECT_EQ(rank::numerical_rank(mp.covariance, 1e-8), 12);
    } catch (const std::invalid_argument&) {
      // Rare dependent draw; the constructor rejects it.
    }
  }
}

TEST(ShapeAtlas, RejectsAffinelyDependentTemplates) {
  const auto standard = ShapeAtlas::standard(8);
  std::array<std::vector<std::uint8_t>, 3> same;
  const auto sq = standard.mask(QuadrantState::kSquare);
  for (auto& t : same) t.assign(sq.begin(), sq.end());
  EXPECT_THROW(ShapeAtlas(8, same), std::invalid_argument);
  std::array<std::vector<std::uint8_t>, 3> with_empty = same;
  with_empty[1].assign(64, 0);
  EXPECT_THROW(ShapeAtlas(8, with_empty), std::invalid_argument);
  EXPECT_THROW(ShapeAtlas::standard(5), std::invalid_argument);
}

TEST(MarkovShapesCovariance, IdentityChainMatchesMonteCarloWithinThreeStandardErrors) {
  const auto atlas = ShapeAtlas::standard(8);
  const auto trans = TransitionMatrix::identity();
  const auto mp = markovshapes_exact_covariance(trans, kUniformInit, atlas);
  const Eigen::MatrixXd mc = empirical_covariance(trans, kUniformInit, atlas, 1000000, 2024);

  // Per-entry standard error of the product (x_i - mu_i)(x_j - mu_j) under the exact law.
  const int d = atlas.pixel_count();
  Eigen::MatrixXd fourth = Eigen::MatrixXd::Zero(d, d);
  for (const auto& c : markovshapes_enumerate(trans, kUniformInit)) {
    if (c.probability == 0.0) continue;
    const Eigen::VectorXd z = render_foreground(c.states, atlas) - mp.mean;
    const Eigen::VectorXd z2 = z.cwiseProduct(z);
    fourth += c.probability * z2 * z2.transpose();
  }
  const Eigen::MatrixXd var = fourth - mp.covariance.cwiseProduct(mp.covariance);
  int violations = 0;
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const double se = std::sqrt(std::max(var(i, j), 0.0) / 1e6);
      // The centring term mean_i * mean_j of the sample covariance is second order,
      // of scale sqrt(C_ii C_jj) / N; it is all that remains where the linear term
      // vanishes (p = 1/2 pixels), so allow a generous multiple of it on top.
      const double second_order =
          16.0 * std::sqrt(mp.covariance(i, i) * mp.covariance(j, j)) / 1e6;
      if (std::abs(mc(i, j) - mp.covariance(i, j)) > 3.0 * se + second_order + 1e-12) ++violations;
    }
  }
  EXPECT_EQ(violations, 0);
}

TEST(MarkovShapesCovariance, MonteCarloErrorShrinksAtRootNRate) {
  const auto atlas = ShapeAtlas::standard(8);
  const auto trans = TransitionMatrix::markov_shapes();
  const auto exact = markovshapes_exact_covariance(trans, kUniformInit, atlas).covariance;
  double small = 0.0, large = 0.0;
  const int reps = 12;
  for (int r = 0; r < reps; ++r) {
    small += (empirical_covariance(trans, kUniformInit, atlas, 250000, 100 + r) - exact).norm();
    large += (empirical_covariance(trans, kUniformInit, atlas, 1000000, 500 + r) - exact).norm();
  }
  const double ratio = small / large;
  EXPECT_GE(ratio, 1.5);
  EXPECT_LE(ratio, 2.7);
}

TEST(MarkovShapesCovariance, EmpiricalCovarianceFromImagesMatchesFrequencyShortcut) {
  // The frequency shortcut used above must agree with the plain image average.
  const auto atlas = ShapeAtlas::standard(4);
  const auto trans = TransitionMatrix::markov_shapes();
  const int n = 2000;
  Rng rng(77);
  Eigen::MatrixXd x(atlas.pixel_count(), n);
  for (int i = 0; i < n; ++i) {
    x.col(i) = render_foreground(markovshapes_sample_states(rng, trans, kUniformInit), atlas);
  }
  const Eigen::VectorXd mean = x.rowwise().mean();
  const Eigen::MatrixXd centred = x.colwise() - mean;
  const Eigen::MatrixXd direct = centred * centred.transpose() / n;
  EXPECT_LT((direct - empirical_covariance(trans, kUniformInit, atlas, n, 77)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(Multirater, EqualThresholdsGiveIdenticalRaterMasks) {
  MultiraterConfig c;
  c.count = 20;
  c.threshold_spread = 0.0;
  c.seed = 9;
  const Dataset ds = multirater_dataset(c);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    metrics::SampleSet set;
    for (int a = 0; a < c.raters; ++a) {
      EXPECT_EQ(ds.label(i, a).values, ds.label(i, 0).values);
      set.references.push_back(ds.label(i, a));
    }
    set.predictions = set.references;
    EXPECT_EQ(metrics::ged_squared(set).reference_term, 0.0);
  }
}

TEST(Multirater, OrderedThresholdsGiveNestedMasks) {
  Rng rng(4);
  MultiraterConfig c;
  const auto field = multirater_field(rng, c);
  const LabelMap low = threshold_mask(field, 0.3, c.height, c.width);
  const LabelMap high = threshold_mask(field, 0.6, c.height, c.width);
  for (int j = 0; j < low.pixels(); ++j) {
    if (high.at(1, j)) {
      EXPECT_TRUE(low.at(1, j));
    }
  }

  c.count = 50;
  c.seed = 2;
  const Dataset ds = multirater_dataset(c);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto labels = ds.record(i).labels;
    std::sort(labels.begin(), labels.end(), [](const LabelMap& a, const LabelMap& b) {
      return std::count(a.values.begin() + a.pixels(), a.values.end(), 1) >
             std::count(b.values.begin() + b.pixels(), b.values.end(), 1);
    });
    for (std::size_t a = 1; a < labels.size(); ++a) {
      for (int j = 0; j < labels[a].pixels(); ++j) {
        if (labels[a].at(1, j)) {
          ASSERT_TRUE(labels[a - 1].at(1, j));
        }
      }
    }
  }
}

TEST(Multirater, RejectsFewerThanTwoRaters) {
  MultiraterConfig c;
  c.raters = 1;
  EXPECT_THROW(multirater_dataset(c), std::invalid_argument);
}

TEST(Multirater, FixedSeedGivesByteIdenticalFiles) {
  MultiraterConfig c;
  c.count = 30;
  c.seed = 17;
  const fs::path a = scratch_dir("mr_a");
  const fs::path b = scratch_dir("mr_b");
  multirater_generate(c, a);
  multirater_generate(c, b);
  for (const char* f : {"manifest.json", "images.bin", "labels.bin"}) {
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(DatasetIo, MarkovShapesRoundTripIsBitIdentical) {
  Dataset ds = markovshapes_dataset({200, 8, 3});
  const fs::path dir = scratch_dir("rt");
  dataset_write(dir, ds);
  const Dataset back = dataset_read(dir / "manifest.json");
  EXPECT_EQ(back.images, ds.images);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.manifest.image_shape, (std::array<int, 3>{1, 16, 16}));
  EXPECT_EQ(back.manifest.label_shape, (std::array<int, 3>{2, 16, 16}));
  EXPECT_EQ(back.manifest.rng_seed, 3u);
  const Dataset by_dir = dataset_read(dir);
  EXPECT_EQ(by_dir.labels, ds.labels);
  fs::remove_all(dir);
}

TEST(DatasetIo, TruncatedFileNamesPathAndByteCounts) {
  Dataset ds = markovshapes_dataset({20, 4, 0});
  const fs::path dir = scratch_dir("trunc");
  dataset_write(dir, ds);
  const auto size = fs::file_size(dir / "labels.bin");
  fs::resize_file(dir / "labels.bin", size - 7);
  try {
    dataset_read(dir);
    FAIL() << "expected TruncatedFileError";
  } catch (const TruncatedFileError& e) {
    EXPECT_EQ(e.expected_bytes(), size);
    EXPECT_EQ(e.actual_bytes(), size - 7);
    EXPECT_EQ(e.path().filename(), "labels.bin");
    const std::string what = e.what();
    EXPECT_NE(what.find("labels.bin"), std::string::npos);
    EXPECT_NE(what.find(std::to_string(size)), std::string::npos);
    EXPECT_NE(what.find(std::to_string(size - 7)), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, MalformedManifestAndDtypeMismatchAreDistinctErrors) {
  Dataset ds = markovshapes_dataset({5, 4, 0});
  const fs::path dir = scratch_dir("bad");
  dataset_write(dir, ds);
  const std::string good = read_file(dir / "manifest.json");

  { std::ofstream(dir / "manifest.json") << "{ not json"; }
  EXPECT_THROW(dataset_read(dir), ManifestError);

  auto j = nlohmann::json::parse(good);
  j.erase("image_shape");
  { std::ofstream(dir / "manifest.json") << j.dump(); }
  EXPECT_THROW(dataset_read(dir), ManifestError);

  j = nlohmann::json::parse(good);
  j["dtypes"]["images"] = "float64";
  { std::ofstream(dir / "manifest.json") << j.dump(); }
  try {
    dataset_read(dir);
    FAIL() << "expected DtypeMismatchError";
  } catch (const DtypeMismatchError& e) {
    EXPECT_EQ(e.path().filename(), "images.bin");
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, FourAnnotatorsYieldFourLabelMapsPerRecord) {
  MultiraterConfig c;
  c.count = 6;
  c.raters = 4;
  const fs::path dir = scratch_dir("ann");
  multirater_generate(c, dir);
  const Dataset ds = dataset_read(dir);
  EXPECT_EQ(ds.manifest.annotators_per_image, 4);
  std::size_t records = 0;
  for (const auto& rec : ds) {
    EXPECT_EQ(rec.labels.size(), 4u);
    EXPECT_EQ(rec.image.size(), 256u);
    ++records;
  }
  EXPECT_EQ(records, 6u);
  fs::remove_all(dir);
}

TEST(DatasetIo, GenerationIsPureFunctionOfSeedAndConfig) {
  const Dataset a = markovshapes_dataset({100, 8, 5});
  const Dataset b = markovshapes_dataset({100, 8, 5});
  const Dataset c = markovshapes_dataset({100, 8, 6});
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.labels, c.labels);
}

TEST(LabelMap, ClassesRoundTrip) {
  const std::vector<int> cls{0, 2, 1, 1, 0, 2};
  const LabelMap lm = LabelMap::from_classes(cls, 3, 2, 3);
  EXPECT_TRUE(lm.valid());
  EXPECT_EQ(lm.classes(), cls);
  const std::vector<int> bad{0, 3, 0, 0, 0, 0};
  EXPECT_THROW(LabelMap::from_classes(bad, 3, 2, 3), std::out_of_range);
}

}  // namespace
}  // namespace flowssn::datagen
