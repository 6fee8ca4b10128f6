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

// Synthetic datasets: MarkovShapes (quadrant shapes driven by a 4-state Markov
// chain, with an exactly enumerable pixel covariance) and a multi-rater
// thresholding task, plus the on-disk dataset format shared by both.

#pragma once

#include "flowssn/random.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowssn::datagen {

enum class QuadrantState : int { kEmpty = 0, kSquare = 1, kPlus = 2, kDot = 3 };
inline constexpr int kStateCount = 4;
inline constexpr int kQuadrantCount = 4;

/// Row-stochastic and column-stochastic 4x4 matrix; T(i, j) = P(next = j | current = i).
class TransitionMatrix {
 public:
  /// Throws std::invalid_argument unless entries lie in [0, 1] and every row and
  /// column sums to 1 within 1e-12.
  explicit TransitionMatrix(const Eigen::Matrix4d& entries);

  /// The MarkovShapes matrix: uniform out of the empty state, self-transitions of
  /// 3/40 between shapes and 27/80 across shapes.
  static TransitionMatrix markov_shapes();
  static TransitionMatrix identity();

  const Eigen::Matrix4d& entries() const { return entries_; }
  double operator()(int from, int to) const { return entries_(from, to); }

 private:
  Eigen::Matrix4d entries_;
};

/// Per-quadrant binary templates for square, plus and dot; the empty state is
/// all zero. Templates are row-major q x q masks.
class ShapeAtlas {
 public:
  /// Standard templates for an even quadrant size q >= 4. At q = 8: a centred
  /// 6x6 square, a plus of two 2-pixel-wide bars of length 6, a 2x2 centre dot.
  static ShapeAtlas standard(int quadrant_size);

  /// Throws std::invalid_argument if the shapes are not affinely independent
  /// together with the empty template.
  ShapeAtlas(int quadrant_size, std::array<std::vector<std::uint8_t>, 3> templates);

  int quadrant_size() const { return quadrant_size_; }
  int image_side() const { return 2 * quadrant_size_; }
  int pixel_count() const { return image_side() * image_side(); }
  /// Template for a state; empty returns an all-zero mask.
  std::span<const std::uint8_t> mask(QuadrantState state) const;
  const std::vector<std::uint8_t>& empty_mask() const { return empty_; }

 private:
  int quadrant_size_;
  std::array<std::vector<std::uint8_t>, 3> templates_;
  std::vector<std::uint8_t> empty_;
};

using Distribution4 = std::array<double, kStateCount>;
inline constexpr Distribution4 kUniformInit{0.25, 0.25, 0.25, 0.25};

/// One-hot label field of shape (k, d) with d = height * width, row-major pixels.
struct LabelMap {
  int k = 2;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;  // index c * d + j

  int pixels() const { return height * width; }
  std::uint8_t at(int c, int j) const { return values[static_cast<std::size_t>(c) * pixels() + j]; }
  /// Per-pixel class index.
  std::vector<int> classes() const;
  /// Builds a one-hot map from per-pixel class indices.
  static LabelMap from_classes(std::span<const int> classes, int k, int height, int width);
  /// True when every pixel column is one-hot.
  bool valid() const;
};

using QuadrantStates = std::array<QuadrantState, kQuadrantCount>;

/// Renders the foreground channel (length (2q)^2) of a quadrant configuration.
/// Quadrants are placed row-major: top-left, top-right, bottom-left, bottom-right.
Eigen::VectorXd render_foreground(const QuadrantStates& states, const ShapeAtlas& atlas);
LabelMap render_label(const QuadrantStates& states, const ShapeAtlas& atlas);

/// Draws a quadrant configuration from the chain.
QuadrantStates markovshapes_sample_states(Rng& rng, const TransitionMatrix& trans,
                                          const Distribution4& init);

/// Draws one binary (k = 2) label map. Throws if init does not sum to 1 within 1e-9.
LabelMap markovshapes_sample(Rng& rng, const TransitionMatrix& trans, const ShapeAtlas& atlas,
                             const Distribution4& init = kUniformInit);

struct Configuration {
  QuadrantStates states;
  double probability;
};

/// All 256 quadrant configurations with their chain probabilities.
std::vector<Configuration> markovshapes_enumerate(const TransitionMatrix& trans,
                                                  const Distribution4& init = kUniformInit);

struct MomentPair {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// Exact mean and covariance of the foreground channel by enumeration.
MomentPair markovshapes_exact_covariance(const TransitionMatrix& trans,
                                         const Distribution4& init, const ShapeAtlas& atlas);

// ---------------------------------------------------------------------------
// On-disk datasets.

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& what, std::filesystem::path path)
      : std::runtime_error(what + " [" + path.string() + "]"), path_(std::move(path)) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

class ManifestError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

class TruncatedFileError : public DatasetError {
 public:
  TruncatedFileError(const std::filesystem::path& path, std::uintmax_t expected,
                     std::uintmax_t actual);
  std::uintmax_t expected_bytes() const { return expected_; }
  std::uintmax_t actual_bytes() const { return actual_; }

 private:
  std::uintmax_t expected_;
  std::uintmax_t actual_;
};

class DtypeMismatchError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

struct FileEntry {
  std::string role;  // "images" or "labels"
  std::string path;  // relative to the manifest directory
  std::uint64_t offset = 0;
  std::uint64_t bytes = 0;
};

struct DatasetManifest {
  std::string name;
  std::uint64_t image_count = 0;
  std::array<int, 3> image_shape{};  // (c, h, w)
  std::array<int, 3> label_shape{};  // (k, h, w)
  int annotators_per_image = 1;
  std::string image_dtype = "float32";
  std::string label_dtype = "uint8";
  std::string byte_order = "little";
  std::vector<FileEntry> files;
  std::uint64_t rng_seed = 0;
  std::string generator_config;  // JSON text of the generating configuration

  std::uint64_t image_elements() const;
  std::uint64_t label_elements() const;  // per annotator map
};

/// In-memory dataset: images (count, c, h, w) float32 and labels
/// (count, annotator, k, h, w) uint8, both C order.
struct Dataset {
  DatasetManifest manifest;
  std::vector<float> images;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return static_cast<std::size_t>(manifest.image_count); }
  std::span<const float> image(std::size_t i) const;
  LabelMap label(std::size_t i, int annotator) const;

  struct Record {
    std::span<const float> image;
    std::vector<LabelMap> labels;
  };
  Record record(std::size_t i) const;

  class Iterator {
   public:
    Iterator(const Dataset* ds, std::size_t i) : ds_(ds), i_(i) {}
    Record operator*() const { return ds_->record(i_); }
    Iterator& operator++() {
      ++i_;
      return *this;
    }
    bool operator!=(const Iterator& o) const { return i_ != o.i_; }
    bool operator==(const Iterator& o) const { return i_ == o.i_; }

   private:
    const Dataset* ds_;
    std::size_t i_;
  };
  Iterator begin() const { return {this, 0}; }
  Iterator end() const { return {this, size()}; }
};

/// Writes manifest.json, images.bin and labels.bin into dir (created if needed).
/// Fills the manifest's file list. Throws DatasetError on I/O failure.
void dataset_write(const std::filesystem::path& dir, Dataset& dataset);

/// Reads a dataset from a manifest path or its directory. Throws ManifestError,
/// TruncatedFileError or DtypeMismatchError naming the offending file.
Dataset dataset_read(const std::filesystem::path& manifest_or_dir);

struct MarkovShapesConfig {
  int count = 10000;
  int quadrant_size = 8;
  std::uint64_t seed = 0;
};

/// Generates a MarkovShapes dataset. Images hold the foreground channel as float.
Dataset markovshapes_dataset(const MarkovShapesConfig& config);

struct MultiraterConfig {
  int count = 1000;
  int height = 16;
  int width = 16;
  int raters = 4;
  int blobs = 3;
  double base_threshold_min = 0.35;
  double base_threshold_max = 0.65;
  double threshold_spread = 0.15;  // rater offsets ~ U(-spread, spread)
  std::uint64_t seed = 0;
};

/// Smooth random blob field in [0, 1] (peak normalised to 1).
std::vector<float> multirater_field(Rng& rng, const MultiraterConfig& config);
/// Foreground where field > threshold.
LabelMap threshold_mask(std::span<const float> field, double threshold, int height, int width);

/// Generates the multi-rater conditional task in memory.
Dataset multirater_dataset(const MultiraterConfig& config);
/// Generates and writes to dir.
Dataset multirater_generate(const MultiraterConfig& config, const std::filesystem::path& dir);

}  // namespace flowssn::datagen
