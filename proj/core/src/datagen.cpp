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

#include "flowssn/binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace flowssn::datagen {

namespace fs = std::filesystem;
using nlohmann::json;

TransitionMatrix::TransitionMatrix(const Eigen::Matrix4d& entries) : entries_(entries) {
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (!(entries(i, j) >= 0.0 && entries(i, j) <= 1.0)) {
        throw std::invalid_argument("transition matrix entries must lie in [0, 1]");
      }
    }
    if (std::abs(entries.row(i).sum() - 1.0) > 1e-12) {
      throw std::invalid_argument("transition matrix row " + std::to_string(i) +
                                  " does not sum to 1");
    }
    if (std::abs(entries.col(i).sum() - 1.0) > 1e-12) {
      throw std::invalid_argument("transition matrix column " + std::to_string(i) +
                                  " does not sum to 1 (not doubly stochastic)");
    }
  }
}

TransitionMatrix TransitionMatrix::markov_shapes() {
  const double q = 0.25;
  const double same = 3.0 / 40.0;
  const double other = 27.0 / 80.0;
  Eigen::Matrix4d t;
  t << q, q, q, q,          //
      q, same, other, other,  //
      q, other, same, other,  //
      q, other, other, same;
  return TransitionMatrix(t);
}

TransitionMatrix TransitionMatrix::identity() { return TransitionMatrix(Eigen::Matrix4d::Identity()); }

ShapeAtlas ShapeAtlas::standard(int q) {
  if (q < 4 || q % 2 != 0) {
    throw std::invalid_argument("quadrant size must be even and >= 4");
  }
  const int margin = q / 8;
  const int bar = 2 * std::max(1, q / 8);
  const int b0 = (q - bar) / 2;
  const int b1 = b0 + bar;
  std::array<std::vector<std::uint8_t>, 3> t;
  for (auto& m : t) m.assign(static_cast<std::size_t>(q) * q, 0);
  for (int y = 0; y < q; ++y) {
    for (int x = 0; x < q; ++x) {
      const bool inside = y >= margin && y < q - margin && x >= margin && x < q - margin;
      const bool hbar = y >= b0 && y < b1;
      const bool vbar = x >= b0 && x < b1;
      const std::size_t i = static_cast<std::size_t>(y) * q + x;
      t[0][i] = inside ? 1 : 0;
      t[1][i] = inside && (hbar || vbar) ? 1 : 0;
      t[2][i] = hbar && vbar ? 1 : 0;
    }
  }
  return ShapeAtlas(q, std::move(t));
}

ShapeAtlas::ShapeAtlas(int quadrant_size, std::array<std::vector<std::uint8_t>, 3> templates)
    : quadrant_size_(quadrant_size),
      templates_(std::move(templates)),
      empty_(static_cast<std::size_t>(quadrant_size) * quadrant_size, 0) {
  const auto n = static_cast<Eigen::Index>(empty_.size());
  Eigen::MatrixXd diffs(n, 3);
  for (int s = 0; s < 3; ++s) {
    if (static_cast<Eigen::Index>(templates_[s].size()) != n) {
      throw std::invalid_argument("shape template has wrong size");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      if (templates_[s][i] > 1) throw std::invalid_argument("shape templates must be binary");
      diffs(i, s) = templates_[s][i];
    }
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(diffs);
  if (lu.rank() != 3) {
    throw std::invalid_argument("shape templates are not affinely independent");
  }
}

std::span<const std::uint8_t> ShapeAtlas::mask(QuadrantState state) const {
  if (state == QuadrantState::kEmpty) return empty_;
  return templates_[static_cast<int>(state) - 1];
}

std::vector<int> LabelMap::classes() const {
  std::vector<int> out(static_cast<std::size_t>(pixels()), 0);
  for (int j = 0; j < pixels(); ++j) {
    for (int c = 0; c < k; ++c) {
      if (at(c, j) != 0) {
        out[j] = c;
        break;
      }
    }
  }
  return out;
}

LabelMap LabelMap::from_classes(std::span<const int> classes, int k, int height, int width) {
  LabelMap m;
  m.k = k;
  m.height = height;
  m.width = width;
  const int d = height * width;
  if (static_cast<int>(classes.size()) != d) {
    throw std::invalid_argument("class vector length does not match height*width");
  }
  m.values.assign(static_cast<std::size_t>(k) * d, 0);
  for (int j = 0; j < d; ++j) {
    if (classes[j] < 0 || classes[j] >= k) throw std::out_of_range("class index out of range");
    m.values[static_cast<std::size_t>(classes[j]) * d + j] = 1;
  }
  return m;
}

bool LabelMap::valid() const {
  if (static_cast<int>(values.size()) != k * pixels()) return false;
  for (int j = 0; j < pixels(); ++j) {
    int s = 0;
    for (int c = 0; c < k; ++c) {
      if (at(c, j) > 1) return false;
      s += at(c, j);
    }
    if (s != 1) return false;
  }
  return true;
}

Eigen::VectorXd render_foreground(const QuadrantStates& states, const ShapeAtlas& atlas) {
  const int q = atlas.quadrant_size();
  const int side = atlas.image_side();
  Eigen::VectorXd fg = Eigen::VectorXd::Zero(atlas.pixel_count());
  for (int quad = 0; quad < kQuadrantCount; ++quad) {
    const int oy = (quad / 2) * q;
    const int ox = (quad % 2) * q;
    const auto mask = atlas.mask(states[quad]);
    for (int y = 0; y < q; ++y) {
      for (int x = 0; x < q; ++x) {
        fg((oy + y) * side + ox + x) = mask[static_cast<std::size_t>(y) * q + x];
      }
    }
  }
  return fg;
}

LabelMap render_label(const QuadrantStates& states, const ShapeAtlas& atlas) {
  const Eigen::VectorXd fg = render_foreground(states, atlas);
  std::vector<int> cls(static_cast<std::size_t>(fg.size()));
  for (Eigen::Index j = 0; j < fg.size(); ++j) cls[j] = fg(j) > 0.5 ? 1 : 0;
  return LabelMap::from_classes(cls, 2, atlas.image_side(), atlas.image_side());
}

namespace {

void check_distribution(const Distribution4& init) {
  double s = 0.0;
  for (double p : init) {
    if (p < 0.0) throw std::invalid_argument("initial distribution has a negative entry");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-9) {
    throw std::invalid_argument("initial distribution must sum to 1 (got " + std::to_string(s) +
                                ")");
  }
}

int draw_categorical(Rng& rng, const double* probs, int n) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Floating-point slack: return the last state with positive mass.
  for (int i = n - 1; i >= 0; --i) {
    if (probs[i] > 0.0) return i;
  }
  return n - 1;
}

}  // namespace

QuadrantStates markovshapes_sample_states(Rng& rng, const TransitionMatrix& trans,
                                          const Distribution4& init) {
  check_distribution(init);
  QuadrantStates states{};
  int s = draw_categorical(rng, init.data(), kStateCount);
  states[0] = static_cast<QuadrantState>(s);
  for (int quad = 1; quad < kQuadrantCount; ++quad) {
    const Eigen::Matrix<double, 1, 4> row = trans.entries().row(s);
    s = draw_categorical(rng, row.data(), kStateCount);
    states[quad] = static_cast<QuadrantState>(s);
  }
  return states;
}

LabelMap markovshapes_sample(Rng& rng, const TransitionMatrix& trans, const ShapeAtlas& atlas,
                             const Distribution4& init) {
  return render_label(markovshapes_sample_states(rng, trans, init), atlas);
}

std::vector<Configuration> markovshapes_enumerate(const TransitionMatrix& trans,
                                                  const Distribution4& init) {
  check_distribution(init);
  std::vector<Configuration> out;
  out.reserve(256);
  for (int code = 0; code < 256; ++code) {
    QuadrantStates st{};
    int s[4];
    for (int quad = 0; quad < 4; ++quad) {
      s[quad] = (code >> (2 * (3 - quad))) & 3;
      st[quad] = static_cast<QuadrantState>(s[quad]);
    }
    double p = init[s[0]];
    for (int quad = 1; quad < 4; ++quad) p *= trans(s[quad - 1], s[quad]);
    out.push_back({st, p});
  }
  return out;
}

MomentPair markovshapes_exact_covariance(const TransitionMatrix& trans, const Distribution4& init,
                                         const ShapeAtlas& atlas) {
  const auto configs = markovshapes_enumerate(trans, init);
  const int d = atlas.pixel_count();
  Eigen::MatrixXd pixels(d, static_cast<Eigen::Index>(configs.size()));
  Eigen::VectorXd probs(static_cast<Eigen::Index>(configs.size()));
  for (std::size_t i = 0; i < configs.size(); ++i) {
    pixels.col(static_cast<Eigen::Index>(i)) = render_foreground(configs[i].states, atlas);
    probs(static_cast<Eigen::Index>(i)) = configs[i].probability;
  }
  MomentPair out;
  out.mean = pixels * probs;
  const Eigen::MatrixXd centred = pixels.colwise() - out.mean;
  out.covariance = centred * probs.asDiagonal() * centred.transpose();
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  return out;
}

// ---------------------------------------------------------------------------

TruncatedFileError::TruncatedFileError(const fs::path& path, std::uintmax_t expected,
                                       std::uintmax_t actual)
    : DatasetError("file size mismatch: expected " + std::to_string(expected) + " bytes, found " +
                       std::to_string(actual),
                   path),
      expected_(expected),
      actual_(actual) {}

std::uint64_t DatasetManifest::image_elements() const {
  return static_cast<std::uint64_t>(image_shape[0]) * image_shape[1] * image_shape[2];
}

std::uint64_t DatasetManifest::label_elements() const {
  return static_cast<std::uint64_t>(label_shape[0]) * label_shape[1] * label_shape[2];
}

std::span<const float> Dataset::image(std::size_t i) const {
  const auto n = static_cast<std::size_t>(manifest.image_elements());
  return std::span<const float>(images).subspan(i * n, n);
}

LabelMap Dataset::label(std::size_t i, int annotator) const {
  LabelMap m;
  m.k = manifest.label_shape[0];
  m.height = manifest.label_shape[1];
  m.width = manifest.label_shape[2];
  const auto n = static_cast<std::size_t>(manifest.label_elements());
  const std::size_t off = (i * manifest.annotators_per_image + annotator) * n;
  m.values.assign(labels.begin() + static_cast<std::ptrdiff_t>(off),
                  labels.begin() + static_cast<std::ptrdiff_t>(off + n));
  return m;
}

Dataset::Record Dataset::record(std::size_t i) const {
  Record r;
  r.image = image(i);
  for (int a = 0; a < manifest.annotators_per_image; ++a) r.labels.push_back(label(i, a));
  return r;
}

namespace {

json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["format"] = "flowssn-dataset";
  j["version"] = 1;
  j["name"] = m.name;
  j["image_count"] = m.image_count;
  j["image_shape"] = m.image_shape;
  j["label_shape"] = m.label_shape;
  j["annotators_per_image"] = m.annotators_per_image;
  j["dtypes"] = {{"images", m.image_dtype}, {"labels", m.label_dtype}};
  j["byte_order"] = m.byte_order;
  j["layout"] = {{"images", "image,c,h,w"}, {"labels", "image,annotator,k,h,w"}, {"order", "C"}};
  json files = json::array();
  for (const auto& f : m.files) {
    files.push_back({{"role", f.role}, {"path", f.path}, {"offset", f.offset}, {"bytes", f.bytes}});
  }
  j["files"] = files;
  j["rng_seed"] = m.rng_seed;
  j["generator"] = m.generator_config.empty() ? json::object() : json::parse(m.generator_config);
  return j;
}

DatasetManifest manifest_from_json(const json& j, const fs::path& path) {
  DatasetManifest m;
  try {
    if (j.at("format").get<std::string>() != "flowssn-dataset") {
      throw ManifestError("unknown manifest format", path);
    }
    m.name = j.at("name").get<std::string>();
    m.image_count = j.at("image_count").get<std::uint64_t>();
    m.image_shape = j.at("image_shape").get<std::array<int, 3>>();
    m.label_shape = j.at("label_shape").get<std::array<int, 3>>();
    m.annotators_per_image = j.at("annotators_per_image").get<int>();
    m.image_dtype = j.at("dtypes").at("images").get<std::string>();
    m.label_dtype = j.at("dtypes").at("labels").get<std::string>();
    m.byte_order = j.at("byte_order").get<std::string>();
    for (const auto& f : j.at("files")) {
      m.files.push_back({f.at("role").get<std::string>(), f.at("path").get<std::string>(),
                         f.at("offset").get<std::uint64_t>(), f.at("bytes").get<std::uint64_t>()});
    }
    m.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    if (j.contains("generator")) m.generator_config = j.at("generator").dump();
  } catch (const json::exception& e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what(), path);
  }
  if (m.annotators_per_image < 1) {
    throw ManifestError("annotators_per_image must be >= 1", path);
  }
  for (int v : m.image_shape) {
    if (v < 1) throw ManifestError("image_shape entries must be positive", path);
  }
  for (int v : m.label_shape) {
    if (v < 1) throw ManifestError("label_shape entries must be positive", path);
  }
  if (m.byte_order != "little") {
    throw ManifestError("unsupported byte order '" + m.byte_order + "'", path);
  }
  return m;
}

const FileEntry& find_file(const DatasetManifest& m, const std::string& role, const fs::path& path) {
  for (const auto& f : m.files) {
    if (f.role == role) return f;
  }
  throw ManifestError("manifest has no '" + role + "' file entry", path);
}

}  // namespace

void dataset_write(const fs::path& dir, Dataset& ds) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DatasetError("cannot create directory: " + ec.message(), dir);
  auto& m = ds.manifest;
  m.files.clear();
  m.files.push_back({"images", "images.bin", 0, ds.images.size() * sizeof(float)});
  m.files.push_back({"labels", "labels.bin", 0, ds.labels.size()});
  io::write_le_file(dir / "images.bin", std::span<const float>(ds.images));
  io::write_le_file(dir / "labels.bin", std::span<const std::uint8_t>(ds.labels));
  const fs::path mpath = dir / "manifest.json";
  std::ofstream out(mpath, std::ios::binary);
  if (!out) throw DatasetError("cannot open for writing", mpath);
  out << manifest_to_json(m).dump(2) << "\n";
  if (!out) throw DatasetError("write failed", mpath);
}

Dataset dataset_read(const fs::path& manifest_or_dir) {
  fs::path mpath = manifest_or_dir;
  if (fs::is_directory(mpath)) mpath /= "manifest.json";
  std::ifstream in(mpath, std::ios::binary);
  if (!in) throw ManifestError("cannot open manifest", mpath);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ManifestError(std::string("manifest is not valid JSON: ") + e.what(), mpath);
  }
  Dataset ds;
  ds.manifest = manifest_from_json(j, mpath);
  const auto& m = ds.manifest;
  const fs::path dir = mpath.parent_path();

  if (m.image_dtype != "float32") {
    throw DtypeMismatchError("image dtype '" + m.image_dtype + "' is not float32", dir / "images.bin");
  }
  if (m.label_dtype != "uint8") {
    throw DtypeMismatchError("label dtype '" + m.label_dtype + "' is not uint8", dir / "labels.bin");
  }
  const FileEntry& img = find_file(m, "images", mpath);
  const FileEntry& lab = find_file(m, "labels", mpath);
  const std::uint64_t img_bytes = m.image_count * m.image_elements() * sizeof(float);
  const std::uint64_t lab_bytes = m.image_count * m.annotators_per_image * m.label_elements();
  if (img.bytes != img_bytes) {
    throw DtypeMismatchError("images entry declares " + std::to_string(img.bytes) +
                                 " bytes but shape and float32 imply " + std::to_string(img_bytes),
                             dir / img.path);
  }
  if (lab.bytes != lab_bytes) {
    throw DtypeMismatchError("labels entry declares " + std::to_string(lab.bytes) +
                                 " bytes but shape and uint8 imply " + std::to_string(lab_bytes),
                             dir / lab.path);
  }
  const auto check_size = [](const fs::path& p, std::uint64_t expected) {
    std::error_code ec;
    if (!fs::exists(p, ec)) throw DatasetError("referenced file does not exist", p);
    const auto actual = fs::file_size(p, ec);
    if (ec) throw DatasetError("cannot stat file: " + ec.message(), p);
    if (actual != expected) throw TruncatedFileError(p, expected, actual);
  };
  check_size(dir / img.path, img.offset + img_bytes);
  check_size(dir / lab.path, lab.offset + lab_bytes);
  ds.images = io::read_le_file<float>(dir / img.path, img.offset, m.image_count * m.image_elements());
  ds.labels = io::read_le_file<std::uint8_t>(dir / lab.path, lab.offset,
                                             m.image_count * m.annotators_per_image *
                                                 m.label_elements());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (int a = 0; a < m.annotators_per_image; ++a) {
      if (!ds.label(i, a).valid()) {
        throw DatasetError("label map " + std::to_string(i) + "/" + std::to_string(a) +
                               " is not one-hot",
                           dir / lab.path);
      }
    }
  }
  return ds;
}

Dataset markovshapes_dataset(const MarkovShapesConfig& config) {
  if (config.count < 1) throw std::invalid_argument("count must be >= 1");
  const ShapeAtlas atlas = ShapeAtlas::standard(config.quadrant_size);
  const TransitionMatrix trans = TransitionMatrix::markov_shapes();
  Rng rng(config.seed);
  Dataset ds;
  auto& m = ds.manifest;
  const int side = atlas.image_side();
  m.name = "markovshapes";
  m.image_count = static_cast<std::uint64_t>(config.count);
  m.image_shape = {1, side, side};
  m.label_shape = {2, side, side};
  m.annotators_per_image = 1;
  m.rng_seed = config.seed;
  m.generator_config = json{{"dataset", "markovshapes"},
                            {"count", config.count},
                            {"quadrant_size", config.quadrant_size},
                            {"transition", "markov_shapes"},
                            {"init", "uniform"},
                            {"seed", config.seed}}
                           .dump();
  const int d = side * side;
  ds.images.reserve(static_cast<std::size_t>(config.count) * d);
  ds.labels.reserve(static_cast<std::size_t>(config.count) * 2 * d);
  for (int i = 0; i < config.count; ++i) {
    const LabelMap lm = markovshapes_sample(rng, trans, atlas, kUniformInit);
    for (int j = 0; j < d; ++j) ds.images.push_back(static_cast<float>(lm.at(1, j)));
    ds.labels.insert(ds.labels.end(), lm.values.begin(), lm.values.end());
  }
  return ds;
}

std::vector<float> multirater_field(Rng& rng, const MultiraterConfig& c) {
  const int h = c.height;
  const int w = c.width;
  std::vector<double> field(static_cast<std::size_t>(h) * w, 0.0);
  const double scale = std::min(h, w);
  for (int b = 0; b < c.blobs; ++b) {
    const double cy = (0.2 + 0.6 * uniform01(rng)) * h;
    const double cx = (0.2 + 0.6 * uniform01(rng)) * w;
    const double sigma = (0.10 + 0.12 * uniform01(rng)) * scale;
    const double amp = 0.5 + 0.5 * uniform01(rng);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double r2 = (y + 0.5 - cy) * (y + 0.5 - cy) + (x + 0.5 - cx) * (x + 0.5 - cx);
        field[static_cast<std::size_t>(y) * w + x] += amp * std::exp(-r2 / (2.0 * sigma * sigma));
      }
    }
  }
  const double peak = *std::max_element(field.begin(), field.end());
  std::vector<float> out(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    out[i] = static_cast<float>(peak > 0 ? field[i] / peak : 0.0);
  }
  return out;
}

LabelMap threshold_mask(std::span<const float> field, double threshold, int height, int width) {
  std::vector<int> cls(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) cls[i] = field[i] > threshold ? 1 : 0;
  return LabelMap::from_classes(cls, 2, height, width);
}

Dataset multirater_dataset(const MultiraterConfig& c) {
  if (c.raters < 2) throw std::invalid_argument("multi-rater task needs at least 2 raters");
  if (c.count < 1 || c.height < 1 || c.width < 1) {
    throw std::invalid_argument("count and image shape must be positive");
  }
  Rng rng(c.seed);
  Dataset ds;
  auto& m = ds.manifest;
  m.name = "multirater";
  m.image_count = static_cast<std::uint64_t>(c.count);
  m.image_shape = {1, c.height, c.width};
  m.label_shape = {2, c.height, c.width};
  m.annotators_per_image = c.raters;
  m.rng_seed = c.seed;
  m.generator_config = json{{"dataset", "multirater"},
                            {"count", c.count},
                            {"height", c.height},
                            {"width", c.width},
                            {"raters", c.raters},
                            {"blobs", c.blobs},
                            {"base_threshold_min", c.base_threshold_min},
                            {"base_threshold_max", c.base_threshold_max},
                            {"threshold_spread", c.threshold_spread},
                            {"seed", c.seed}}
                           .dump();
  for (int i = 0; i < c.count; ++i) {
    const auto field = multirater_field(rng, c);
    const double base =
        c.base_threshold_min + (c.base_threshold_max - c.base_threshold_min) * uniform01(rng);
    ds.images.insert(ds.images.end(), field.begin(), field.end());
    for (int r = 0; r < c.raters; ++r) {
      const double offset = c.threshold_spread * (2.0 * uniform01(rng) - 1.0);
      const LabelMap lm = threshold_mask(field, base + offset, c.height, c.width);
      ds.labels.insert(ds.labels.end(), lm.values.begin(), lm.values.end());
    }
  }
  return ds;
}

Dataset multirater_generate(const MultiraterConfig& config, const fs::path& dir) {
  Dataset ds = multirater_dataset(config);
  dataset_write(dir, ds);
  return ds;
}

}  // namespace flowssn::datagen
