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

#include "cli.hpp"

#include "render.hpp"

#include "flowssn/binary_io.hpp"
#include "flowssn/datagen.hpp"
#include "flowssn/metrics.hpp"
#include "flowssn/rank_analysis.hpp"
#include "flowssn/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace flowssn::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kVersion = "0.1.0";

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

// Manifest next to a file output, or run.json inside a directory output.
void write_manifest(const fs::path& path, const std::string& command, const json& resolved) {
  json m{{"tool", "flowssn"}, {"version", kVersion}, {"command", command}, {"config", resolved}};
  write_text(path, m.dump(2) + "\n");
}

fs::path sidecar(const fs::path& file) {
  fs::path p = file;
  p += ".manifest.json";
  return p;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw UsageError(std::string("bad ") + what + " list: '" + text + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(std::string("empty ") + what + " list");
  return out;
}

std::pair<int, int> parse_shape(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw UsageError("shape must look like HxW, got '" + text + "'");
  try {
    std::size_t a = 0, b = 0;
    const int h = std::stoi(text.substr(0, x), &a);
    const int w = std::stoi(text.substr(x + 1), &b);
    if (a != x || b != text.size() - x - 1 || h < 1 || w < 1) throw std::invalid_argument(text);
    return {h, w};
  } catch (const std::logic_error&) {
    throw UsageError("shape must look like HxW, got '" + text + "'");
  }
}

void require_path(const std::string& p, const char* what) {
  if (!fs::exists(p)) throw UsageError(std::string(what) + " does not exist: " + p);
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  }
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Csv read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV: " + path.string());
  csv.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    csv.rows.push_back(split_csv_line(line));
  }
  return csv;
}

double cell_value(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  try {
    return std::stod(s);
  } catch (const std::logic_error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

int markovshapes_quadrant(const datagen::Dataset& ds) {
  if (ds.manifest.name != "markovshapes") {
    throw UsageError("dataset is '" + ds.manifest.name + "', expected markovshapes");
  }
  const json g = json::parse(ds.manifest.generator_config);
  return g.value("quadrant_size", ds.manifest.label_shape[1] / 2);
}

Eigen::MatrixXd exact_covariance(const datagen::Dataset& ds) {
  const auto atlas = datagen::ShapeAtlas::standard(markovshapes_quadrant(ds));
  return datagen::markovshapes_exact_covariance(datagen::TransitionMatrix::markov_shapes(),
                                                datagen::kUniformInit, atlas)
      .covariance;
}

// Empirical covariance of annotator-0 labels (foreground channel for k = 2).
Eigen::MatrixXd empirical_label_covariance(const datagen::Dataset& ds) {
  const int k = ds.manifest.label_shape[0];
  const int d = ds.manifest.label_shape[1] * ds.manifest.label_shape[2];
  const int n = k == 2 ? d : k * d;
  const int offset = k == 2 ? d : 0;
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto y = ds.label(i, 0);
    for (int j = 0; j < n; ++j) x(j, static_cast<Eigen::Index>(i)) = y.values[static_cast<std::size_t>(offset + j)];
  }
  const Eigen::VectorXd mean = x.rowwise().mean();
  x.colwise() -= mean;
  return x * x.transpose() / static_cast<double>(std::max<std::size_t>(ds.size() - 1, 1));
}

cont::SolverConfig solver_from_flags(cont::SolverConfig base, const CLI::Option* steps_opt,
                                     int steps, bool adaptive, double tol) {
  if (adaptive && steps_opt->count() > 0) throw UsageError("--steps and --adaptive are exclusive");
  if (adaptive) {
    base.method = cont::SolverMethod::kDopri5;
    base.abs_tol = tol;
    base.rel_tol = tol;
  } else if (steps_opt->count() > 0) {
    base.method = cont::SolverMethod::kEuler;
    base.steps = steps;
  }
  base.validate();
  return base;
}

json solver_json(const cont::SolverConfig& s) {
  return {{"method", s.method == cont::SolverMethod::kEuler ? "euler" : "dopri5"},
          {"steps", s.steps},
          {"abs_tol", s.abs_tol},
          {"rel_tol", s.rel_tol}};
}

Eigen::MatrixXd dataset_images(const datagen::Dataset& ds, std::size_t first, std::size_t count) {
  const auto e = static_cast<Eigen::Index>(ds.manifest.image_elements());
  Eigen::MatrixXd out(e, static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    const auto img = ds.image(first + i);
    for (Eigen::Index r = 0; r < e; ++r) out(r, static_cast<Eigen::Index>(i)) = img[static_cast<std::size_t>(r)];
  }
  return out;
}

void check_compatible(const train::DataShape& model, const datagen::Dataset& ds) {
  const train::DataShape d = train::DataShape::of(ds.manifest);
  if (d.categories != model.categories || d.height != model.height || d.width != model.width ||
      d.image_channels != model.image_channels) {
    throw std::runtime_error("checkpoint expects " + std::to_string(model.categories) + "x" +
                             std::to_string(model.height) + "x" + std::to_string(model.width) +
                             " labels, dataset provides " + std::to_string(d.categories) + "x" +
                             std::to_string(d.height) + "x" + std::to_string(d.width));
  }
}

render::Image gray_tile(const Eigen::VectorXd& v, int h, int w, int zoom) {
  render::Image img(w * zoom, h * zoom);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto g = static_cast<std::uint8_t>(std::lround(std::clamp(v(y * w + x), 0.0, 1.0) * 255.0));
      img.fill_rect(x * zoom, y * zoom, zoom, zoom, {g, g, g});
    }
  }
  return img;
}

render::Image label_tile(const datagen::LabelMap& y, int zoom) {
  render::Image img(y.width * zoom, y.height * zoom);
  const auto cls = y.classes();
  for (int p = 0; p < y.pixels(); ++p) {
    img.fill_rect((p % y.width) * zoom, (p / y.width) * zoom, zoom, zoom,
                  render::category_colour(cls[static_cast<std::size_t>(p)]));
  }
  return img;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string dataset;
  std::string out;
  std::uint64_t seed = 0;
  int count = 0;
  int quadrant_size = 8;
  int raters = 4;
  std::string shape = "16x16";
  CLI::Option* count_opt = nullptr;
  CLI::Option* quadrant_opt = nullptr;
  CLI::Option* raters_opt = nullptr;
  CLI::Option* shape_opt = nullptr;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  const fs::path dir(a.out);
  json resolved{{"dataset", a.dataset}, {"out", a.out}, {"seed", a.seed}};
  datagen::Dataset ds;
  if (a.dataset == "markovshapes") {
    if (a.raters_opt->count() > 0 || a.shape_opt->count() > 0) {
      throw UsageError("--raters and --shape apply to the multirater dataset only");
    }
    datagen::MarkovShapesConfig c;
    c.count = a.count_opt->count() > 0 ? a.count : 10000;
    c.quadrant_size = a.quadrant_size;
    c.seed = a.seed;
    if (c.count < 1) throw UsageError("--count must be positive");
    if (c.quadrant_size < 4 || c.quadrant_size % 2 != 0) {
      throw UsageError("--quadrant-size must be an even number >= 4");
    }
    resolved["count"] = c.count;
    resolved["quadrant_size"] = c.quadrant_size;
    ds = datagen::markovshapes_dataset(c);
    datagen::dataset_write(dir, ds);
  } else {
    if (a.quadrant_opt->count() > 0) throw UsageError("--quadrant-size applies to markovshapes only");
    datagen::MultiraterConfig c;
    c.count = a.count_opt->count() > 0 ? a.count : 1000;
    std::tie(c.height, c.width) = parse_shape(a.shape);
    c.raters = a.raters;
    c.seed = a.seed;
    if (c.count < 1) throw UsageError("--count must be positive");
    if (c.raters < 2) throw UsageError("--raters must be at least 2");
    resolved["count"] = c.count;
    resolved["raters"] = c.raters;
    resolved["shape"] = {c.height, c.width};
    resolved["blobs"] = c.blobs;
    resolved["threshold_spread"] = c.threshold_spread;
    ds = datagen::multirater_generate(c, dir);
  }
  write_manifest(dir / "run.json", "generate-data", resolved);
  out << "wrote " << ds.size() << " records to " << dir.string() << '\n';
  return kExitOk;
}

struct RankArgs {
  std::string dataset;
  std::string synthetic;
  std::string ranks = "1,2,4,8,16";
  std::int64_t samples = 1000000;
  std::uint64_t seed = 0;
  double rel_tol = 1e-4;
  double exact_rel_tol = 1e-8;
  double diag = 0.1;
  std::string out;
  std::string heatmaps;
};

int cmd_rank(const RankArgs& a, std::ostream& out) {
  if (a.dataset.empty() == a.synthetic.empty()) {
    throw UsageError("exactly one of --dataset or --synthetic is required");
  }
  if (!(a.rel_tol > 0.0 && a.rel_tol < 1.0)) throw UsageError("--rel-tol must lie in (0, 1)");
  const fs::path csv_path(a.out);
  ensure_parent(csv_path);
  const fs::path heat_dir = a.heatmaps.empty()
                                ? csv_path.parent_path() / (csv_path.stem().string() + "_heatmaps")
                                : fs::path(a.heatmaps);
  fs::create_directories(heat_dir);
  std::ostringstream csv;
  std::ostringstream scales;
  scales << std::setprecision(17) << "name,min,max\n";
  json resolved{{"out", a.out}, {"heatmaps", heat_dir.string()}, {"seed", a.seed}};
  auto heatmap = [&](const std::string& name, const Eigen::MatrixXd& m) {
    const auto g = render::write_heatmap_pgm(heat_dir / (name + ".pgm"), m);
    scales << name << ',' << g.min << ',' << g.max << '\n';
  };

  if (!a.dataset.empty()) {
    require_path(a.dataset, "dataset");
    const datagen::Dataset ds = datagen::dataset_read(a.dataset);
    resolved["dataset"] = a.dataset;
    resolved["rel_tol"] = a.rel_tol;
    csv << "r,numerical_rank,effective_rank,N,rel_tol,seed\n" << std::setprecision(10);
    if (ds.manifest.name == "markovshapes") {
      const Eigen::MatrixXd exact = exact_covariance(ds);
      const auto sv = rank::singular_values(exact);
      const int nr = rank::numerical_rank_from_singular_values(sv, a.exact_rel_tol);
      csv << "exact," << nr << ',' << rank::effective_rank_from_singular_values(sv) << ",0,"
          << a.exact_rel_tol << ',' << ds.manifest.rng_seed << '\n';
      heatmap("exact_covariance", exact);
      resolved["exact_rel_tol"] = a.exact_rel_tol;
      out << "exact covariance: numerical rank " << nr << '\n';
    }
    const Eigen::MatrixXd emp = empirical_label_covariance(ds);
    const auto sv = rank::singular_values(emp);
    csv << "empirical," << rank::numerical_rank_from_singular_values(sv, a.rel_tol) << ','
        << rank::effective_rank_from_singular_values(sv) << ',' << ds.size() << ',' << a.rel_tol
        << ',' << ds.manifest.rng_seed << '\n';
    heatmap("empirical_covariance", emp);
  } else {
    const auto kd = parse_list<int>(a.synthetic, "k,d");
    if (kd.size() != 2 || kd[0] < 2 || kd[1] < 1) throw UsageError("--synthetic expects k,d with k >= 2");
    const auto grid = parse_list<int>(a.ranks, "rank");
    if (a.samples < 2) throw UsageError("--samples must be at least 2");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (grid[i] < 0 || (i > 0 && grid[i] <= grid[i - 1])) {
        throw UsageError("--ranks must be strictly increasing and non-negative");
      }
    }
    const auto rep = rank::sublinearity_report(grid, kd[0], kd[1], a.samples, a.seed, a.rel_tol, a.diag);
    rank::write_rank_csv(csv, rep.reports);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      heatmap("covariance_r" + std::to_string(grid[i]), rep.covariances[i]);
    }
    resolved.update({{"synthetic", kd}, {"ranks", grid}, {"samples", a.samples},
                     {"rel_tol", a.rel_tol}, {"diag", a.diag}});
    out << "concavity statistic " << rep.concavity << '\n';
  }
  write_text(csv_path, csv.str());
  write_text(heat_dir / "scale.csv", scales.str());
  write_manifest(sidecar(csv_path), "analyze-rank", resolved);
  out << "wrote " << csv_path.string() << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::string dataset;
  std::string val_dataset;
  std::uint64_t seed = 0;
  int max_steps = 0;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  require_path(a.config, "config file");
  train::RunConfig c;
  try {
    c = train::RunConfig::from_json(read_text(a.config));
  } catch (const std::exception& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  if (!a.out.empty()) c.out_dir = a.out;
  if (!a.dataset.empty()) c.dataset = a.dataset;
  if (!a.val_dataset.empty()) c.val_dataset = a.val_dataset;
  if (a.seed_opt->count() > 0) c.seed = a.seed;
  if (a.steps_opt->count() > 0) c.max_steps = a.max_steps;
  if (c.dataset.empty()) throw UsageError("no training dataset given (config or --dataset)");
  if (c.out_dir.empty()) throw UsageError("no output directory given (config or --out)");
  require_path(c.dataset, "dataset");
  if (!c.val_dataset.empty()) require_path(c.val_dataset, "validation dataset");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  const datagen::Dataset train_ds = datagen::dataset_read(c.dataset);
  std::optional<datagen::Dataset> val_ds;
  if (!c.val_dataset.empty()) val_ds = datagen::dataset_read(c.val_dataset);
  auto model = train::make_model(c, train::DataShape::of(train_ds.manifest));
  out << "model " << c.model << " with " << model->params().count() << " parameters\n";
  const auto result = train::train(*model, c, train_ds, val_ds ? &*val_ds : nullptr);
  write_manifest(fs::path(c.out_dir) / "run.json", "train", json::parse(c.to_json()));
  out << "final loss " << result.log.back().loss;
  if (result.best_step > 0) {
    out << ", best " << result.eval_name << ' ' << result.best_metric << " at step " << result.best_step;
  }
  out << '\n';
  return kExitOk;
}

struct SampleArgs {
  std::string checkpoint;
  std::string dataset;
  std::string out;
  int m = 16;
  int steps = 50;
  bool adaptive = false;
  double tol = 1e-6;
  int images = 1;
  int index = 0;
  std::uint64_t seed = 0;
  CLI::Option* steps_opt = nullptr;
};

int cmd_sample(const SampleArgs& a, std::ostream& out, std::ostream& err) {
  require_path(a.checkpoint, "checkpoint");
  if (a.m < 1 || a.images < 1 || a.index < 0) throw UsageError("--m and --images must be positive");
  train::RunConfig rc;
  train::DataShape shape;
  auto model = train::load_model(a.checkpoint, &rc, &shape);
  const bool continuous = rc.model == "flow_ssn_continuous";
  if (!continuous && (a.steps_opt->count() > 0 || a.adaptive)) {
    err << "warning: " << rc.model << " samples in a single pass; solver flags are ignored\n";
  }
  const cont::SolverConfig solver =
      continuous ? solver_from_flags(rc.solver, a.steps_opt, a.steps, a.adaptive, a.tol) : rc.solver;

  Eigen::MatrixXd images;
  if (model->conditional()) {
    if (a.dataset.empty()) throw UsageError("conditional checkpoint needs --dataset for input images");
    require_path(a.dataset, "dataset");
    const datagen::Dataset ds = datagen::dataset_read(a.dataset);
    check_compatible(shape, ds);
    if (static_cast<std::size_t>(a.index + a.images) > ds.size()) {
      throw UsageError("--index/--images exceed the dataset size");
    }
    images = dataset_images(ds, static_cast<std::size_t>(a.index), static_cast<std::size_t>(a.images));
  }
  std::vector<std::vector<datagen::LabelMap>> samples;
  Eigen::MatrixXd mean_fg = Eigen::MatrixXd::Zero(shape.pixels(), a.images);
  {
    nn::ShadowScope ema(model->params());
    Rng rng(a.seed);
    samples = model->sample(model->conditional() ? &images : nullptr, a.images, a.m, rng, solver);
  }
  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::string bytes;
  std::vector<float> unc;
  for (int b = 0; b < a.images; ++b) {
    const auto& set = samples[static_cast<std::size_t>(b)];
    for (const auto& y : set) {
      bytes.append(reinterpret_cast<const char*>(y.values.data()), y.values.size());
      const auto cls = y.classes();
      for (int p = 0; p < shape.pixels(); ++p) {
        if (cls[static_cast<std::size_t>(p)] != 0) mean_fg(p, b) += 1.0 / a.m;
      }
    }
    metrics::SampleSet s{set, {set.front()}};
    const Eigen::VectorXd u = metrics::uncertainty_map(s);
    for (Eigen::Index i = 0; i < u.size(); ++i) unc.push_back(static_cast<float>(u(i)));
    const double top = std::log2(static_cast<double>(shape.categories));
    const auto g = render::to_gray(Eigen::Map<const Eigen::MatrixXd>(u.data(), shape.width, shape.height).transpose(), 0.0, top);
    char scale[64];
    std::snprintf(scale, sizeof(scale), "scale min=0 max=%.17g bits", top);
    char name[64];
    std::snprintf(name, sizeof(name), "uncertainty_%03d.pgm", b);
    render::write_pgm(dir / name, shape.width, shape.height, g.pixels, {scale});

    const int zoom = 4, cols = 8, pad = 2;
    std::vector<render::Image> tiles;
    if (model->conditional()) tiles.push_back(gray_tile(images.col(b).head(shape.pixels()), shape.height, shape.width, zoom));
    tiles.push_back(gray_tile(mean_fg.col(b), shape.height, shape.width, zoom));
    for (const auto& y : set) tiles.push_back(label_tile(y, zoom));
    const int tw = shape.width * zoom + pad, th = shape.height * zoom + pad;
    const int ncol = std::min<int>(cols, static_cast<int>(tiles.size()));
    const int nrow = (static_cast<int>(tiles.size()) + cols - 1) / cols;
    render::Image grid(ncol * tw + pad, nrow * th + pad, {128, 128, 128});
    for (std::size_t t = 0; t < tiles.size(); ++t) {
      grid.blit(tiles[t], pad + static_cast<int>(t % cols) * tw, pad + static_cast<int>(t / cols) * th);
    }
    std::snprintf(name, sizeof(name), "preview_%03d.ppm", b);
    render::write_ppm(dir / name, grid);
  }
  write_text(dir / "samples.bin", bytes);
  std::string ubytes;
  io::append_le(ubytes, std::span<const float>(unc));
  write_text(dir / "uncertainty.bin", ubytes);
  json resolved{{"checkpoint", a.checkpoint},
                {"model", rc.model},
                {"m", a.m},
                {"images", a.images},
                {"index", a.index},
                {"seed", a.seed},
                {"solver", solver_json(solver)},
                {"dataset", a.dataset},
                {"samples", {{"file", "samples.bin"},
                             {"dtype", "uint8"},
                             {"byte_order", "little"},
                             {"layout", "(image, sample, k, h, w)"},
                             {"shape", {a.images, a.m, shape.categories, shape.height, shape.width}}}},
                {"uncertainty", {{"file", "uncertainty.bin"},
                                 {"dtype", "float32"},
                                 {"byte_order", "little"},
                                 {"units", "bits"},
                                 {"shape", {a.images, shape.height, shape.width}}}}};
  write_manifest(dir / "run.json", "sample", resolved);
  out << "wrote " << a.images * a.m << " label maps to " << dir.string() << '\n';
  return kExitOk;
}

struct EvaluateArgs {
  std::string checkpoint;
  std::string dataset;
  std::string out;
  int m = 16;
  int images = 32;
  int bpd_samples = 512;
  std::uint64_t seed = 1234;
  int steps = 50;
  bool adaptive = false;
  double tol = 1e-6;
  std::string sweep;
  CLI::Option* steps_opt = nullptr;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out, std::ostream& err) {
  require_path(a.checkpoint, "checkpoint");
  require_path(a.dataset, "dataset");
  if (a.m < 1 || a.images < 1 || a.bpd_samples < 1) throw UsageError("--m, --images and --bpd-samples must be positive");
  train::RunConfig rc;
  train::DataShape shape;
  auto model = train::load_model(a.checkpoint, &rc, &shape);
  const datagen::Dataset ds = datagen::dataset_read(a.dataset);
  check_compatible(shape, ds);
  const bool continuous = rc.model == "flow_ssn_continuous";
  if (!continuous && (a.steps_opt->count() > 0 || a.adaptive || !a.sweep.empty())) {
    err << "warning: " << rc.model << " samples in a single pass; solver flags are ignored\n";
  }
  train::EvalConfig ec;
  ec.m = a.m;
  ec.images = a.images;
  ec.bpd_samples = a.bpd_samples;
  ec.seed = a.seed;
  ec.solver = continuous ? solver_from_flags(rc.solver, a.steps_opt, a.steps, a.adaptive, a.tol) : rc.solver;

  std::vector<int> sweep;
  if (!a.sweep.empty() && continuous) sweep = parse_list<int>(a.sweep, "steps");
  std::vector<metrics::MetricReport> rows;
  if (sweep.empty()) {
    rows.push_back(train::evaluate(*model, ds, ec));
  } else {
    for (int t : sweep) {
      ec.solver.method = cont::SolverMethod::kEuler;
      ec.solver.steps = t;
      ec.solver.validate();
      rows.push_back(train::evaluate(*model, ds, ec));
    }
  }
  for (auto& r : rows) r.checkpoint = a.checkpoint;
  std::ostringstream csv;
  metrics::write_metric_csv(csv, rows);
  std::string text = csv.str();
  if (!sweep.empty()) {
    std::istringstream in(text);
    std::ostringstream outcsv;
    std::string line;
    std::getline(in, line);
    outcsv << line << ",solver_steps\n";
    for (int t : sweep) {
      std::getline(in, line);
      outcsv << line << ',' << t << '\n';
    }
    text = outcsv.str();
  }
  const fs::path path(a.out);
  ensure_parent(path);
  write_text(path, text);
  write_manifest(sidecar(path), "evaluate",
                 {{"checkpoint", a.checkpoint}, {"dataset", a.dataset}, {"m", a.m},
                  {"images", a.images}, {"bpd_samples", a.bpd_samples}, {"seed", a.seed},
                  {"solver", solver_json(ec.solver)}, {"steps_sweep", sweep}});
  out << text;
  return kExitOk;
}

struct PlotArgs {
  std::string kind;
  std::vector<std::string> logs;
  std::vector<std::string> reports;
  std::vector<std::string> labels;
  std::string checkpoint;
  std::string dataset;
  int draws = 100000;
  std::uint64_t seed = 0;
  std::string out;
};

std::string series_label(const PlotArgs& a, std::size_t i, const std::string& path) {
  if (i < a.labels.size()) return a.labels[i];
  const fs::path p(path);
  const std::string parent = p.parent_path().filename().string();
  return parent.empty() ? p.stem().string() : parent;
}

int cmd_plot(const PlotArgs& a, std::ostream& out) {
  const fs::path img_path(a.out);
  fs::path csv_path = img_path;
  csv_path.replace_extension(".csv");
  ensure_parent(img_path);
  json resolved{{"kind", a.kind}, {"out", a.out}, {"csv", csv_path.string()}};
  std::ostringstream tidy;
  tidy << std::setprecision(10);

  if (a.kind == "bpd" || a.kind == "ged-vs-steps") {
    const bool bpd = a.kind == "bpd";
    const auto& inputs = bpd ? a.logs : a.reports;
    if (inputs.empty()) throw UsageError(bpd ? "bpd plots need --log" : "ged-vs-steps plots need --report");
    std::vector<render::Series> series;
    tidy << "series," << (bpd ? "step,bpd" : "steps,ged16") << '\n';
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      require_path(inputs[i], "input CSV");
      const Csv csv = read_csv(inputs[i]);
      const int xc = csv.column(bpd ? "step" : "solver_steps");
      const int yc = csv.column(bpd ? "eval_bpd" : "ged16");
      if (xc < 0 || yc < 0) {
        throw std::runtime_error(inputs[i] + (bpd ? " lacks step/eval_bpd columns" : " lacks solver_steps/ged16 columns"));
      }
      render::Series s;
      s.label = series_label(a, i, inputs[i]);
      for (const auto& row : csv.rows) {
        if (static_cast<int>(row.size()) <= std::max(xc, yc)) continue;
        const double y = cell_value(row[static_cast<std::size_t>(yc)]);
        if (!std::isfinite(y)) continue;
        s.x.push_back(cell_value(row[static_cast<std::size_t>(xc)]));
        s.y.push_back(y);
        tidy << s.label << ',' << s.x.back() << ',' << y << '\n';
      }
      if (s.x.empty()) throw std::runtime_error(inputs[i] + " has no plottable rows");
      series.push_back(std::move(s));
    }
    render::ChartOptions o;
    o.title = bpd ? "validation bits per dim" : "GED(16) vs ODE steps";
    o.x_label = bpd ? "training step" : "solver steps";
    o.y_label = bpd ? "BPD" : "GED";
    o.log_x = !bpd;
    render::write_ppm(img_path, render::line_chart(series, o));
    resolved["inputs"] = inputs;
  } else {
    if (a.checkpoint.empty() || a.dataset.empty()) {
      throw UsageError("covariance plots need --checkpoint and --dataset");
    }
    require_path(a.checkpoint, "checkpoint");
    require_path(a.dataset, "dataset");
    const datagen::Dataset ds = datagen::dataset_read(a.dataset);
    const Eigen::MatrixXd exact = exact_covariance(ds);
    train::DataShape shape;
    auto model = train::load_model(a.checkpoint, nullptr, &shape);
    check_compatible(shape, ds);
    Eigen::MatrixXd learned;
    {
      nn::ShadowScope ema(model->params());
      learned = train::model_label_covariance(*model, a.draws, a.seed);
    }
    double scale = 0.0;
    render::write_ppm(img_path, render::heatmap_pair(exact, learned, "ground truth", "learned", &scale));
    tidy << "panel,row,col,value\n";
    for (const auto& [name, m] : {std::pair{"ground_truth", &exact}, std::pair{"learned", static_cast<const Eigen::MatrixXd*>(&learned)}}) {
      for (Eigen::Index r = 0; r < m->rows(); ++r) {
        for (Eigen::Index c = 0; c < m->cols(); ++c) tidy << name << ',' << r << ',' << c << ',' << (*m)(r, c) << '\n';
      }
    }
    const double err = (learned - exact).norm();
    resolved.update({{"checkpoint", a.checkpoint}, {"dataset", a.dataset}, {"draws", a.draws},
                     {"seed", a.seed}, {"colour_scale", scale}, {"frobenius_error", err}});
    out << "frobenius error " << err << '\n';
  }
  write_text(csv_path, tidy.str());
  write_manifest(sidecar(img_path), "plot", resolved);
  out << "wrote " << img_path.string() << " and " << csv_path.string() << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Flow stochastic segmentation networks: data, training, sampling and evaluation"};
  app.name("flowssn");
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "Generate a synthetic dataset");
  g->add_option("--dataset", gen.dataset, "markovshapes | multirater")
      ->required()
      ->check(CLI::IsMember({"markovshapes", "multirater"}));
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Generator seed");
  gen.count_opt = g->add_option("--count", gen.count, "Number of records (10000 / 1000)");
  gen.quadrant_opt = g->add_option("--quadrant-size", gen.quadrant_size, "MarkovShapes quadrant side");
  gen.raters_opt = g->add_option("--raters", gen.raters, "Multirater annotators per image");
  gen.shape_opt = g->add_option("--shape", gen.shape, "Multirater image shape HxW");

  RankArgs rk;
  auto* r = app.add_subcommand("analyze-rank", "Rank and effective-rank analysis of covariances");
  auto* rd = r->add_option("--dataset", rk.dataset, "Dataset directory");
  auto* rs = r->add_option("--synthetic", rk.synthetic, "k,d for the random low-rank family");
  rd->excludes(rs);
  r->add_option("--ranks", rk.ranks, "Comma-separated rank grid");
  r->add_option("--samples", rk.samples, "Monte Carlo samples per rank");
  r->add_option("--seed", rk.seed, "Root seed");
  r->add_option("--rel-tol", rk.rel_tol, "Relative tolerance for numerical rank");
  r->add_option("--exact-rel-tol", rk.exact_rel_tol, "Tolerance for the exact covariance");
  r->add_option("--diag", rk.diag, "Diagonal variance of the random family");
  r->add_option("--out", rk.out, "Output CSV")->required();
  r->add_option("--heatmaps", rk.heatmaps, "Heatmap directory (default next to the CSV)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model from a run config");
  t->add_option("--config", tr.config, "Run config (JSON)")->required();
  t->add_option("--out", tr.out, "Output directory (overrides the config)");
  t->add_option("--dataset", tr.dataset, "Training dataset (overrides the config)");
  t->add_option("--val-dataset", tr.val_dataset, "Validation dataset (overrides the config)");
  tr.seed_opt = t->add_option("--seed", tr.seed, "Seed (overrides the config)");
  tr.steps_opt = t->add_option("--max-steps", tr.max_steps, "Step budget (overrides the config)");

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "Draw label maps from a checkpoint");
  s->add_option("--checkpoint", sa.checkpoint, "Checkpoint file")->required();
  s->add_option("--out", sa.out, "Output directory")->required();
  s->add_option("--m", sa.m, "Samples per image");
  sa.steps_opt = s->add_option("--steps", sa.steps, "Euler steps (continuous models)");
  s->add_flag("--adaptive", sa.adaptive, "Adaptive Dormand-Prince solver");
  s->add_option("--tol", sa.tol, "Adaptive solver tolerance");
  s->add_option("--dataset", sa.dataset, "Dataset with input images (conditional models)");
  s->add_option("--images", sa.images, "Number of inputs / unconditional sample sets");
  s->add_option("--index", sa.index, "First dataset record");
  s->add_option("--seed", sa.seed, "Sampling seed");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Compute GED, diversity, Dice, HM-IoU (or BPD)");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--dataset", ev.dataset, "Evaluation dataset")->required();
  e->add_option("--out", ev.out, "Output CSV")->required();
  e->add_option("--m", ev.m, "Samples per image");
  e->add_option("--images", ev.images, "Number of evaluation images");
  e->add_option("--bpd-samples", ev.bpd_samples, "Latent draws for BPD");
  e->add_option("--seed", ev.seed, "Evaluation seed");
  ev.steps_opt = e->add_option("--steps", ev.steps, "Euler steps (continuous models)");
  e->add_flag("--adaptive", ev.adaptive, "Adaptive Dormand-Prince solver");
  e->add_option("--tol", ev.tol, "Adaptive solver tolerance");
  e->add_option("--steps-sweep", ev.sweep, "Comma-separated Euler step counts, one row each");

  PlotArgs pl;
  auto* p = app.add_subcommand("plot", "Render charts and tidy CSVs");
  p->add_option("--kind", pl.kind, "bpd | ged-vs-steps | covariance")
      ->required()
      ->check(CLI::IsMember({"bpd", "ged-vs-steps", "covariance"}));
  p->add_option("--log", pl.logs, "Training log CSV (repeatable)");
  p->add_option("--report", pl.reports, "Evaluation CSV with solver_steps (repeatable)");
  p->add_option("--label", pl.labels, "Series label (repeatable, in input order)");
  p->add_option("--checkpoint", pl.checkpoint, "Checkpoint (covariance)");
  p->add_option("--dataset", pl.dataset, "MarkovShapes dataset (covariance)");
  p->add_option("--draws", pl.draws, "Latent draws for the learned covariance");
  p->add_option("--seed", pl.seed, "Sampling seed");
  p->add_option("--out", pl.out, "Output image (.ppm); the CSV goes next to it")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  try {
    if (*g) return cmd_generate(gen, out);
    if (*r) return cmd_rank(rk, out);
    if (*t) return cmd_train(tr, out);
    if (*s) return cmd_sample(sa, out, err);
    if (*e) return cmd_evaluate(ev, out, err);
    return cmd_plot(pl, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace flowssn::cli
