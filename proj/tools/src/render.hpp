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

// Portable pixmap/graymap output and a minimal raster chart renderer.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace flowssn::render {

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h, Rgb fill = {255, 255, 255});
  void set(int x, int y, Rgb c);
  Rgb get(int x, int y) const;
  void fill_rect(int x0, int y0, int w, int h, Rgb c);
  /// Copies src with its top-left corner at (x, y), clipped to this image.
  void blit(const Image& src, int x, int y);
};

/// Binary P6 file. Throws std::runtime_error naming the path on failure.
void write_ppm(const std::filesystem::path& path, const Image& image);
/// Binary P5 file; comment lines are written into the header verbatim.
void write_pgm(const std::filesystem::path& path, int width, int height,
               const std::vector<std::uint8_t>& gray, const std::vector<std::string>& comments = {});

struct GrayMap {
  std::vector<std::uint8_t> pixels;
  double min = 0.0;
  double max = 0.0;
};

/// Linear map of [lo, hi] onto 0..255 (row-major over the matrix); a constant input maps to 0.
GrayMap to_gray(const Eigen::MatrixXd& m, double lo, double hi);
GrayMap to_gray(const Eigen::MatrixXd& m);

/// Writes a heatmap scaled to [min, max] of the data with the scale in the header comments.
GrayMap write_heatmap_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& m);

/// Blue-white-red colour for v in [-1, 1].
Rgb diverging(double v);

/// Glyphs are 3x5 cells; unsupported characters render blank. Letters are upper-cased.
void draw_text(Image& img, int x, int y, const std::string& text, Rgb c, int scale = 2);
int text_width(const std::string& text, int scale = 2);
void draw_line(Image& img, int x0, int y0, int x1, int y1, Rgb c, int thickness = 1);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  int width = 640;
  int height = 420;
};

/// Line chart with markers, min/max tick labels and a legend in series order.
Image line_chart(const std::vector<Series>& series, const ChartOptions& options);

/// Side-by-side heatmaps with one shared symmetric colour scale and a colour bar.
Image heatmap_pair(const Eigen::MatrixXd& left, const Eigen::MatrixXd& right,
                   const std::string& left_title, const std::string& right_title,
                   double* scale_out = nullptr);

/// Category colours for label previews; index 0 is background.
Rgb category_colour(int c);

}  // namespace flowssn::render
