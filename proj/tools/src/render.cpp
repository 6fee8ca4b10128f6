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

#include "render.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace flowssn::render {

namespace {

// Rows top to bottom, three columns each.
const std::map<char, const char*>& glyphs() {
  static const std::map<char, const char*> g{
      {'0', "111101101101111"}, {'1', "010110010010111"}, {'2', "111001111100111"},
      {'3', "111001111001111"}, {'4', "101101111001001"}, {'5', "111100111001111"},
      {'6', "111100111101111"}, {'7', "111001001001001"}, {'8', "111101111101111"},
      {'9', "111101111001111"}, {'A', "010101111101101"}, {'B', "110101110101110"},
      {'C', "011100100100011"}, {'D', "110101101101110"}, {'E', "111100110100111"},
      {'F', "111100110100100"}, {'G', "011100101101011"}, {'H', "101101111101101"},
      {'I', "111010010010111"}, {'J', "001001001101010"}, {'K', "101101110101101"},
      {'L', "100100100100111"}, {'M', "101111111101101"}, {'N', "110101101101101"},
      {'O', "010101101101010"}, {'P', "110101110100100"}, {'Q', "010101101110011"},
      {'R', "110101110101101"}, {'S', "011100010001110"}, {'T', "111010010010010"},
      {'U', "101101101101111"}, {'V', "101101101101010"}, {'W', "101101111111101"},
      {'X', "101101010101101"}, {'Y', "101101010010010"}, {'Z', "111001010100111"},
      {'.', "000000000000010"}, {'-', "000000111000000"}, {'=', "000111000111000"},
      {'_', "000000000000111"}, {':', "000010000010000"}, {',', "000000000010100"},
      {'(', "001010010010001"}, {')', "100010010010100"}, {'/', "001001010100100"},
      {'+', "000010111010000"}, {'[', "011010010010011"}, {']', "110010010010110"}};
  return g;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::ofstream open_binary(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  return out;
}

const std::array<Rgb, 8> kSeriesColours{{{31, 119, 180},
                                        {214, 39, 40},
                                        {44, 160, 44},
                                        {255, 127, 14},
                                        {148, 103, 189},
                                        {140, 86, 75},
                                        {227, 119, 194},
                                        {127, 127, 127}}};

}  // namespace

Image::Image(int w, int h, Rgb fill) : width(w), height(h) {
  if (w < 0 || h < 0) throw std::invalid_argument("image size must be non-negative");
  rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < rgb.size(); i += 3) {
    rgb[i] = fill[0];
    rgb[i + 1] = fill[1];
    rgb[i + 2] = fill[2];
  }
}

void Image::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
  rgb[i] = c[0];
  rgb[i + 1] = c[1];
  rgb[i + 2] = c[2];
}

Rgb Image::get(int x, int y) const {
  const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

void Image::fill_rect(int x0, int y0, int w, int h, Rgb c) {
  for (int y = y0; y < y0 + h; ++y) {
    for (int x = x0; x < x0 + w; ++x) set(x, y, c);
  }
}

void Image::blit(const Image& src, int x0, int y0) {
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) set(x0 + x, y0 + y, src.get(x, y));
  }
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out = open_binary(path);
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()),
            static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_pgm(const std::filesystem::path& path, int width, int height,
               const std::vector<std::uint8_t>& gray, const std::vector<std::string>& comments) {
  if (gray.size() != static_cast<std::size_t>(width) * height) {
    throw std::invalid_argument("write_pgm: pixel count does not match size");
  }
  std::ofstream out = open_binary(path);
  out << "P5\n";
  for (const auto& c : comments) out << "# " << c << '\n';
  out << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

GrayMap to_gray(const Eigen::MatrixXd& m, double lo, double hi) {
  GrayMap g;
  g.min = lo;
  g.max = hi;
  g.pixels.resize(static_cast<std::size_t>(m.size()));
  const double span = hi - lo;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v = span > 0.0 ? (m(r, c) - lo) / span : 0.0;
      v = std::clamp(v, 0.0, 1.0);
      g.pixels[static_cast<std::size_t>(r * m.cols() + c)] =
          static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return g;
}

GrayMap to_gray(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return {};
  return to_gray(m, m.minCoeff(), m.maxCoeff());
}

GrayMap write_heatmap_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  const GrayMap g = to_gray(m);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "scale min=%.17g max=%.17g", g.min, g.max);
  write_pgm(path, static_cast<int>(m.cols()), static_cast<int>(m.rows()), g.pixels, {buf});
  return g;
}

Rgb diverging(double v) {
  v = std::clamp(v, -1.0, 1.0);
  auto mix = [](double a, double b, double t) {
    return static_cast<std::uint8_t>(std::lround(a + (b - a) * t));
  };
  if (v >= 0.0) return {mix(255, 178, v), mix(255, 24, v), mix(255, 43, v)};
  return {mix(255, 33, -v), mix(255, 102, -v), mix(255, 172, -v)};
}

int text_width(const std::string& text, int scale) {
  return static_cast<int>(text.size()) * 4 * scale;
}

void draw_text(Image& img, int x, int y, const std::string& text, Rgb c, int scale) {
  const auto& g = glyphs();
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(text[i])));
    const auto it = g.find(ch);
    if (it == g.end()) continue;
    const int ox = x + static_cast<int>(i) * 4 * scale;
    for (int row = 0; row < 5; ++row) {
      for (int col = 0; col < 3; ++col) {
        if (it->second[row * 3 + col] == '1') {
          img.fill_rect(ox + col * scale, y + row * scale, scale, scale, c);
        }
      }
    }
  }
}

void draw_line(Image& img, int x0, int y0, int x1, int y1, Rgb c, int thickness) {
  const int dx = std::abs(x1 - x0);
  const int dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1;
  const int sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  const int half = thickness / 2;
  while (true) {
    img.fill_rect(x0 - half, y0 - half, thickness, thickness, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

Image line_chart(const std::vector<Series>& series, const ChartOptions& o) {
  if (series.empty()) throw std::invalid_argument("line_chart: no series");
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  auto xt = [&](double x) { return o.log_x ? std::log10(x) : x; };
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("line_chart: ragged series");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      if (o.log_x && !(s.x[i] > 0.0)) throw std::invalid_argument("line_chart: log axis needs x > 0");
      xmin = std::min(xmin, xt(s.x[i]));
      xmax = std::max(xmax, xt(s.x[i]));
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin)) throw std::invalid_argument("line_chart: no finite points");
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;

  Image img(o.width, o.height);
  const Rgb black{0, 0, 0};
  const Rgb grid{225, 225, 225};
  const int left = 80, right = 20, top = 40, bottom = 60;
  const int pw = o.width - left - right;
  const int ph = o.height - top - bottom;
  auto px = [&](double x) { return left + static_cast<int>(std::lround((xt(x) - xmin) / (xmax - xmin) * pw)); };
  auto py = [&](double y) { return top + ph - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * ph)); };

  for (int i = 1; i < 4; ++i) {
    draw_line(img, left, top + ph * i / 4, left + pw, top + ph * i / 4, grid);
    draw_line(img, left + pw * i / 4, top, left + pw * i / 4, top + ph, grid);
  }
  draw_line(img, left, top, left, top + ph, black);
  draw_line(img, left, top + ph, left + pw, top + ph, black);
  draw_text(img, left, 12, o.title, black, 2);
  draw_text(img, left + pw / 2 - text_width(o.x_label) / 2, o.height - 20, o.x_label, black, 2);
  draw_text(img, 6, top - 16, o.y_label, black, 2);
  const std::string ylo = format_number(ymin + pad), yhi = format_number(ymax - pad);
  draw_text(img, left - 6 - text_width(ylo), py(ymin + pad) - 5, ylo, black, 2);
  draw_text(img, left - 6 - text_width(yhi), py(ymax - pad) - 5, yhi, black, 2);
  const double x_lo = o.log_x ? std::pow(10.0, xmin) : xmin;
  const double x_hi = o.log_x ? std::pow(10.0, xmax) : xmax;
  draw_text(img, left, top + ph + 8, format_number(x_lo), black, 2);
  draw_text(img, left + pw - text_width(format_number(x_hi)), top + ph + 8, format_number(x_hi),
            black, 2);

  for (std::size_t s = 0; s < series.size(); ++s) {
    const Rgb col = kSeriesColours[s % kSeriesColours.size()];
    const auto& ser = series[s];
    int prev_x = 0, prev_y = 0;
    bool have_prev = false;
    for (std::size_t i = 0; i < ser.x.size(); ++i) {
      if (!std::isfinite(ser.y[i])) {
        have_prev = false;
        continue;
      }
      const int x = px(ser.x[i]);
      const int y = py(ser.y[i]);
      if (have_prev) draw_line(img, prev_x, prev_y, x, y, col, 2);
      if (ser.x.size() <= 64) img.fill_rect(x - 3, y - 3, 7, 7, col);
      prev_x = x;
      prev_y = y;
      have_prev = true;
    }
    const int ly = top + 8 + static_cast<int>(s) * 16;
    const int lx = left + pw - 12 - text_width(ser.label) - 20;
    img.fill_rect(lx, ly, 12, 10, col);
    draw_text(img, lx + 18, ly, ser.label, black, 2);
  }
  return img;
}

Image heatmap_pair(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const std::string& ta,
                   const std::string& tb, double* scale_out) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("heatmap_pair: panels differ in shape");
  }
  const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), 1e-300});
  if (scale_out != nullptr) *scale_out = scale;
  const int cell = std::max(1, 384 / static_cast<int>(std::max(a.rows(), a.cols())));
  const int pw = static_cast<int>(a.cols()) * cell;
  const int ph = static_cast<int>(a.rows()) * cell;
  const int gap = 24, top = 36, bar = 16;
  Image img(2 * pw + 3 * gap + bar + 90, ph + top + 24);
  const Rgb black{0, 0, 0};
  auto panel = [&](const Eigen::MatrixXd& m, int x0) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        img.fill_rect(x0 + static_cast<int>(c) * cell, top + static_cast<int>(r) * cell, cell, cell,
                      diverging(m(r, c) / scale));
      }
    }
  };
  panel(a, gap);
  panel(b, 2 * gap + pw);
  draw_text(img, gap, 12, ta, black, 2);
  draw_text(img, 2 * gap + pw, 12, tb, black, 2);
  const int bx = 3 * gap + 2 * pw;
  for (int y = 0; y < ph; ++y) {
    img.fill_rect(bx, top + y, bar, 1, diverging(1.0 - 2.0 * y / std::max(1, ph - 1)));
  }
  draw_text(img, bx + bar + 6, top, format_number(scale), black, 2);
  draw_text(img, bx + bar + 6, top + ph - 10, format_number(-scale), black, 2);
  return img;
}

Rgb category_colour(int c) {
  static const std::array<Rgb, 6> palette{{{20, 20, 20},
                                           {250, 250, 250},
                                           {230, 80, 60},
                                           {60, 170, 90},
                                           {70, 110, 220},
                                           {240, 200, 40}}};
  return palette[static_cast<std::size_t>(c) % palette.size()];
}

}  // namespace flowssn::render
