#include "stainshift/plotting.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <stdexcept>

#include "stainshift/image_io.hpp"

namespace stainshift::plotting {

namespace fs = std::filesystem;

namespace {

// 5x7 glyphs, one byte per row, bit 4 = leftmost column.
using Glyph = std::array<std::uint8_t, 7>;

const Glyph& glyph_for(char c) {
  static const std::map<char, Glyph> font = {
      {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
      {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0E}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
  };
  static const Glyph unknown = {0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F};
  auto it = font.find(c);
  return it == font.end() ? unknown : it->second;
}

struct Canvas {
  torch::Tensor image;  // (3,H,W) float32
  torch::TensorAccessor<float, 3> acc;
  int width, height;

  Canvas(int w, int h)
      : image(torch::ones({3, h, w}, torch::kFloat32)),
        acc(image.accessor<float, 3>()),
        width(w),
        height(h) {}

  void set(int x, int y, const std::array<double, 3>& color) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    for (int c = 0; c < 3; ++c) acc[c][y][x] = static_cast<float>(color[c]);
  }

  void fill_rect(int x0, int y0, int x1, int y1,
                 const std::array<double, 3>& color) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, color);
  }

  void line(int x0, int y0, int x1, int y1,
            const std::array<double, 3>& color, int thickness = 1) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    int x = x0, y = y0;
    while (true) {
      for (int t = 0; t < thickness; ++t) {
        set(x, y + t, color);
        set(x + t, y, color);
      }
      if (x == x1 && y == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y += sy;
      }
    }
  }

  void text(int x, int y, const std::string& s,
            const std::array<double, 3>& color) {
    int cx = x;
    for (char raw : s) {
      const char c = static_cast<char>(
          std::toupper(static_cast<unsigned char>(raw)));
      const Glyph& g = glyph_for(c);
      for (int row = 0; row < 7; ++row) {
        for (int col = 0; col < 5; ++col) {
          if (g[row] & (0x10 >> col)) set(cx + col, y + row, color);
        }
      }
      cx += 6;
    }
  }
};

constexpr std::array<double, 3> kBlack{0.05, 0.05, 0.05};
constexpr std::array<double, 3> kGrid{0.85, 0.85, 0.88};

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

void validate_series(const std::vector<Series>& series) {
  if (series.empty()) {
    throw std::invalid_argument("render_figure: no series");
  }
  for (const auto& s : series) {
    if (s.x.empty() || s.x.size() != s.y.size()) {
      throw std::invalid_argument("render_figure: series x/y length mismatch");
    }
    for (const auto& vs : {s.x, s.y}) {
      for (double v : vs) {
        if (!(v >= 0.0 && v <= 1.0)) {
          throw std::invalid_argument(
              "render_figure: series values must lie in [0,1]");
        }
      }
    }
  }
}

}  // namespace

std::array<double, 3> palette_color(std::size_t index) {
  static const std::vector<std::array<double, 3>> palette = {
      {0.10, 0.10, 0.10}, {0.84, 0.19, 0.16}, {0.17, 0.35, 0.80},
      {0.18, 0.60, 0.25}, {0.95, 0.60, 0.10}, {0.55, 0.25, 0.65},
  };
  return palette[index % palette.size()];
}

torch::Tensor render_figure(const std::vector<Series>& series,
                            const FigureOptions& options) {
  validate_series(series);
  if (options.width < 200 || options.height < 160) {
    throw std::invalid_argument("render_figure: canvas too small");
  }

  Canvas canvas(options.width, options.height);
  const int left = 70, right = 18, top = 30, bottom = 48;
  const int x0 = left, x1 = options.width - right;
  const int y0 = top, y1 = options.height - bottom;
  auto px = [&](double v) {
    return x0 + static_cast<int>(std::lround(v * (x1 - x0)));
  };
  auto py = [&](double v) {
    return y1 - static_cast<int>(std::lround(v * (y1 - y0)));
  };

  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    canvas.line(px(v), y0, px(v), y1, kGrid);
    canvas.line(x0, py(v), x1, py(v), kGrid);
  }
  canvas.line(x0, y0, x1, y0, kBlack);
  canvas.line(x0, y1, x1, y1, kBlack);
  canvas.line(x0, y0, x0, y1, kBlack);
  canvas.line(x1, y0, x1, y1, kBlack);
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    canvas.line(px(v), y1, px(v), y1 + 4, kBlack);
    canvas.line(x0 - 4, py(v), x0, py(v), kBlack);
    const std::string label = format_value(v).substr(0, 4);
    canvas.text(px(v) - 11, y1 + 8, label, kBlack);
    canvas.text(x0 - 4 - 6 * static_cast<int>(label.size()), py(v) - 3, label,
                kBlack);
  }

  canvas.text((options.width - 6 * static_cast<int>(options.title.size())) / 2,
              9, options.title, kBlack);
  canvas.text(
      (options.width - 6 * static_cast<int>(options.x_label.size())) / 2,
      options.height - 14, options.x_label, kBlack);
  canvas.text(8, y0 - 12, options.y_label, kBlack);

  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.x.size(); ++i) {
      canvas.line(px(s.x[i - 1]), py(s.y[i - 1]), px(s.x[i]), py(s.y[i]),
                  s.color, 2);
    }
    if (s.x.size() == 1) {
      canvas.fill_rect(px(s.x[0]) - 1, py(s.y[0]) - 1, px(s.x[0]) + 1,
                       py(s.y[0]) + 1, s.color);
    }
  }

  int ly = y0 + 8;
  for (const auto& s : series) {
    canvas.line(x0 + 10, ly + 3, x0 + 26, ly + 3, s.color, 2);
    canvas.text(x0 + 32, ly, s.label, kBlack);
    ly += 12;
  }

  return canvas.image;
}

void write_figure(const std::vector<Series>& series,
                  const FigureOptions& options, const std::string& path) {
  imageio::write_rgb8(path, render_figure(series, options));
}

std::vector<std::string> render_metrics_plots(
    const evalkit::MetricsReport& report, const std::string& out_dir) {
  if (report.methods.empty()) {
    throw std::invalid_argument("render_metrics_plots: empty report");
  }
  fs::create_directories(out_dir);

  struct Panel {
    const char* file;
    const char* title;
    const char* x_label;
  };
  const Panel panels[] = {
      {"nucleus_posteriors.png", "NUCLEUS POSTERIORS", "POSTERIOR"},
      {"background_posteriors.png", "BACKGROUND POSTERIORS", "1-POSTERIOR"},
  };

  std::vector<std::string> written;
  for (int panel = 0; panel < 2; ++panel) {
    std::vector<Series> series;
    std::size_t index = 0;
    for (const auto& [name, m] : report.methods) {
      const auto& curve = panel == 0 ? m.nucleus_curve : m.background_curve;
      const double score =
          panel == 0 ? m.nucleus_one_minus_auc : m.background_one_minus_auc;
      Series s;
      s.label = name + " (1-AUC=" + format_value(score) + ")";
      s.color = palette_color(index++);
      s.x = curve.edges;
      s.y = curve.cumulative;
      series.push_back(std::move(s));
    }
    FigureOptions options;
    options.title = panels[panel].title;
    options.x_label = panels[panel].x_label;
    options.y_label = "CUMULATIVE FRACTION";
    const auto path = (fs::path(out_dir) / panels[panel].file).string();
    write_figure(series, options, path);
    written.push_back(path);
  }
  return written;
}

}  // namespace stainshift::plotting
