#pragma once

// Dependency-free raster plotting for the evaluation figures: cumulative
// posterior curves per method, rendered to PNG with a built-in 5x7 bitmap
// font and the 1-AUC values in the legend.

#include <torch/torch.h>

#include <array>
#include <string>
#include <vector>

#include "stainshift/evalkit.hpp"

namespace stainshift::plotting {

struct Series {
  std::string label;                          // drawn uppercase in the legend
  std::array<double, 3> color{0.0, 0.0, 0.0}; // RGB in [0,1]
  std::vector<double> x;                      // in [0,1]
  std::vector<double> y;                      // in [0,1]
};

struct FigureOptions {
  int width = 640;
  int height = 440;
  std::string title;
  std::string x_label;
  std::string y_label;
};

// Distinct line color for the i-th series.
std::array<double, 3> palette_color(std::size_t index);

// White canvas with axes, ticks, grid, title and a legend; (3,H,W) float in
// [0,1]. Throws std::invalid_argument on empty/malformed series.
torch::Tensor render_figure(const std::vector<Series>& series,
                            const FigureOptions& options);

void write_figure(const std::vector<Series>& series,
                  const FigureOptions& options, const std::string& path);

// Renders the two cumulative-histogram panels for a metrics report (nucleus
// posteriors and background complement posteriors, one curve per method,
// legend entries like "PROPOSED (1-AUC=0.0123)") into out_dir and returns
// the written paths.
std::vector<std::string> render_metrics_plots(
    const evalkit::MetricsReport& report, const std::string& out_dir);

}  // namespace stainshift::plotting
