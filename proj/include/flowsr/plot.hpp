#pragma once

// Minimal line-plot rendering for diagnostic PNGs. Not a charting library:
// axes, polylines, and sample markers are all that the diagnostics need.

#include <vector>

#include "flowsr/tensor.hpp"

namespace flowsr {

struct PlotSeries {
    std::vector<double> x;
    std::vector<double> y;
    float r = 0.1f, g = 0.3f, b = 0.8f;
    bool markers = true;
};

Tensor render_line_plot(const std::vector<PlotSeries>& series, int width = 640,
                        int height = 480);

}  // namespace flowsr
