#include "flowsr/plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace flowsr {

namespace {

void put_px(Tensor& img, int y, int x, float r, float g, float b) {
    if (y < 0 || y >= img.dim(0) || x < 0 || x >= img.dim(1)) return;
    img.at(y, x, 0) = r;
    img.at(y, x, 1) = g;
    img.at(y, x, 2) = b;
}

void draw_line(Tensor& img, int y0, int x0, int y1, int x1, float r, float g, float b) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        put_px(img, y0, x0, r, g, b);
        if (x0 == x1 && y0 == y1) break;
        int e2 = 2 * err;
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

void draw_marker(Tensor& img, int y, int x, float r, float g, float b) {
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) put_px(img, y + dy, x + dx, r, g, b);
}

}  // namespace

Tensor render_line_plot(const std::vector<PlotSeries>& series, int width, int height) {
    if (series.empty()) throw std::invalid_argument("render_line_plot: no series");
    Tensor img = Tensor::full({height, width, 3}, 1.0f);

    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size())
            throw std::invalid_argument("render_line_plot: x/y length mismatch");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (!std::isfinite(xmin) || !std::isfinite(ymin))
        throw std::invalid_argument("render_line_plot: no finite data");
    if (xmax == xmin) xmax = xmin + 1.0;
    if (ymax == ymin) ymax = ymin + 1.0;
    const double xpad = 0.05 * (xmax - xmin), ypad = 0.05 * (ymax - ymin);
    xmin -= xpad;
    xmax += xpad;
    ymin -= ypad;
    ymax += ypad;

    const int ml = 48, mr = 16, mt = 16, mb = 36;
    const int x0 = ml, x1 = width - mr, y0 = height - mb, y1 = mt;
    auto px = [&](double x) {
        return x0 + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (x1 - x0)));
    };
    auto py = [&](double y) {
        return y0 - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (y0 - y1)));
    };

    // frame and gridlines
    draw_line(img, y0, x0, y0, x1, 0.2f, 0.2f, 0.2f);
    draw_line(img, y0, x0, y1, x0, 0.2f, 0.2f, 0.2f);
    for (int t = 1; t <= 4; ++t) {
        int gy = y0 - t * (y0 - y1) / 4;
        for (int x = x0; x <= x1; x += 3) put_px(img, gy, x, 0.85f, 0.85f, 0.85f);
        int gx = x0 + t * (x1 - x0) / 4;
        for (int y = y1; y <= y0; y += 3) put_px(img, y, gx, 0.85f, 0.85f, 0.85f);
    }

    for (const auto& s : series) {
        for (std::size_t i = 0; i + 1 < s.x.size(); ++i)
            draw_line(img, py(s.y[i]), px(s.x[i]), py(s.y[i + 1]), px(s.x[i + 1]), s.r, s.g,
                      s.b);
        if (s.markers)
            for (std::size_t i = 0; i < s.x.size(); ++i)
                draw_marker(img, py(s.y[i]), px(s.x[i]), s.r, s.g, s.b);
    }
    return img;
}

}  // namespace flowsr
