#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "isod/image.hpp"

namespace isod {

// Bilinear sample at (x, y). Returns false when (x, y) lies outside
// [0, width-1] x [0, height-1].
inline bool sample_bilinear(const Raster<double>& img, double x, double y, double& out) noexcept {
    const int w = img.width();
    const int h = img.height();
    if (!(x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1)) return false;
    int x0 = static_cast<int>(x);
    int y0 = static_cast<int>(y);
    if (x0 == w - 1) --x0;
    if (y0 == h - 1) --y0;
    const double fx = x - x0;
    const double fy = y - y0;
    const double* r0 = img.row(y0).data() + x0;
    const double* r1 = img.row(y0 + 1).data() + x0;
    const double top = r0[0] + fx * (r0[1] - r0[0]);
    const double bot = r1[0] + fx * (r1[1] - r1[0]);
    out = top + fy * (bot - top);
    return true;
}

// Keys cubic convolution kernel (a = -0.5); reproduces polynomials up to degree 2.
inline std::array<double, 4> cubic_weights(double t) noexcept {
    constexpr double a = -0.5;
    auto near = [](double s) { return ((a + 2.0) * s - (a + 3.0)) * s * s + 1.0; };
    auto far = [](double s) { return ((a * s - 5.0 * a) * s + 8.0 * a) * s - 4.0 * a; };
    return {far(1.0 + t), near(t), near(1.0 - t), far(2.0 - t)};
}

// Bicubic sample; coordinates outside the image return `fill`.
// Taps beyond the border are clamped to the edge row/column.
inline double sample_bicubic(const Raster<double>& img, double x, double y, double fill) noexcept {
    const int w = img.width();
    const int h = img.height();
    if (!(x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1)) return fill;
    const double fxl = std::floor(x);
    const double fyl = std::floor(y);
    const int xi = static_cast<int>(fxl);
    const int yi = static_cast<int>(fyl);
    const double tx = x - fxl;
    const double ty = y - fyl;
    if (tx == 0.0 && ty == 0.0) return img(xi, yi);

    const auto wx = cubic_weights(tx);
    const auto wy = cubic_weights(ty);
    double acc = 0.0;
    for (int j = 0; j < 4; ++j) {
        const int yy = std::clamp(yi - 1 + j, 0, h - 1);
        const auto row = img.row(yy);
        double racc = 0.0;
        for (int i = 0; i < 4; ++i) racc += wx[i] * row[std::clamp(xi - 1 + i, 0, w - 1)];
        acc += wy[j] * racc;
    }
    return acc;
}

} // namespace isod
