#include "isod/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace isod {

GrayImage::GrayImage(Raster<double> px, double t, std::int64_t index)
    : pixels(std::move(px)), timestamp(t), frame_index(index) {
    if (pixels.width() < kMinSide || pixels.height() < kMinSide)
        throw DimensionError("gray image must be at least " + std::to_string(kMinSide) +
                             " pixels per side, got " + std::to_string(pixels.width()) +
                             "x" + std::to_string(pixels.height()));
    if (t < 0.0) throw std::invalid_argument("frame timestamp must be non-negative");
}

GrayImage to_grayscale(const ColorImage& color) {
    const int w = color.r.width();
    const int h = color.r.height();
    if (color.g.width() != w || color.g.height() != h || color.b.width() != w ||
        color.b.height() != h)
        throw DimensionError("color channels have mismatched dimensions");

    Raster<double> out(w, h);
    const auto r = color.r.values();
    const auto g = color.g.values();
    const auto b = color.b.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] = std::clamp(0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i], 0.0, 1.0);
    return GrayImage(std::move(out));
}

std::uint8_t to_u8(double intensity) noexcept {
    const double v = std::clamp(intensity, 0.0, 1.0) * 255.0;
    return static_cast<std::uint8_t>(std::lround(v));
}

double from_u8(std::uint8_t level) noexcept { return static_cast<double>(level) / 255.0; }

Raster<std::uint8_t> quantize_u8(const Raster<double>& px) {
    Raster<std::uint8_t> out(px.width(), px.height());
    auto dst = out.values();
    auto src = px.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = to_u8(src[i]);
    return out;
}

Raster<double> dequantize_u8(const Raster<std::uint8_t>& px) {
    Raster<double> out(px.width(), px.height());
    auto dst = out.values();
    auto src = px.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = from_u8(src[i]);
    return out;
}

} // namespace isod
