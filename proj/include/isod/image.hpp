#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "isod/errors.hpp"

namespace isod {

// Row-major 2D buffer. Coordinates are (x, y) with x along a row.
template <class T>
class Raster {
public:
    Raster() = default;
    Raster(int width, int height, T fill = T{})
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(checked_area(width, height)), fill) {}
    Raster(int width, int height, std::vector<T> data)
        : width_(width), height_(height), data_(std::move(data)) {
        if (data_.size() != static_cast<std::size_t>(checked_area(width, height)))
            throw DimensionError("raster data length does not match width x height");
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int x, int y) noexcept { return data_[index(x, y)]; }
    const T& operator()(int x, int y) const noexcept { return data_[index(x, y)]; }

    std::span<T> row(int y) noexcept {
        return {data_.data() + index(0, y), static_cast<std::size_t>(width_)};
    }
    std::span<const T> row(int y) const noexcept {
        return {data_.data() + index(0, y), static_cast<std::size_t>(width_)};
    }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    bool contains(int x, int y) const noexcept {
        return x >= 0 && y >= 0 && x < width_ && y < height_;
    }

    friend bool operator==(const Raster&, const Raster&) = default;

private:
    static long long checked_area(int w, int h) {
        if (w < 0 || h < 0) throw DimensionError("negative raster dimension");
        return static_cast<long long>(w) * h;
    }
    std::size_t index(int x, int y) const noexcept {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(x);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

// Single-channel intensity frame, values normalized to [0, 1].
struct GrayImage {
    static constexpr int kMinSide = 8;

    Raster<double> pixels;
    double timestamp = 0.0;      // seconds since run start
    std::int64_t frame_index = 0;

    GrayImage() = default;
    GrayImage(Raster<double> px, double t = 0.0, std::int64_t index = 0);

    int width() const noexcept { return pixels.width(); }
    int height() const noexcept { return pixels.height(); }
    double operator()(int x, int y) const noexcept { return pixels(x, y); }
};

// Planar RGB raster with channels in [0, 1].
struct ColorImage {
    Raster<double> r, g, b;
};

// Luminance 0.299 R + 0.587 G + 0.114 B, clamped to [0, 1].
GrayImage to_grayscale(const ColorImage& color);

// 8-bit round trip used at acquisition and storage boundaries.
std::uint8_t to_u8(double intensity) noexcept;
double from_u8(std::uint8_t level) noexcept;
Raster<std::uint8_t> quantize_u8(const Raster<double>& px);
Raster<double> dequantize_u8(const Raster<std::uint8_t>& px);

} // namespace isod
