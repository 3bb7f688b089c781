#include "isod/speckle.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace isod {

void SpeckleSpec::validate() const {
    if (width <= 0 || height <= 0)
        throw DimensionError("speckle image has zero area (" + std::to_string(width) + "x" +
                             std::to_string(height) + ")");
    if (!(dot_density >= 0.0)) throw std::invalid_argument("dot_density must be >= 0");
    if (!(radius_min >= 0.5) || !(radius_max >= radius_min))
        throw std::invalid_argument("dot radius range must satisfy 0.5 <= min <= max");
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(background_level) || !in_unit(dot_level))
        throw std::invalid_argument("speckle intensity levels must lie in [0, 1]");
    if (!(blur_sigma >= 0.0)) throw std::invalid_argument("blur_sigma must be >= 0");
}

Raster<double> gaussian_blur(const Raster<double>& src, double sigma) {
    if (!(sigma > 0.0)) return src;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) k /= sum;

    const int w = src.width();
    const int h = src.height();
    Raster<double> tmp(w, h);
    for (int y = 0; y < h; ++y) {
        const auto in = src.row(y);
        auto out = tmp.row(y);
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * in[std::clamp(x + i, 0, w - 1)];
            out[x] = acc;
        }
    }
    Raster<double> dst(w, h);
    for (int y = 0; y < h; ++y) {
        auto out = dst.row(y);
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * tmp(x, std::clamp(y + i, 0, h - 1));
            out[x] = acc;
        }
    }
    return dst;
}

GrayImage generate_speckle(const SpeckleSpec& spec) {
    spec.validate();
    const int w = spec.width;
    const int h = spec.height;

    // Dots are scattered over a padded domain so the border is as densely
    // covered as the interior.
    const double pad = spec.radius_max + 1.0;
    const double dom_w = w + 2.0 * pad;
    const double dom_h = h + 2.0 * pad;

    std::mt19937_64 rng(spec.rng_seed);
    Raster<double> coverage(w, h, 0.0);
    if (spec.dot_density > 0.0) {
        std::poisson_distribution<long long> count_dist(spec.dot_density * dom_w * dom_h / 1000.0);
        std::uniform_real_distribution<double> ux(-pad, w + pad);
        std::uniform_real_distribution<double> uy(-pad, h + pad);
        std::uniform_real_distribution<double> ur(spec.radius_min, spec.radius_max);
        const long long count = count_dist(rng);
        for (long long n = 0; n < count; ++n) {
            const double cx = ux(rng);
            const double cy = uy(rng);
            const double r = ur(rng);
            const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1.0)));
            const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r + 1.0)));
            const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1.0)));
            const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r + 1.0)));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double d = std::hypot(x - cx, y - cy);
                    const double c = std::clamp(r + 0.5 - d, 0.0, 1.0);
                    double& cov = coverage(x, y);
                    cov = std::max(cov, c);
                }
            }
        }
    }

    Raster<double> img(w, h);
    auto dst = img.values();
    auto cov = coverage.values();
    const double span = spec.dot_level - spec.background_level;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = spec.background_level + span * cov[i];

    Raster<double> blurred = gaussian_blur(img, spec.blur_sigma);
    for (double& v : blurred.values()) v = std::clamp(v, 0.0, 1.0);
    return GrayImage(std::move(blurred));
}

} // namespace isod
