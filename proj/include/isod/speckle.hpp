#pragma once

#include <cstdint>

#include "isod/image.hpp"

namespace isod {

struct SpeckleSpec {
    int width = 256;
    int height = 256;
    double dot_density = 5.0;      // dots per 1000 px^2
    double radius_min = 1.0;       // px
    double radius_max = 3.0;       // px
    double background_level = 0.85;
    double dot_level = 0.1;
    double blur_sigma = 0.8;       // px, 0 disables blurring
    std::uint64_t rng_seed = 0;

    void validate() const;
    friend bool operator==(const SpeckleSpec&, const SpeckleSpec&) = default;
};

// Random dot pattern: uniformly placed, possibly overlapping anti-aliased
// discs on a flat background, then Gaussian-blurred. Pure function of `spec`.
GrayImage generate_speckle(const SpeckleSpec& spec);

// Separable Gaussian blur with edge clamping; sigma <= 0 returns the input.
Raster<double> gaussian_blur(const Raster<double>& src, double sigma);

} // namespace isod
