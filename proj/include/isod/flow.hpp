#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "isod/image.hpp"

namespace isod {

// Axis-aligned pixel rectangle in reference-frame coordinates.
struct Roi {
    int x0 = 0;
    int y0 = 0;
    int width = 0;
    int height = 0;

    int x1() const noexcept { return x0 + width - 1; }  // inclusive
    int y1() const noexcept { return y0 + height - 1; }
    long long area() const noexcept { return static_cast<long long>(width) * height; }

    // Throws DimensionError unless the ROI keeps `margin` pixels from every
    // image border and covers at least 9 pixels.
    void validate(int image_width, int image_height, int margin) const;
    bool fits(int image_width, int image_height, int margin) const noexcept;

    friend bool operator==(const Roi&, const Roi&) = default;
};

enum class Interpolation { Bicubic, Bilinear };

struct FlowConfig {
    int window_half = 1;            // 1 -> 3x3 window
    double min_eigen_tol = 1e-4;    // on the structure matrix divided by window pixel count
    int max_iterations = 20;
    double convergence_eps = 1e-3;  // px
    int pyramid_levels = 1;
    // Sampler for the warped image inside the refinement loop.
    Interpolation interpolation = Interpolation::Bicubic;

    void validate() const;
    // Pixels a ROI must keep from the image border.
    int margin() const noexcept { return window_half + 1; }
    // Largest admissible update relative to the seed estimate.
    double search_bound() const noexcept;

    friend bool operator==(const FlowConfig&, const FlowConfig&) = default;
};

struct DisplacementField {
    Roi roi;
    Raster<double> u;
    Raster<double> v;
    Raster<std::uint8_t> valid;
    Raster<std::int32_t> iterations_used;

    DisplacementField() = default;
    explicit DisplacementField(const Roi& r);  // all-zero, all-valid

    std::size_t valid_count() const noexcept;

    friend bool operator==(const DisplacementField&, const DisplacementField&) = default;
};

struct GradientField {
    Raster<double> ix;
    Raster<double> iy;
    Raster<double> it;
};

// Central differences over `region`; the region must stay 1 px inside the image.
std::pair<Raster<double>, Raster<double>> spatial_gradients(const GrayImage& img, const Roi& region);

// it = def - ref over `region`.
Raster<double> temporal_gradient(const GrayImage& ref, const GrayImage& def, const Roi& region);

struct WindowSolution {
    double u = 0.0;
    double v = 0.0;
    double min_eigenvalue = 0.0;  // of A^T A / window pixel count
    bool degenerate = false;
};

// Least-squares motion of a (2 window_half + 1)^2 window centered at
// (cx, cy) in gradient-raster coordinates: A^T A [u v]^T = A^T B with A the
// spatial gradients and B = -it.
WindowSolution solve_lk_window(const GradientField& grad, int cx, int cy, int window_half,
                               double min_eigen_tol);

// Dense per-pixel Lucas-Kanade over `roi` with iterative warping refinement
// and optional coarse-to-fine pyramid. `init`, when given, seeds the
// estimates at full resolution and the pyramid is not used.
DisplacementField solve_dense(const GrayImage& ref, const GrayImage& def, const Roi& roi,
                              const FlowConfig& cfg,
                              const DisplacementField* init = nullptr);

// Composes total (reference -> A) with increment (A -> B, sampled on the
// same ROI grid in A): total'(x) = increment(x + total(x)) + total(x).
DisplacementField accumulate(const DisplacementField& total, const DisplacementField& increment);

// Bilinear sample of a masked field at ROI-local (x, y). Fails when a
// contributing neighbour is invalid or the point is outside the raster.
bool sample_masked(const Raster<double>& field, const Raster<std::uint8_t>& valid, double x,
                   double y, double& out) noexcept;

// Samples the (2 half + 1)^2 grid centered at (cx, cy) into `out`, row by
// row. All grid points share one fractional offset, so interpolation
// weights are computed once. Fails when any grid point leaves the image.
bool sample_patch(const Raster<double>& img, double cx, double cy, int half, Interpolation interp,
                  std::span<double> out) noexcept;

// 2x box-filter downsampling (odd trailing row/column dropped).
Raster<double> downsample2(const Raster<double>& src);

} // namespace isod
