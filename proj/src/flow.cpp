#include "isod/flow.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "isod/interpolate.hpp"

namespace isod {

namespace {

std::string rect_text(const Roi& r) {
    return "(" + std::to_string(r.x0) + ", " + std::to_string(r.y0) + ", " + std::to_string(r.width) +
           ", " + std::to_string(r.height) + ")";
}

struct Structure {
    double a11 = 0.0, a12 = 0.0, a22 = 0.0;
};

// Smaller eigenvalue of the symmetric 2x2 matrix [a11 a12; a12 a22].
double min_eigen(const Structure& s) noexcept {
    const double tr = s.a11 + s.a22;
    const double diff = s.a11 - s.a22;
    const double disc = std::sqrt(diff * diff + 4.0 * s.a12 * s.a12);
    return 0.5 * (tr - disc);
}

// Closed-form 2x2 inverse; false when the matrix is numerically singular
// relative to its trace or fails the normalized eigenvalue test.
struct Inverse2 {
    double i11 = 0.0, i12 = 0.0, i22 = 0.0;
    double min_eig_norm = 0.0;
    bool ok = false;
};

Inverse2 invert(const Structure& s, double window_pixels, double tol) noexcept {
    Inverse2 inv;
    inv.min_eig_norm = min_eigen(s) / window_pixels;
    const double tr = s.a11 + s.a22;
    const double det = s.a11 * s.a22 - s.a12 * s.a12;
    if (!(inv.min_eig_norm >= tol) || !(det > 1e-12 * tr * tr)) return inv;
    inv.i11 = s.a22 / det;
    inv.i12 = -s.a12 / det;
    inv.i22 = s.a11 / det;
    inv.ok = true;
    return inv;
}

struct LevelOutput {
    Raster<double> u, v;
    Raster<std::uint8_t> valid;
    Raster<std::int32_t> iterations;
};

// Solves every pixel of `region` (level coordinates) starting from the seed
// rasters. Pixels that cannot be solved keep their seed and are invalid.
LevelOutput solve_level(const Raster<double>& ref, const Raster<double>& def, const Roi& region,
                        const FlowConfig& cfg, const Raster<double>& seed_u,
                        const Raster<double>& seed_v) {
    const int W = ref.width();
    const int H = ref.height();
    const int wh = cfg.window_half;
    const double npix = static_cast<double>((2 * wh + 1) * (2 * wh + 1));
    const double bound = cfg.search_bound();

    // Gradient box: region grown by the window, kept 1 px inside the image.
    const int gx0 = std::max(1, region.x0 - wh);
    const int gy0 = std::max(1, region.y0 - wh);
    const int gx1 = std::min(W - 2, region.x1() + wh);
    const int gy1 = std::min(H - 2, region.y1() + wh);

    LevelOutput out{seed_u, seed_v, Raster<std::uint8_t>(region.width, region.height, 0),
                    Raster<std::int32_t>(region.width, region.height, 0)};
    if (gx1 < gx0 || gy1 < gy0) return out;

    const int gw = gx1 - gx0 + 1;
    const int gh = gy1 - gy0 + 1;
    Raster<double> ix(gw, gh), iy(gw, gh);
    for (int y = gy0; y <= gy1; ++y) {
        for (int x = gx0; x <= gx1; ++x) {
            ix(x - gx0, y - gy0) = 0.5 * (ref(x + 1, y) - ref(x - 1, y));
            iy(x - gx0, y - gy0) = 0.5 * (ref(x, y + 1) - ref(x, y - 1));
        }
    }

#if defined(ISOD_HAVE_OPENMP)
#pragma omp parallel for schedule(dynamic, 4)
#endif
    for (int ry = 0; ry < region.height; ++ry) {
        std::vector<double> patch(static_cast<std::size_t>((2 * wh + 1) * (2 * wh + 1)));
        const int py = region.y0 + ry;
        for (int rx = 0; rx < region.width; ++rx) {
            const int px = region.x0 + rx;
            // The window plus the gradient stencil must lie inside the image.
            if (px - wh - 1 < 0 || py - wh - 1 < 0 || px + wh + 1 > W - 1 || py + wh + 1 > H - 1)
                continue;

            Structure s;
            for (int j = -wh; j <= wh; ++j) {
                for (int i = -wh; i <= wh; ++i) {
                    const double gx = ix(px + i - gx0, py + j - gy0);
                    const double gy = iy(px + i - gx0, py + j - gy0);
                    s.a11 += gx * gx;
                    s.a12 += gx * gy;
                    s.a22 += gy * gy;
                }
            }
            const Inverse2 inv = invert(s, npix, cfg.min_eigen_tol);
            if (!inv.ok) continue;

            const double u0 = seed_u(rx, ry);
            const double v0 = seed_v(rx, ry);
            double u = u0;
            double v = v0;
            bool inside = true;
            int used = 0;
            for (int k = 1; k <= cfg.max_iterations; ++k) {
                used = k;
                if (!sample_patch(def, px + u, py + v, wh, cfg.interpolation, patch)) {
                    inside = false;
                    break;
                }
                double b1 = 0.0;
                double b2 = 0.0;
                std::size_t n = 0;
                for (int j = -wh; j <= wh; ++j) {
                    for (int i = -wh; i <= wh; ++i, ++n) {
                        const double it = patch[n] - ref(px + i, py + j);
                        b1 -= ix(px + i - gx0, py + j - gy0) * it;
                        b2 -= iy(px + i - gx0, py + j - gy0) * it;
                    }
                }
                const double du = inv.i11 * b1 + inv.i12 * b2;
                const double dv = inv.i12 * b1 + inv.i22 * b2;
                u += du;
                v += dv;
                if (std::hypot(du, dv) < cfg.convergence_eps) break;
            }
            out.iterations(rx, ry) = used;
            if (!inside || !std::isfinite(u) || !std::isfinite(v) || std::abs(u - u0) > bound ||
                std::abs(v - v0) > bound)
                continue;
            out.u(rx, ry) = u;
            out.v(rx, ry) = v;
            out.valid(rx, ry) = 1;
        }
    }
    return out;
}

// ROI rectangle expressed at pyramid level `level`, grown by one pixel and
// clipped to the level's admissible area.
std::optional<Roi> level_region(const Roi& roi, int level, int W, int H, int margin) {
    const int s = 1 << level;
    int x0 = roi.x0 / s - 1;
    int y0 = roi.y0 / s - 1;
    int x1 = (roi.x1() + s - 1) / s + 1;
    int y1 = (roi.y1() + s - 1) / s + 1;
    x0 = std::max(x0, margin);
    y0 = std::max(y0, margin);
    x1 = std::min(x1, W - 1 - margin);
    y1 = std::min(y1, H - 1 - margin);
    if (x1 - x0 < 2 || y1 - y0 < 2) return std::nullopt;
    return Roi{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

double clamped_bilinear(const Raster<double>& f, double x, double y) noexcept {
    x = std::clamp(x, 0.0, static_cast<double>(f.width() - 1));
    y = std::clamp(y, 0.0, static_cast<double>(f.height() - 1));
    double out = 0.0;
    sample_bilinear(f, x, y, out);
    return out;
}

} // namespace

void Roi::validate(int image_width, int image_height, int margin) const {
    if (area() < 9)
        throw DimensionError("ROI " + rect_text(*this) + " covers fewer than 9 pixels");
    if (!fits(image_width, image_height, margin))
        throw DimensionError("ROI " + rect_text(*this) + " violates the margin rule: it must keep " +
                             std::to_string(margin) + " px from every border of the " +
                             std::to_string(image_width) + "x" + std::to_string(image_height) +
                             " image");
}

bool Roi::fits(int image_width, int image_height, int margin) const noexcept {
    return width > 0 && height > 0 && area() >= 9 && x0 >= margin && y0 >= margin &&
           x1() <= image_width - 1 - margin && y1() <= image_height - 1 - margin;
}

void FlowConfig::validate() const {
    if (window_half < 1) throw std::invalid_argument("window_half must be >= 1");
    if (pyramid_levels < 1) throw std::invalid_argument("pyramid_levels must be >= 1");
    if (max_iterations < 1) throw std::invalid_argument("max_iterations must be >= 1");
    if (!(min_eigen_tol > 0.0) || !(convergence_eps > 0.0))
        throw std::invalid_argument("flow tolerances must be positive");
}

double FlowConfig::search_bound() const noexcept {
    return std::ldexp(1.0, pyramid_levels + 1);
}

DisplacementField::DisplacementField(const Roi& r)
    : roi(r), u(r.width, r.height, 0.0), v(r.width, r.height, 0.0), valid(r.width, r.height, 1),
      iterations_used(r.width, r.height, 0) {}

std::size_t DisplacementField::valid_count() const noexcept {
    return static_cast<std::size_t>(std::count(valid.data().begin(), valid.data().end(), 1));
}

std::pair<Raster<double>, Raster<double>> spatial_gradients(const GrayImage& img, const Roi& region) {
    if (region.width <= 0 || region.height <= 0 || region.x0 < 1 || region.y0 < 1 ||
        region.x1() > img.width() - 2 || region.y1() > img.height() - 2)
        throw DimensionError("gradient region " + rect_text(region) +
                             " must stay 1 px inside the image");
    Raster<double> ix(region.width, region.height), iy(region.width, region.height);
    for (int y = 0; y < region.height; ++y) {
        for (int x = 0; x < region.width; ++x) {
            const int px = region.x0 + x;
            const int py = region.y0 + y;
            ix(x, y) = 0.5 * (img(px + 1, py) - img(px - 1, py));
            iy(x, y) = 0.5 * (img(px, py + 1) - img(px, py - 1));
        }
    }
    return {std::move(ix), std::move(iy)};
}

Raster<double> temporal_gradient(const GrayImage& ref, const GrayImage& def, const Roi& region) {
    if (ref.width() != def.width() || ref.height() != def.height())
        throw DimensionError("reference and deformed images differ in size");
    if (region.width <= 0 || region.height <= 0 || region.x0 < 0 || region.y0 < 0 ||
        region.x1() >= ref.width() || region.y1() >= ref.height())
        throw DimensionError("temporal gradient region " + rect_text(region) +
                             " exceeds the image");
    Raster<double> it(region.width, region.height);
    for (int y = 0; y < region.height; ++y)
        for (int x = 0; x < region.width; ++x)
            it(x, y) = def(region.x0 + x, region.y0 + y) - ref(region.x0 + x, region.y0 + y);
    return it;
}

WindowSolution solve_lk_window(const GradientField& grad, int cx, int cy, int window_half,
                               double min_eigen_tol) {
    const int w = grad.ix.width();
    const int h = grad.ix.height();
    if (grad.iy.width() != w || grad.iy.height() != h || grad.it.width() != w ||
        grad.it.height() != h)
        throw DimensionError("gradient rasters differ in size");
    if (cx - window_half < 0 || cy - window_half < 0 || cx + window_half >= w ||
        cy + window_half >= h)
        throw DimensionError("LK window leaves the gradient rasters");

    Structure s;
    double b1 = 0.0;
    double b2 = 0.0;
    for (int j = -window_half; j <= window_half; ++j) {
        for (int i = -window_half; i <= window_half; ++i) {
            const double gx = grad.ix(cx + i, cy + j);
            const double gy = grad.iy(cx + i, cy + j);
            const double gt = grad.it(cx + i, cy + j);
            s.a11 += gx * gx;
            s.a12 += gx * gy;
            s.a22 += gy * gy;
            b1 -= gx * gt;
            b2 -= gy * gt;
        }
    }
    const double npix = static_cast<double>((2 * window_half + 1) * (2 * window_half + 1));
    const Inverse2 inv = invert(s, npix, min_eigen_tol);
    WindowSolution sol;
    sol.min_eigenvalue = inv.min_eig_norm;
    if (!inv.ok) {
        sol.degenerate = true;
        return sol;
    }
    sol.u = inv.i11 * b1 + inv.i12 * b2;
    sol.v = inv.i12 * b1 + inv.i22 * b2;
    return sol;
}

Raster<double> downsample2(const Raster<double>& src) {
    const int w = src.width() / 2;
    const int h = src.height() / 2;
    Raster<double> out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            out(x, y) = 0.25 * (src(2 * x, 2 * y) + src(2 * x + 1, 2 * y) + src(2 * x, 2 * y + 1) +
                                src(2 * x + 1, 2 * y + 1));
    return out;
}

DisplacementField solve_dense(const GrayImage& ref, const GrayImage& def, const Roi& roi,
                              const FlowConfig& cfg, const DisplacementField* init) {
    cfg.validate();
    if (ref.width() != def.width() || ref.height() != def.height())
        throw DimensionError("reference and deformed images differ in size");
    roi.validate(ref.width(), ref.height(), cfg.margin());
    if (init && !(init->roi == roi))
        throw DimensionError("initial displacement field ROI does not match the solve ROI");

    DisplacementField result(roi);
    Raster<double> seed_u(roi.width, roi.height, 0.0);
    Raster<double> seed_v(roi.width, roi.height, 0.0);

    if (init) {
        for (int y = 0; y < roi.height; ++y) {
            for (int x = 0; x < roi.width; ++x) {
                if (!init->valid(x, y)) continue;
                seed_u(x, y) = init->u(x, y);
                seed_v(x, y) = init->v(x, y);
            }
        }
    } else if (cfg.pyramid_levels > 1) {
        std::vector<Raster<double>> ref_pyr{ref.pixels};
        std::vector<Raster<double>> def_pyr{def.pixels};
        std::vector<Roi> regions;
        for (int level = 1; level < cfg.pyramid_levels; ++level) {
            Raster<double> r = downsample2(ref_pyr.back());
            Raster<double> d = downsample2(def_pyr.back());
            auto region = level_region(roi, level, r.width(), r.height(), cfg.margin());
            if (!region) break;
            ref_pyr.push_back(std::move(r));
            def_pyr.push_back(std::move(d));
            regions.push_back(*region);
        }

        // regions[k] belongs to pyramid level k + 1.
        Raster<double> cu, cv;
        for (int k = static_cast<int>(regions.size()) - 1; k >= 0; --k) {
            const Roi& region = regions[static_cast<std::size_t>(k)];
            Raster<double> su(region.width, region.height, 0.0);
            Raster<double> sv(region.width, region.height, 0.0);
            if (k + 1 < static_cast<int>(regions.size())) {
                const Roi& coarse = regions[static_cast<std::size_t>(k + 1)];
                for (int y = 0; y < region.height; ++y) {
                    for (int x = 0; x < region.width; ++x) {
                        const double cx = (region.x0 + x - 0.5) / 2.0 - coarse.x0;
                        const double cy = (region.y0 + y - 0.5) / 2.0 - coarse.y0;
                        su(x, y) = 2.0 * clamped_bilinear(cu, cx, cy);
                        sv(x, y) = 2.0 * clamped_bilinear(cv, cx, cy);
                    }
                }
            }
            LevelOutput lvl = solve_level(ref_pyr[static_cast<std::size_t>(k + 1)],
                                          def_pyr[static_cast<std::size_t>(k + 1)], region, cfg, su, sv);
            cu = std::move(lvl.u);
            cv = std::move(lvl.v);
        }
        if (!regions.empty()) {
            const Roi& coarse = regions.front();
            for (int y = 0; y < roi.height; ++y) {
                for (int x = 0; x < roi.width; ++x) {
                    const double cx = (roi.x0 + x - 0.5) / 2.0 - coarse.x0;
                    const double cy = (roi.y0 + y - 0.5) / 2.0 - coarse.y0;
                    seed_u(x, y) = 2.0 * clamped_bilinear(cu, cx, cy);
                    seed_v(x, y) = 2.0 * clamped_bilinear(cv, cx, cy);
                }
            }
        }
    }

    LevelOutput fine = solve_level(ref.pixels, def.pixels, roi, cfg, seed_u, seed_v);
    for (int y = 0; y < roi.height; ++y) {
        for (int x = 0; x < roi.width; ++x) {
            const bool ok = fine.valid(x, y) != 0;
            result.valid(x, y) = ok ? 1 : 0;
            result.u(x, y) = ok ? fine.u(x, y) : 0.0;
            result.v(x, y) = ok ? fine.v(x, y) : 0.0;
            result.iterations_used(x, y) = fine.iterations(x, y);
        }
    }
    return result;
}

bool sample_patch(const Raster<double>& img, double cx, double cy, int half, Interpolation interp,
                  std::span<double> out) noexcept {
    const int W = img.width();
    const int H = img.height();
    if (!(cx - half >= 0.0 && cy - half >= 0.0 && cx + half <= W - 1 && cy + half <= H - 1))
        return false;
    const double fx = std::floor(cx);
    const double fy = std::floor(cy);
    const int xi = static_cast<int>(fx);
    const int yi = static_cast<int>(fy);
    const double tx = cx - fx;
    const double ty = cy - fy;
    std::size_t n = 0;

    if (interp == Interpolation::Bilinear) {
        for (int j = -half; j <= half; ++j) {
            const int y0 = yi + j;
            const int y1 = std::min(y0 + 1, H - 1);
            for (int i = -half; i <= half; ++i) {
                const int x0 = xi + i;
                const int x1 = std::min(x0 + 1, W - 1);
                const double top = img(x0, y0) + tx * (img(x1, y0) - img(x0, y0));
                const double bot = img(x0, y1) + tx * (img(x1, y1) - img(x0, y1));
                out[n++] = top + ty * (bot - top);
            }
        }
        return true;
    }

    const auto wx = cubic_weights(tx);
    const auto wy = cubic_weights(ty);
    const bool interior = xi - half - 1 >= 0 && yi - half - 1 >= 0 && xi + half + 2 <= W - 1 &&
                          yi + half + 2 <= H - 1;
    for (int j = -half; j <= half; ++j) {
        for (int i = -half; i <= half; ++i) {
            double acc = 0.0;
            for (int b = 0; b < 4; ++b) {
                const int yy = interior ? yi + j - 1 + b : std::clamp(yi + j - 1 + b, 0, H - 1);
                const double* row = img.row(yy).data();
                const int xb = xi + i - 1;
                double racc;
                if (interior) {
                    racc = wx[0] * row[xb] + wx[1] * row[xb + 1] + wx[2] * row[xb + 2] +
                           wx[3] * row[xb + 3];
                } else {
                    racc = 0.0;
                    for (int a = 0; a < 4; ++a) racc += wx[a] * row[std::clamp(xb + a, 0, W - 1)];
                }
                acc += wy[b] * racc;
            }
            out[n++] = acc;
        }
    }
    return true;
}

bool sample_masked(const Raster<double>& field, const Raster<std::uint8_t>& valid, double x,
                   double y, double& out) noexcept {
    const int w = field.width();
    const int h = field.height();
    if (!(x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1)) return false;
    int x0 = static_cast<int>(x);
    int y0 = static_cast<int>(y);
    double fx = x - x0;
    double fy = y - y0;
    if (x0 == w - 1 && w > 1) {
        --x0;
        fx = 1.0;
    }
    if (y0 == h - 1 && h > 1) {
        --y0;
        fy = 1.0;
    }
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    const int xs[4] = {x0, x1, x0, x1};
    const int ys[4] = {y0, y0, y1, y1};
    for (int k = 0; k < 4; ++k)
        if (wts[k] > 0.0 && !valid(xs[k], ys[k])) return false;
    const double top = field(x0, y0) + fx * (field(x1, y0) - field(x0, y0));
    const double bot = field(x0, y1) + fx * (field(x1, y1) - field(x0, y1));
    out = top + fy * (bot - top);
    return true;
}

DisplacementField accumulate(const DisplacementField& total, const DisplacementField& increment) {
    if (!(total.roi == increment.roi))
        throw DimensionError("cannot accumulate displacement fields over different ROIs");
    const Roi& roi = total.roi;
    DisplacementField out(roi);
    for (int y = 0; y < roi.height; ++y) {
        for (int x = 0; x < roi.width; ++x) {
            double du = 0.0;
            double dv = 0.0;
            bool ok = total.valid(x, y) != 0;
            if (ok) {
                const double sx = x + total.u(x, y);
                const double sy = y + total.v(x, y);
                ok = sample_masked(increment.u, increment.valid, sx, sy, du) &&
                     sample_masked(increment.v, increment.valid, sx, sy, dv);
            }
            out.valid(x, y) = ok ? 1 : 0;
            out.u(x, y) = ok ? total.u(x, y) + du : 0.0;
            out.v(x, y) = ok ? total.v(x, y) + dv : 0.0;
            out.iterations_used(x, y) = increment.iterations_used(x, y);
        }
    }
    return out;
}

} // namespace isod
