#include "isod/strain.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace isod {

namespace {

// Validity-weighted Gaussian smoothing of a masked raster.
Raster<double> smooth_masked(const Raster<double>& f, const Raster<std::uint8_t>& valid, double sigma) {
    const int w = f.width();
    const int h = f.height();
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));

    Raster<double> num(w, h, 0.0), den(w, h, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double a = 0.0, b = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int xx = x + i;
                if (xx < 0 || xx >= w || !valid(xx, y)) continue;
                a += k[i + radius] * f(xx, y);
                b += k[i + radius];
            }
            num(x, y) = a;
            den(x, y) = b;
        }
    }
    Raster<double> out(w, h, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!valid(x, y)) continue;
            double a = 0.0, b = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int yy = y + i;
                if (yy < 0 || yy >= h) continue;
                a += k[i + radius] * num(x, yy);
                b += k[i + radius] * den(x, yy);
            }
            out(x, y) = b > 0.0 ? a / b : f(x, y);
        }
    }
    return out;
}

// Derivative of `f` at (x, y) along (sx, sy); false when no valid neighbour.
bool axis_derivative(const Raster<double>& f, const Raster<std::uint8_t>& valid, int x, int y, int sx,
                     int sy, double& out) noexcept {
    const bool fwd = valid.contains(x + sx, y + sy) && valid(x + sx, y + sy);
    const bool bwd = valid.contains(x - sx, y - sy) && valid(x - sx, y - sy);
    if (fwd && bwd) {
        out = 0.5 * (f(x + sx, y + sy) - f(x - sx, y - sy));
    } else if (fwd) {
        out = f(x + sx, y + sy) - f(x, y);
    } else if (bwd) {
        out = f(x, y) - f(x - sx, y - sy);
    } else {
        return false;
    }
    return true;
}

} // namespace

std::size_t StrainField::valid_count() const noexcept {
    return static_cast<std::size_t>(std::count(valid.data().begin(), valid.data().end(), 1));
}

std::string_view to_string(StrainComponent c) noexcept {
    switch (c) {
    case StrainComponent::Exx: return "exx";
    case StrainComponent::Eyy: return "eyy";
    case StrainComponent::Exy: return "exy";
    }
    return "eyy";
}

StrainComponent strain_component_from_string(std::string_view name) {
    if (name == "exx") return StrainComponent::Exx;
    if (name == "eyy") return StrainComponent::Eyy;
    if (name == "exy") return StrainComponent::Exy;
    throw std::invalid_argument("unknown strain component '" + std::string(name) + "'");
}

DisplacementGradients displacement_gradients(const DisplacementField& d, double smoothing_sigma) {
    const Roi& roi = d.roi;
    const int w = roi.width;
    const int h = roi.height;
    const Raster<double> u = smoothing_sigma > 0.0 ? smooth_masked(d.u, d.valid, smoothing_sigma) : d.u;
    const Raster<double> v = smoothing_sigma > 0.0 ? smooth_masked(d.v, d.valid, smoothing_sigma) : d.v;

    DisplacementGradients g{roi, Raster<double>(w, h, 0.0), Raster<double>(w, h, 0.0),
                            Raster<double>(w, h, 0.0), Raster<double>(w, h, 0.0),
                            Raster<std::uint8_t>(w, h, 0)};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!d.valid(x, y)) continue;
            double ux, uy, vx, vy;
            if (!axis_derivative(u, d.valid, x, y, 1, 0, ux) || !axis_derivative(u, d.valid, x, y, 0, 1, uy))
                continue;
            axis_derivative(v, d.valid, x, y, 1, 0, vx);
            axis_derivative(v, d.valid, x, y, 0, 1, vy);
            g.du_dx(x, y) = ux;
            g.du_dy(x, y) = uy;
            g.dv_dx(x, y) = vx;
            g.dv_dy(x, y) = vy;
            g.valid(x, y) = 1;
        }
    }
    return g;
}

StrainField green_strain(const DisplacementGradients& g) {
    const int w = g.du_dx.width();
    const int h = g.du_dx.height();
    for (const auto* r : {&g.du_dy, &g.dv_dx, &g.dv_dy})
        if (r->width() != w || r->height() != h)
            throw DimensionError("displacement gradient rasters differ in size");
    if (g.valid.width() != w || g.valid.height() != h)
        throw DimensionError("gradient validity mask differs in size");

    StrainField s{g.roi, Raster<double>(w, h, 0.0), Raster<double>(w, h, 0.0),
                  Raster<double>(w, h, 0.0), g.valid, 0, 0.0};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!g.valid(x, y)) continue;
            const double ux = g.du_dx(x, y);
            const double uy = g.du_dy(x, y);
            const double vx = g.dv_dx(x, y);
            const double vy = g.dv_dy(x, y);
            s.exx(x, y) = ux + 0.5 * (ux * ux + vx * vx);
            s.eyy(x, y) = vy + 0.5 * (uy * uy + vy * vy);
            s.exy(x, y) = 0.5 * (uy + vx + ux * uy + vx * vy);
        }
    }
    return s;
}

std::string fraction_label(double k) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, k);
    return std::string(buf, res.ptr);
}

double top_fraction_mean(std::vector<double> values, double k) {
    if (values.empty()) throw InsufficientDataError("no values to average");
    if (!(k > 0.0 && k <= 1.0)) throw std::invalid_argument("top fraction must lie in (0, 1]");
    const auto n = values.size();
    // Guard against k * n landing a hair above an integer.
    auto count = static_cast<std::size_t>(std::ceil(k * static_cast<double>(n) - 1e-9));
    count = std::clamp<std::size_t>(count, 1, n);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(count - 1),
                     values.end(), std::greater<>());
    const double sum = std::accumulate(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(count), 0.0);
    return sum / static_cast<double>(count);
}

StrainStats strain_stats(const StrainField& s, const StrainStats* previous,
                         std::span<const double> k_fractions, StrainComponent component) {
    const Raster<double>& field = component == StrainComponent::Exx   ? s.exx
                                  : component == StrainComponent::Exy ? s.exy
                                                                      : s.eyy;
    std::vector<double> values;
    values.reserve(field.size());
    const auto vals = field.values();
    const auto mask = s.valid.values();
    for (std::size_t i = 0; i < vals.size(); ++i)
        if (mask[i]) values.push_back(vals[i]);
    if (values.size() < kMinValidPixels)
        throw InsufficientDataError("strain field has " + std::to_string(values.size()) +
                                    " valid pixels; at least " + std::to_string(kMinValidPixels) +
                                    " are required");

    StrainStats st;
    st.valid_pixel_count = values.size();
    st.max_eyy = *std::max_element(values.begin(), values.end());
    st.mean_eyy = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    for (double k : k_fractions) st.topk_mean_eyy[k] = top_fraction_mean(values, k);

    // Mean and top-k means are computed in different summation orders; keep
    // the nesting mean <= top-k <= max exact.
    double ceiling = st.max_eyy;
    for (auto& [k, m] : st.topk_mean_eyy) {
        m = std::clamp(m, st.mean_eyy, ceiling);
        ceiling = m;
    }

    if (previous) {
        st.del_max_eyy = st.max_eyy - previous->max_eyy;
        for (const auto& [k, m] : st.topk_mean_eyy) {
            auto it = previous->topk_mean_eyy.find(k);
            st.del_topk_mean_eyy[k] = it == previous->topk_mean_eyy.end() ? 0.0 : m - it->second;
        }
    } else {
        for (const auto& [k, m] : st.topk_mean_eyy) st.del_topk_mean_eyy[k] = 0.0;
    }
    return st;
}

} // namespace isod
