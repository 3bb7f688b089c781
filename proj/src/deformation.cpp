#include "isod/deformation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "isod/interpolate.hpp"

namespace isod {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

double lerp1(double a, double b, double t) { return a + (b - a) * t; }

MapTerm zero_of(const MapTerm& t) {
    if (const auto* b = std::get_if<Band>(&t)) return Band{0.0, b->center_y, b->width};
    if (std::holds_alternative<Translation>(t)) return Translation{};
    if (std::holds_alternative<Affine>(t)) return Affine{};
    return Rotation{};
}

} // namespace

bool operator==(const Translation& a, const Translation& b) { return a.u == b.u && a.v == b.v; }
bool operator==(const Affine& a, const Affine& b) {
    return a.du_dx == b.du_dx && a.du_dy == b.du_dy && a.dv_dx == b.dv_dx && a.dv_dy == b.dv_dy;
}
bool operator==(const Rotation& a, const Rotation& b) { return a.theta_rad == b.theta_rad; }
bool operator==(const Band& a, const Band& b) {
    return a.amplitude == b.amplitude && a.center_y == b.center_y && a.width == b.width;
}
bool operator==(const DisplacementMap& a, const DisplacementMap& b) { return a.terms_ == b.terms_; }

Vec2 image_center(int width, int height) noexcept {
    return {0.5 * (width - 1), 0.5 * (height - 1)};
}

Vec2 DisplacementMap::displacement(Vec2 X, Vec2 c) const noexcept {
    Vec2 d;
    for (const MapTerm& term : terms_) {
        std::visit(Overloaded{
                       [&](const Translation& t) {
                           d.x += t.u;
                           d.y += t.v;
                       },
                       [&](const Affine& a) {
                           const double rx = X.x - c.x;
                           const double ry = X.y - c.y;
                           d.x += a.du_dx * rx + a.du_dy * ry;
                           d.y += a.dv_dx * rx + a.dv_dy * ry;
                       },
                       [&](const Rotation& r) {
                           const double rx = X.x - c.x;
                           const double ry = X.y - c.y;
                           const double cs = std::cos(r.theta_rad);
                           const double sn = std::sin(r.theta_rad);
                           d.x += (cs - 1.0) * rx - sn * ry;
                           d.y += sn * rx + (cs - 1.0) * ry;
                       },
                       [&](const Band& b) {
                           if (b.amplitude == 0.0) return;
                           d.y += 0.5 * b.amplitude *
                                  std::erf((X.y - b.center_y) / (std::sqrt(2.0) * b.width));
                       },
                   },
                   term);
    }
    return d;
}

bool DisplacementMap::is_identity() const noexcept {
    return std::all_of(terms_.begin(), terms_.end(), [](const MapTerm& term) {
        return std::visit(Overloaded{
                              [](const Translation& t) { return t.u == 0.0 && t.v == 0.0; },
                              [](const Affine& a) {
                                  return a.du_dx == 0.0 && a.du_dy == 0.0 && a.dv_dx == 0.0 &&
                                         a.dv_dy == 0.0;
                              },
                              [](const Rotation& r) { return r.theta_rad == 0.0; },
                              [](const Band& b) { return b.amplitude == 0.0; },
                          },
                          term);
    });
}

DisplacementMap DisplacementMap::lerp(const DisplacementMap& a, const DisplacementMap& b,
                                      double alpha) {
    // A missing trailing term interpolates from (or to) its zero-displacement form.
    const std::size_t n = std::max(a.terms_.size(), b.terms_.size());
    std::vector<MapTerm> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const MapTerm& ta = i < a.terms_.size() ? a.terms_[i] : zero_of(b.terms_[i]);
        const MapTerm& tb = i < b.terms_.size() ? b.terms_[i] : zero_of(a.terms_[i]);
        if (ta.index() != tb.index())
            throw std::invalid_argument("cannot interpolate maps with different term kinds at term " +
                                        std::to_string(i));
        if (auto* p = std::get_if<Translation>(&ta)) {
            const auto& q = std::get<Translation>(tb);
            out.emplace_back(Translation{lerp1(p->u, q.u, alpha), lerp1(p->v, q.v, alpha)});
        } else if (auto* p = std::get_if<Affine>(&ta)) {
            const auto& q = std::get<Affine>(tb);
            out.emplace_back(Affine{lerp1(p->du_dx, q.du_dx, alpha), lerp1(p->du_dy, q.du_dy, alpha),
                                    lerp1(p->dv_dx, q.dv_dx, alpha), lerp1(p->dv_dy, q.dv_dy, alpha)});
        } else if (auto* p = std::get_if<Rotation>(&ta)) {
            const auto& q = std::get<Rotation>(tb);
            out.emplace_back(Rotation{lerp1(p->theta_rad, q.theta_rad, alpha)});
        } else {
            const auto& p2 = std::get<Band>(ta);
            const auto& q = std::get<Band>(tb);
            out.emplace_back(Band{lerp1(p2.amplitude, q.amplitude, alpha),
                                  lerp1(p2.center_y, q.center_y, alpha),
                                  lerp1(p2.width, q.width, alpha)});
        }
    }
    return DisplacementMap(std::move(out));
}

DeformationSchedule::DeformationSchedule(std::vector<ScheduleKey> keys) : keys_(std::move(keys)) {
    if (keys_.empty()) throw std::invalid_argument("deformation schedule is empty");
    if (keys_.front().time != 0.0)
        throw std::invalid_argument("deformation schedule must start at t = 0");
    if (!keys_.front().map.is_identity())
        throw std::invalid_argument("deformation schedule must start with the identity map");
    for (std::size_t i = 1; i < keys_.size(); ++i) {
        if (!(keys_[i].time > keys_[i - 1].time))
            throw std::invalid_argument("deformation schedule times must be strictly increasing (entry " +
                                        std::to_string(i) + ")");
        for (const MapTerm& t : keys_[i].map.terms())
            if (const auto* b = std::get_if<Band>(&t); b && !(b->width > 0.0))
                throw std::invalid_argument("band width must be positive (entry " + std::to_string(i) + ")");
        // Validates that consecutive keys are interpolable.
        (void)DisplacementMap::lerp(keys_[i - 1].map, keys_[i].map, 0.0);
    }
}

DisplacementMap DeformationSchedule::at(double t) const {
    if (t <= keys_.front().time) return keys_.front().map;
    if (t >= keys_.back().time) return keys_.back().map;
    auto it = std::upper_bound(keys_.begin(), keys_.end(), t,
                               [](double tt, const ScheduleKey& k) { return tt < k.time; });
    const ScheduleKey& hi = *it;
    const ScheduleKey& lo = *(it - 1);
    const double alpha = (t - lo.time) / (hi.time - lo.time);
    return DisplacementMap::lerp(lo.map, hi.map, alpha);
}

GrayImage warp_image(const GrayImage& reference, const DisplacementMap& map, double fill) {
    const int w = reference.width();
    const int h = reference.height();
    if (map.is_identity()) return reference;

    const Vec2 c = image_center(w, h);
    const double limit = std::min(w, h) / 4.0;
    Raster<double> out(w, h);
    for (int y = 0; y < h; ++y) {
        auto dst = out.row(y);
        for (int x = 0; x < w; ++x) {
            const Vec2 target{static_cast<double>(x), static_cast<double>(y)};
            // Solve X + d(X) = target; contraction holds while |grad d| < 1.
            Vec2 X = target;
            for (int it = 0; it < 100; ++it) {
                const Vec2 d = map.displacement(X, c);
                const Vec2 next{target.x - d.x, target.y - d.y};
                const double change = std::abs(next.x - X.x) + std::abs(next.y - X.y);
                X = next;
                if (change < 1e-12) break;
            }
            if (std::abs(target.x - X.x) >= limit || std::abs(target.y - X.y) >= limit)
                throw std::invalid_argument("warp displacement exceeds min(width, height)/4 at (" +
                                            std::to_string(x) + ", " + std::to_string(y) + ")");
            dst[x] = sample_bicubic(reference.pixels, X.x, X.y, fill);
        }
    }
    return GrayImage(std::move(out), reference.timestamp, reference.frame_index);
}

} // namespace isod
