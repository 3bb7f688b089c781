#pragma once

#include <variant>
#include <vector>

#include "isod/image.hpp"

namespace isod {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

// Analytic displacement components. Each maps a reference (material)
// point X to its displacement d(X); the deformed position is X + d(X).

struct Translation {
    double u = 0.0;
    double v = 0.0;
};

// Homogeneous displacement gradient about the image center.
struct Affine {
    double du_dx = 0.0;
    double du_dy = 0.0;
    double dv_dx = 0.0;
    double dv_dy = 0.0;
};

// Rigid rotation about the image center, counter-clockwise in (x, y).
struct Rotation {
    double theta_rad = 0.0;
};

// Horizontal opening band: v(X) = (a/2) erf((Y - center_y) / (sqrt(2) width)),
// so dv/dy has a Gaussian profile of standard deviation `width` peaking at
// a / (width sqrt(2 pi)).
struct Band {
    double amplitude = 0.0;  // total opening across the band, px
    double center_y = 0.0;
    double width = 4.0;
};

using MapTerm = std::variant<Translation, Affine, Rotation, Band>;

// Superposition of analytic terms.
class DisplacementMap {
public:
    DisplacementMap() = default;
    explicit DisplacementMap(std::vector<MapTerm> terms) : terms_(std::move(terms)) {}

    static DisplacementMap identity() { return {}; }
    static DisplacementMap translation(double u, double v) { return DisplacementMap({Translation{u, v}}); }

    const std::vector<MapTerm>& terms() const noexcept { return terms_; }

    // `center` is the pivot for affine and rotation terms.
    Vec2 displacement(Vec2 X, Vec2 center) const noexcept;

    // True when every term has parameters that produce zero displacement.
    bool is_identity() const noexcept;

    // Parameter-wise linear interpolation; both maps must have the same
    // term kinds at each position; a map with fewer terms is padded with
    // the zero-displacement form of the other map's extra terms.
    static DisplacementMap lerp(const DisplacementMap& a, const DisplacementMap& b, double alpha);

    friend bool operator==(const DisplacementMap&, const DisplacementMap&);

private:
    std::vector<MapTerm> terms_;
};

bool operator==(const Translation&, const Translation&);
bool operator==(const Affine&, const Affine&);
bool operator==(const Rotation&, const Rotation&);
bool operator==(const Band&, const Band&);

struct ScheduleKey {
    double time = 0.0;
    DisplacementMap map;
};

// Piecewise-linear (in parameters) deformation history.
class DeformationSchedule {
public:
    DeformationSchedule() : keys_{ScheduleKey{0.0, DisplacementMap::identity()}} {}
    explicit DeformationSchedule(std::vector<ScheduleKey> keys);

    // Map at time t; clamps to the last key beyond the end.
    DisplacementMap at(double t) const;
    double end_time() const noexcept { return keys_.back().time; }
    const std::vector<ScheduleKey>& keys() const noexcept { return keys_; }

private:
    std::vector<ScheduleKey> keys_;
};

Vec2 image_center(int width, int height) noexcept;

// Deformed image I_def(x) = I_ref(X) where X + d(X) = x, found by fixed-point
// inversion of the map and sampled bicubically. Samples falling outside the
// reference take `fill`. Displacements must stay below min(w, h) / 4.
GrayImage warp_image(const GrayImage& reference, const DisplacementMap& map, double fill);

} // namespace isod
