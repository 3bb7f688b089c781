#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "isod/flow.hpp"

namespace isod {

struct DisplacementGradients {
    Roi roi;
    Raster<double> du_dx, du_dy, dv_dx, dv_dy;
    Raster<std::uint8_t> valid;
};

// Green-Lagrange strain field over a ROI at one batch boundary.
struct StrainField {
    Roi roi;
    Raster<double> exx, eyy, exy;
    Raster<std::uint8_t> valid;
    std::int64_t batch_index = 0;
    double timestamp = 0.0;

    std::size_t valid_count() const noexcept;
    friend bool operator==(const StrainField&, const StrainField&) = default;
};

enum class StrainComponent { Exx, Eyy, Exy };

std::string_view to_string(StrainComponent c) noexcept;
StrainComponent strain_component_from_string(std::string_view name);

// Scalar summaries of one strain component (eyy unless configured otherwise).
struct StrainStats {
    double max_eyy = 0.0;
    double mean_eyy = 0.0;
    double del_max_eyy = 0.0;  // max_eyy minus the previous batch's max_eyy
    std::map<double, double> topk_mean_eyy;      // fraction -> mean of the top fraction
    std::map<double, double> del_topk_mean_eyy;  // fraction -> change since previous batch
    std::size_t valid_pixel_count = 0;

    friend bool operator==(const StrainStats&, const StrainStats&) = default;
};

inline constexpr std::size_t kMinValidPixels = 20;
inline const std::vector<double> kDefaultTopFractions{0.05, 0.10};

// Central differences on u and v; one-sided where only one neighbour along
// an axis is valid. A pixel is valid only when it is valid itself and each
// axis has at least one valid neighbour. `smoothing_sigma` > 0 applies a
// validity-weighted Gaussian to u and v first.
DisplacementGradients displacement_gradients(const DisplacementField& d, double smoothing_sigma = 0.0);

StrainField green_strain(const DisplacementGradients& g);

// Throws InsufficientDataError below kMinValidPixels valid pixels.
StrainStats strain_stats(const StrainField& s, const StrainStats* previous,
                         std::span<const double> k_fractions = kDefaultTopFractions,
                         StrainComponent component = StrainComponent::Eyy);

// Shortest decimal text that parses back to exactly `k` ("0.05").
std::string fraction_label(double k);

// Mean of the ceil(k * n) largest values (n = values.size()).
double top_fraction_mean(std::vector<double> values, double k);

} // namespace isod
