#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>

#include "isod/deformation.hpp"
#include "isod/flow.hpp"
#include "isod/speckle.hpp"

namespace isod::test {

inline SpeckleSpec dense_speckle(int width, int height, std::uint64_t seed = 3) {
    SpeckleSpec s;
    s.width = width;
    s.height = height;
    s.dot_density = 50.0;
    s.radius_min = 1.0;
    s.radius_max = 3.0;
    s.blur_sigma = 1.0;
    s.rng_seed = seed;
    return s;
}

inline GrayImage warped(const GrayImage& ref, const DisplacementMap& map, double fill = 0.85) {
    return warp_image(ref, map, fill);
}

inline Roi inner_roi(int width, int height, int margin) {
    return Roi{margin, margin, width - 2 * margin, height - 2 * margin};
}

struct FlowError {
    double rms = 0.0;
    double validity = 0.0;
    double mean_u = 0.0;
    double mean_v = 0.0;
};

inline FlowError flow_error(const DisplacementField& d, double u, double v) {
    FlowError e;
    std::size_t n = 0;
    double sq = 0.0;
    for (std::size_t i = 0; i < d.valid.size(); ++i) {
        if (!d.valid.data()[i]) continue;
        const double du = d.u.data()[i] - u;
        const double dv = d.v.data()[i] - v;
        sq += du * du + dv * dv;
        e.mean_u += d.u.data()[i];
        e.mean_v += d.v.data()[i];
        ++n;
    }
    if (n > 0) {
        e.rms = std::sqrt(sq / static_cast<double>(n));
        e.mean_u /= static_cast<double>(n);
        e.mean_v /= static_cast<double>(n);
    }
    e.validity = d.valid.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(d.valid.size());
    return e;
}

// Exhaustive integer search: the shift d minimizing
// sum (def(p + d) - ref(p))^2 over the (2 half + 1)^2 block centred at (x, y).
// Blocks that would leave `def` are skipped.
inline std::pair<int, int> ssd_match(const GrayImage& ref, const GrayImage& def, int x, int y, int half = 4,
                                     int search = 16) {
    double best = std::numeric_limits<double>::infinity();
    std::pair<int, int> arg{0, 0};
    for (int dy = -search; dy <= search; ++dy) {
        for (int dx = -search; dx <= search; ++dx) {
            if (x + dx - half < 0 || y + dy - half < 0 || x + dx + half >= def.width() ||
                y + dy + half >= def.height())
                continue;
            double ssd = 0.0;
            for (int j = -half; j <= half && ssd < best; ++j)
                for (int i = -half; i <= half; ++i) {
                    const double r = ref.pixels.contains(x + i, y + j) ? ref(x + i, y + j) : 0.0;
                    const double d = def(x + dx + i, y + dy + j) - r;
                    ssd += d * d;
                }
            if (ssd < best) {
                best = ssd;
                arg = {dx, dy};
            }
        }
    }
    return arg;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag = "isod") {
        static std::atomic<int> counter{0};
        const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

} // namespace isod::test
