#include "isod/frame_source.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "isod/png_io.hpp"

namespace isod {

namespace {
constexpr double kTimeSlack = 1e-9;
}

FrameSource::FrameSource(double activation_delay) : activation_delay_(activation_delay) {
    if (!(activation_delay >= 0.0) || !std::isfinite(activation_delay))
        throw std::invalid_argument("activation_delay must be a non-negative finite number");
}

void FrameSource::set_rate(double fps) {
    if (!(fps > 0.0) || !std::isfinite(fps)) throw std::invalid_argument("frame rate must be positive");
    if (served_in_batch_ > 0) {
        const double last = batch_start_ + static_cast<double>(served_in_batch_ - 1) / fps_;
        batch_start_ = last + 1.0 / fps_ + activation_delay_;
        served_in_batch_ = 0;
    }
    fps_ = fps;
}

SimulatedSource::SimulatedSource(SpeckleSpec spec, DeformationSchedule schedule, double noise_sigma,
                                 double activation_delay, std::uint64_t noise_seed)
    : FrameSource(activation_delay), spec_(spec), schedule_(std::move(schedule)),
      noise_sigma_(noise_sigma), noise_seed_(noise_seed) {
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be non-negative");
    pristine_ = generate_speckle(spec_);
}

std::optional<GrayImage> SimulatedSource::next_frame() {
    const double t = target_time();
    if (t > schedule_.end_time() + kTimeSlack) return std::nullopt;

    GrayImage img = warp_image(pristine_, schedule_.at(t), spec_.background_level);
    if (noise_sigma_ > 0.0) {
        std::seed_seq seq{static_cast<std::uint32_t>(noise_seed_), static_cast<std::uint32_t>(noise_seed_ >> 32),
                          static_cast<std::uint32_t>(next_index_), static_cast<std::uint32_t>(next_index_ >> 32)};
        std::mt19937_64 rng(seq);
        std::normal_distribution<double> noise(0.0, noise_sigma_);
        for (double& p : img.pixels.values()) p += noise(rng);
    }
    GrayImage frame(dequantize_u8(quantize_u8(img.pixels)), t, next_index_++);
    mark_served();
    return frame;
}

std::vector<ReplayEntry> load_replay_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw LoadError("cannot open replay manifest " + manifest_path.string());
    nlohmann::json doc;
    try {
        f >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(manifest_path.string() + ": invalid JSON: " + e.what());
    }
    if (!doc.is_object() || !doc.contains("frames") || !doc["frames"].is_array())
        throw LoadError(manifest_path.string() + ": expected an object with a \"frames\" array");

    const auto base = manifest_path.parent_path();
    std::vector<ReplayEntry> entries;
    for (std::size_t i = 0; i < doc["frames"].size(); ++i) {
        const auto& item = doc["frames"][i];
        const std::string where = manifest_path.string() + ": frames[" + std::to_string(i) + "]";
        if (!item.is_object() || !item.contains("path") || !item["path"].is_string() ||
            !item.contains("timestamp") || !item["timestamp"].is_number())
            throw LoadError(where + ": needs string \"path\" and numeric \"timestamp\"");
        ReplayEntry e{base / item["path"].get<std::string>(), item["timestamp"].get<double>()};
        if (!std::filesystem::is_regular_file(e.path))
            throw LoadError(where + ": missing image file " + e.path.string());
        if (!entries.empty() && !(e.timestamp > entries.back().timestamp))
            throw LoadError(where + ": timestamp " + std::to_string(e.timestamp) +
                            " is not greater than the previous frame's (" + e.path.string() + ")");
        if (e.timestamp < 0.0) throw LoadError(where + ": negative timestamp");
        entries.push_back(std::move(e));
    }
    return entries;
}

ReplaySource::ReplaySource(const std::filesystem::path& manifest_path, double activation_delay)
    : ReplaySource(load_replay_manifest(manifest_path), activation_delay) {}

ReplaySource::ReplaySource(std::vector<ReplayEntry> entries, double activation_delay)
    : FrameSource(activation_delay), entries_(std::move(entries)) {
    if (!entries_.empty()) {
        const auto first = read_png(entries_.front().path);
        width_ = first.width();
        height_ = first.height();
    }
}

std::optional<GrayImage> ReplaySource::next_frame() {
    if (cursor_ >= entries_.size()) return std::nullopt;
    const double t = target_time();
    if (t > entries_.back().timestamp + kTimeSlack) return std::nullopt;

    auto it = std::lower_bound(entries_.begin() + static_cast<std::ptrdiff_t>(cursor_), entries_.end(), t,
                               [](const ReplayEntry& e, double v) { return e.timestamp < v; });
    std::size_t pick = static_cast<std::size_t>(it - entries_.begin());
    if (pick == entries_.size() ||
        (pick > cursor_ && t - entries_[pick - 1].timestamp <= entries_[pick].timestamp - t))
        --pick;

    const auto& e = entries_[pick];
    auto raw = read_png(e.path);
    if (raw.width() != width_ || raw.height() != height_)
        throw LoadError(e.path.string() + ": frame size differs from the first frame");
    cursor_ = pick + 1;
    mark_served();
    return GrayImage(dequantize_u8(raw), e.timestamp, next_index_++);
}

} // namespace isod
