#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "isod/deformation.hpp"
#include "isod/image.hpp"
#include "isod/speckle.hpp"

namespace isod {

// Single-consumer stream of frames captured in constant-rate batches.
//
// Calling set_rate() closes the current batch. Frames of a batch are at
// t0 + k / fps; once a batch has served frames, the next one starts
// 1 / fps + activation_delay after its last frame.
class FrameSource {
public:
    virtual ~FrameSource() = default;

    void set_rate(double fps);
    double rate() const noexcept { return fps_; }
    double activation_delay() const noexcept { return activation_delay_; }

    // Next frame of the current batch, or nullopt at end of stream.
    virtual std::optional<GrayImage> next_frame() = 0;

    virtual int frame_width() const noexcept = 0;
    virtual int frame_height() const noexcept = 0;

protected:
    explicit FrameSource(double activation_delay);

    // Capture time of the next frame.
    double target_time() const noexcept { return batch_start_ + static_cast<double>(served_in_batch_) / fps_; }
    void mark_served() noexcept { ++served_in_batch_; }

private:
    double fps_ = 1.0;
    double activation_delay_ = 1.0;
    double batch_start_ = 0.0;
    std::int64_t served_in_batch_ = 0;
};

// Warps a pristine speckle by a deformation schedule, adds seeded Gaussian
// noise and quantizes to 8 bits as a camera would.
class SimulatedSource final : public FrameSource {
public:
    SimulatedSource(SpeckleSpec spec, DeformationSchedule schedule, double noise_sigma,
                    double activation_delay = 1.0, std::uint64_t noise_seed = 0);

    std::optional<GrayImage> next_frame() override;
    int frame_width() const noexcept override { return pristine_.width(); }
    int frame_height() const noexcept override { return pristine_.height(); }

    const GrayImage& pristine() const noexcept { return pristine_; }
    const DeformationSchedule& schedule() const noexcept { return schedule_; }

private:
    SpeckleSpec spec_;
    DeformationSchedule schedule_;
    double noise_sigma_;
    std::uint64_t noise_seed_;
    GrayImage pristine_;
    std::int64_t next_index_ = 0;
};

struct ReplayEntry {
    std::filesystem::path path;  // absolute or relative to the working directory
    double timestamp = 0.0;
};

// Parses a replay manifest {"frames": [{"path", "timestamp"}...]}. Paths are
// resolved against the manifest directory. Throws LoadError naming missing
// files or non-increasing timestamps.
std::vector<ReplayEntry> load_replay_manifest(const std::filesystem::path& manifest_path);

// Serves recorded frames; rate changes subsample by choosing, for each
// target time, the unserved frame with the nearest timestamp.
class ReplaySource final : public FrameSource {
public:
    explicit ReplaySource(const std::filesystem::path& manifest_path, double activation_delay = 1.0);
    ReplaySource(std::vector<ReplayEntry> entries, double activation_delay);

    std::optional<GrayImage> next_frame() override;
    int frame_width() const noexcept override { return width_; }
    int frame_height() const noexcept override { return height_; }

    std::size_t size() const noexcept { return entries_.size(); }

private:
    std::vector<ReplayEntry> entries_;
    std::size_t cursor_ = 0;  // first unserved entry
    std::int64_t next_index_ = 0;
    int width_ = 0;
    int height_ = 0;
};

} // namespace isod
