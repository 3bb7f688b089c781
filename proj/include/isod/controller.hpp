#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "isod/flow.hpp"
#include "isod/frame_source.hpp"
#include "isod/speckle.hpp"
#include "isod/strain.hpp"

namespace isod {

enum class Metric { MaxStrain, DelMaxStrain, Constant };

std::string_view to_string(Metric m) noexcept;
Metric metric_from_string(std::string_view name);

struct RateThreshold {
    double lower_bound = 0.0;
    double fps = 1.0;
    friend bool operator==(const RateThreshold&, const RateThreshold&) = default;
};

struct RatePolicy {
    Metric metric = Metric::MaxStrain;
    std::vector<RateThreshold> thresholds;
    double base_fps = 1.0;
    double fps_min = 1.0;
    double fps_max = 133.0;
    std::optional<double> topk_fraction;  // use the top-k mean in place of the raw max

    static RatePolicy defaults(Metric m);

    // Throws ConfigError with a field path ("policy.thresholds[1].fps", ...).
    void validate() const;

    friend bool operator==(const RatePolicy&, const RatePolicy&) = default;
};

struct RateDecision {
    double fps = 1.0;
    int fired_row = 0;  // 1-based threshold row; 0 when base_fps applies
    friend bool operator==(const RateDecision&, const RateDecision&) = default;
};

// The scalar the policy compares against its table (0 for CONSTANT).
double policy_metric(const RatePolicy& policy, const StrainStats& stats);

RateDecision decide_rate(const RatePolicy& policy, const StrainStats& stats);

enum class ReferenceStrategy { Cumulative, BatchPair };

std::string_view to_string(ReferenceStrategy s) noexcept;
ReferenceStrategy reference_strategy_from_string(std::string_view name);

struct StrainConfig {
    double smoothing_sigma = 0.0;
    StrainComponent component = StrainComponent::Eyy;
    std::vector<double> k_fractions = kDefaultTopFractions;
    friend bool operator==(const StrainConfig&, const StrainConfig&) = default;
};

struct StopCondition {
    std::optional<std::int64_t> max_batches;  // schedule end and operator stop are always honoured
    friend bool operator==(const StopCondition&, const StopCondition&) = default;
};

struct SourceConfig {
    SpeckleSpec speckle{};
    double noise_sigma = 0.0;
    double activation_delay = 1.0;
    std::uint64_t seed = 0;  // noise seed; the speckle seed lives in `speckle`
    friend bool operator==(const SourceConfig&, const SourceConfig&) = default;
};

struct StreamConfig {
    std::string address = "127.0.0.1";
    int port = 7341;
    int ws_port = 7342;  // 0 disables the /ws endpoint
    friend bool operator==(const StreamConfig&, const StreamConfig&) = default;
};

struct Phase {
    std::string name;
    double t_start = 0.0;
    double t_end = 0.0;  // exclusive
    friend bool operator==(const Phase&, const Phase&) = default;
};

struct RunConfig {
    double batch_duration = 2.0;
    RatePolicy policy = RatePolicy::defaults(Metric::MaxStrain);
    std::optional<Roi> roi;  // nullopt: interactive selection over the stream
    FlowConfig flow{};
    StrainConfig strain{};
    StopCondition stop{};
    ReferenceStrategy reference_strategy = ReferenceStrategy::Cumulative;
    SourceConfig source{};
    StreamConfig stream{};
    std::vector<Phase> phases;

    void validate() const;
    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct BatchRecord {
    std::int64_t batch_index = 0;
    double fps_used = 0.0;
    std::int64_t first_frame = 0;
    std::int64_t last_frame = 0;
    std::int64_t frame_count = 0;
    double t_start = 0.0;
    double t_end = 0.0;
    double compute_duration = 0.0;  // seconds of analysis, decision and publication
    StrainStats stats{};
    double next_fps = 0.0;
    int fired_row = 0;  // -1 when the rate was held after an analysis failure
    bool analyzed = false;
    bool flagged = false;
    std::string note;

    friend bool operator==(const BatchRecord&, const BatchRecord&) = default;
};

// Frames captured for one batch; only the first and last are retained.
struct CapturedBatch {
    BatchRecord record;
    std::optional<GrayImage> first;
    std::optional<GrayImage> last;
    bool end_of_stream = false;
};

using FrameSink = std::function<void(const GrayImage&, std::int64_t batch_index, double fps)>;

// Sets the rate, then pulls round(duration * fps) frames (at least 2),
// handing each to `sink`. Stops early at end of stream.
CapturedBatch run_batch(FrameSource& source, double fps, double duration, std::int64_t batch_index,
                        const FrameSink& sink = {});

struct AnalysisState {
    Roi roi;
    std::optional<GrayImage> reference;      // first frame of the run
    std::optional<DisplacementField> total;  // reference -> last analyzed frame
    std::optional<StrainStats> previous;
};

struct BatchAnalysis {
    DisplacementField displacement;
    StrainField strain;
    StrainStats stats;
};

// Flow, strain and statistics for one batch. CUMULATIVE reports strain
// relative to the run's reference frame; BATCH_PAIR uses the batch pair
// alone. `state` is updated only when the analysis succeeds. Throws
// InsufficientDataError when too few pixels remain valid.
BatchAnalysis analyze_batch(const GrayImage& first, const GrayImage& last, AnalysisState& state,
                            const RunConfig& config, std::int64_t batch_index);

struct RunOutcome {
    std::string status;  // completed | stopped_by_operator | source_error | analysis_error
    std::string message;
};

struct RunStartInfo {
    std::string run_id;
    const RunConfig* config = nullptr;
    int frame_width = 0;
    int frame_height = 0;
};

// Receives run events. All callbacks are made from the controller thread.
class RunObserver {
public:
    virtual ~RunObserver() = default;
    virtual void on_run_start(const RunStartInfo&) {}
    virtual void on_first_frame(const GrayImage&) {}
    virtual void on_roi(const Roi&) {}
    virtual void on_frame(const GrayImage&, std::int64_t /*batch_index*/, double /*fps*/) {}
    virtual void on_batch(const BatchRecord&, const BatchAnalysis*) {}
    virtual void on_run_end(const RunOutcome&, const std::vector<BatchRecord>&) {}
};

// Operator commands consumed at batch boundaries.
class ControlInlet {
public:
    virtual ~ControlInlet() = default;
    virtual void set_frame_dims(int width, int height) = 0;
    virtual void set_roi_locked() = 0;  // analysis has started
    // Blocks until an ROI arrives or a stop is requested.
    virtual std::optional<Roi> wait_for_roi() = 0;
    virtual std::optional<RatePolicy> take_policy() = 0;
    virtual bool stop_requested() const = 0;
};

struct RunSinks {
    std::vector<RunObserver*> observers;  // archive, logging: notified after timing
    RunObserver* publisher = nullptr;     // live stream: notified inside the timed section
    ControlInlet* control = nullptr;
};

struct RunResult {
    RunOutcome outcome;
    std::vector<BatchRecord> records;
    std::string run_id;
};

// Deterministic identifier derived from the configuration.
std::string make_run_id(const RunConfig& config);

// capture -> analyze -> decide -> set_rate until a stop condition holds.
RunResult run_experiment(FrameSource& source, const RunConfig& config, const RunSinks& sinks = {});

} // namespace isod
