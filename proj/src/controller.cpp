#include "isod/controller.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace isod {

std::string_view to_string(Metric m) noexcept {
    switch (m) {
    case Metric::MaxStrain: return "MAX_STRAIN";
    case Metric::DelMaxStrain: return "DEL_MAX_STRAIN";
    case Metric::Constant: return "CONSTANT";
    }
    return "MAX_STRAIN";
}

Metric metric_from_string(std::string_view name) {
    if (name == "MAX_STRAIN" || name == "max") return Metric::MaxStrain;
    if (name == "DEL_MAX_STRAIN" || name == "delmax") return Metric::DelMaxStrain;
    if (name == "CONSTANT" || name == "constant") return Metric::Constant;
    throw std::invalid_argument("unknown policy metric '" + std::string(name) + "'");
}

std::string_view to_string(ReferenceStrategy s) noexcept {
    return s == ReferenceStrategy::BatchPair ? "BATCH_PAIR" : "CUMULATIVE";
}

ReferenceStrategy reference_strategy_from_string(std::string_view name) {
    if (name == "CUMULATIVE") return ReferenceStrategy::Cumulative;
    if (name == "BATCH_PAIR") return ReferenceStrategy::BatchPair;
    throw std::invalid_argument("unknown reference strategy '" + std::string(name) + "'");
}

RatePolicy RatePolicy::defaults(Metric m) {
    RatePolicy p;
    p.metric = m;
    if (m == Metric::DelMaxStrain)
        p.thresholds = {{0.002, 4.0}, {0.01, 16.0}, {0.03, 64.0}};
    else
        p.thresholds = {{0.01, 4.0}, {0.03, 16.0}, {0.06, 64.0}};
    return p;
}

void RatePolicy::validate() const {
    auto finite_pos = [](double v) { return std::isfinite(v) && v > 0.0; };
    if (!finite_pos(fps_min)) throw ConfigError("policy.fps_min", "must be positive");
    if (!finite_pos(fps_max) || fps_max < fps_min)
        throw ConfigError("policy.fps_max", "must be at least fps_min");
    if (!(base_fps >= fps_min && base_fps <= fps_max))
        throw ConfigError("policy.base_fps", "must lie within [fps_min, fps_max]");
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        const std::string at = "policy.thresholds[" + std::to_string(i) + "]";
        const auto& row = thresholds[i];
        if (!std::isfinite(row.lower_bound)) throw ConfigError(at + ".lower_bound", "must be finite");
        if (!(row.fps >= fps_min && row.fps <= fps_max))
            throw ConfigError(at + ".fps", "must lie within [fps_min, fps_max]");
        if (i > 0) {
            if (!(row.lower_bound > thresholds[i - 1].lower_bound))
                throw ConfigError(at + ".lower_bound", "lower bounds must be strictly increasing");
            if (row.fps < thresholds[i - 1].fps)
                throw ConfigError(at + ".fps", "fps must not decrease as the lower bound grows");
        }
    }
    if (topk_fraction && !(*topk_fraction > 0.0 && *topk_fraction <= 1.0))
        throw ConfigError("policy.topk_fraction", "must lie in (0, 1]");
}

double policy_metric(const RatePolicy& policy, const StrainStats& stats) {
    switch (policy.metric) {
    case Metric::Constant: return 0.0;
    case Metric::MaxStrain:
        if (policy.topk_fraction) {
            auto it = stats.topk_mean_eyy.find(*policy.topk_fraction);
            if (it != stats.topk_mean_eyy.end()) return it->second;
        }
        return stats.max_eyy;
    case Metric::DelMaxStrain:
        if (policy.topk_fraction) {
            auto it = stats.del_topk_mean_eyy.find(*policy.topk_fraction);
            if (it != stats.del_topk_mean_eyy.end()) return it->second;
        }
        return stats.del_max_eyy;
    }
    return 0.0;
}

RateDecision decide_rate(const RatePolicy& policy, const StrainStats& stats) {
    RateDecision d{policy.base_fps, 0};
    if (policy.metric != Metric::Constant) {
        const double m = policy_metric(policy, stats);
        for (std::size_t i = 0; i < policy.thresholds.size(); ++i) {
            if (policy.thresholds[i].lower_bound <= m) {
                d.fps = policy.thresholds[i].fps;
                d.fired_row = static_cast<int>(i) + 1;
            }
        }
    }
    d.fps = std::clamp(d.fps, policy.fps_min, policy.fps_max);
    return d;
}

void RunConfig::validate() const {
    if (!(batch_duration > 0.0) || !std::isfinite(batch_duration))
        throw ConfigError("batch_duration", "must be positive");
    policy.validate();
    try {
        flow.validate();
    } catch (const std::exception& e) {
        throw ConfigError("flow", e.what());
    }
    if (roi && (roi->width <= 0 || roi->height <= 0 || roi->area() < 9))
        throw ConfigError("roi", "must cover at least 9 pixels");
    if (!(strain.smoothing_sigma >= 0.0)) throw ConfigError("strain.smoothing_sigma", "must be non-negative");
    for (std::size_t i = 0; i < strain.k_fractions.size(); ++i)
        if (!(strain.k_fractions[i] > 0.0 && strain.k_fractions[i] <= 1.0))
            throw ConfigError("strain.k_fractions[" + std::to_string(i) + "]", "must lie in (0, 1]");
    if (stop.max_batches && *stop.max_batches < 1) throw ConfigError("stop.max_batches", "must be at least 1");
    try {
        source.speckle.validate();
    } catch (const std::exception& e) {
        throw ConfigError("source.speckle", e.what());
    }
    if (!(source.noise_sigma >= 0.0)) throw ConfigError("source.noise_sigma", "must be non-negative");
    if (!(source.activation_delay >= 0.0)) throw ConfigError("source.activation_delay", "must be non-negative");
    if (stream.port < 0 || stream.port > 65535) throw ConfigError("stream.port", "must be a TCP port");
    if (stream.ws_port < 0 || stream.ws_port > 65535) throw ConfigError("stream.ws_port", "must be a TCP port");
    for (std::size_t i = 0; i < phases.size(); ++i)
        if (!(phases[i].t_end > phases[i].t_start))
            throw ConfigError("phases[" + std::to_string(i) + "]", "t_end must exceed t_start");
}

CapturedBatch run_batch(FrameSource& source, double fps, double duration, std::int64_t batch_index,
                        const FrameSink& sink) {
    CapturedBatch out;
    const auto n = std::max<std::int64_t>(2, std::llround(duration * fps));
    source.set_rate(fps);
    out.record.batch_index = batch_index;
    out.record.fps_used = fps;
    for (std::int64_t k = 0; k < n; ++k) {
        auto frame = source.next_frame();
        if (!frame) {
            out.end_of_stream = true;
            break;
        }
        if (sink) sink(*frame, batch_index, fps);
        if (!out.first) {
            out.record.first_frame = frame->frame_index;
            out.record.t_start = frame->timestamp;
        }
        out.record.last_frame = frame->frame_index;
        out.record.t_end = frame->timestamp;
        ++out.record.frame_count;
        if (!out.first)
            out.first = std::move(*frame);
        else
            out.last = std::move(*frame);
    }
    return out;
}

BatchAnalysis analyze_batch(const GrayImage& first, const GrayImage& last, AnalysisState& state,
                            const RunConfig& config, std::int64_t batch_index) {
    const Roi& roi = state.roi;
    DisplacementField disp;
    if (config.reference_strategy == ReferenceStrategy::BatchPair) {
        disp = solve_dense(first, last, roi, config.flow);
    } else {
        const GrayImage& ref = state.reference ? *state.reference : first;
        if (!state.total) {
            disp = solve_dense(ref, last, roi, config.flow);
        } else {
            const DisplacementField inc = solve_dense(first, last, roi, config.flow);
            DisplacementField seed = accumulate(*state.total, inc);
            for (int y = 0; y < roi.height; ++y) {
                for (int x = 0; x < roi.width; ++x) {
                    if (seed.valid(x, y) || !state.total->valid(x, y)) continue;
                    seed.u(x, y) = state.total->u(x, y);
                    seed.v(x, y) = state.total->v(x, y);
                    seed.valid(x, y) = 1;
                }
            }
            disp = solve_dense(ref, last, roi, config.flow, &seed);
        }
    }

    StrainField strain = green_strain(displacement_gradients(disp, config.strain.smoothing_sigma));
    strain.batch_index = batch_index;
    strain.timestamp = last.timestamp;

    std::vector<double> ks = config.strain.k_fractions;
    if (config.policy.topk_fraction &&
        std::find(ks.begin(), ks.end(), *config.policy.topk_fraction) == ks.end())
        ks.push_back(*config.policy.topk_fraction);
    StrainStats stats = strain_stats(strain, state.previous ? &*state.previous : nullptr, ks,
                                     config.strain.component);

    if (config.reference_strategy == ReferenceStrategy::Cumulative) {
        if (!state.reference) state.reference = first;
        state.total = disp;
    }
    state.previous = stats;
    return BatchAnalysis{std::move(disp), std::move(strain), std::move(stats)};
}

namespace {

void notify_end(const RunSinks& sinks, const RunOutcome& outcome, const std::vector<BatchRecord>& records) {
    if (sinks.publisher) sinks.publisher->on_run_end(outcome, records);
    for (auto* o : sinks.observers) o->on_run_end(outcome, records);
}

} // namespace

RunResult run_experiment(FrameSource& source, const RunConfig& cfg_in, const RunSinks& sinks) {
    cfg_in.validate();
    RunConfig config = cfg_in;
    RunResult result;
    result.run_id = make_run_id(config);

    RunStartInfo start{result.run_id, &config, source.frame_width(), source.frame_height()};
    if (sinks.control) sinks.control->set_frame_dims(start.frame_width, start.frame_height);
    if (config.roi) {
        try {
            config.roi->validate(start.frame_width, start.frame_height, config.flow.margin());
        } catch (const DimensionError& e) {
            throw ConfigError("roi", e.what());
        }
    }
    if (sinks.publisher) sinks.publisher->on_run_start(start);
    for (auto* o : sinks.observers) o->on_run_start(start);

    bool first_frame_seen = false;
    const FrameSink sink = [&](const GrayImage& f, std::int64_t batch, double fps) {
        if (!first_frame_seen) {
            first_frame_seen = true;
            if (sinks.publisher) sinks.publisher->on_first_frame(f);
            for (auto* o : sinks.observers) o->on_first_frame(f);
        }
        for (auto* o : sinks.observers) o->on_frame(f, batch, fps);
    };

    AnalysisState state;
    bool roi_announced = false;
    auto announce_roi = [&](const Roi& r) {
        state.roi = r;
        roi_announced = true;
        if (sinks.publisher) sinks.publisher->on_roi(r);
        for (auto* o : sinks.observers) o->on_roi(r);
    };
    if (config.roi) announce_roi(*config.roi);

    double fps = std::clamp(config.policy.base_fps, config.policy.fps_min, config.policy.fps_max);
    RunOutcome outcome{"completed", ""};

    for (std::int64_t batch = 0;; ++batch) {
        if (config.stop.max_batches && batch >= *config.stop.max_batches) break;
        if (sinks.control && sinks.control->stop_requested()) {
            outcome.status = "stopped_by_operator";
            break;
        }

        CapturedBatch cap;
        try {
            cap = run_batch(source, fps, config.batch_duration, batch, sink);
        } catch (const std::exception& e) {
            outcome = {"source_error", e.what()};
            break;
        }
        if (cap.record.frame_count == 0) break;  // end of stream at a batch boundary

        BatchRecord rec = cap.record;
        if (batch == 0 && config.reference_strategy == ReferenceStrategy::Cumulative)
            state.reference = cap.first;

        if (!cap.last) {
            rec.next_fps = fps;
            rec.fired_row = -1;
            rec.note = "fewer than 2 frames; flow skipped";
            result.records.push_back(rec);
            for (auto* o : sinks.observers) o->on_batch(rec, nullptr);
            break;
        }

        if (!roi_announced) {
            std::optional<Roi> r = sinks.control ? sinks.control->wait_for_roi() : std::nullopt;
            if (!r) {
                outcome.status = sinks.control && sinks.control->stop_requested() ? "stopped_by_operator"
                                                                                   : "analysis_error";
                if (outcome.status == "analysis_error") outcome.message = "no ROI was provided";
                break;
            }
            announce_roi(*r);
        }
        if (sinks.control) sinks.control->set_roi_locked();

        const auto t0 = std::chrono::steady_clock::now();
        std::optional<BatchAnalysis> analysis;
        try {
            analysis = analyze_batch(*cap.first, *cap.last, state, config, batch);
        } catch (const InsufficientDataError& e) {
            rec.note = e.what();
        } catch (const DimensionError& e) {
            outcome = {"analysis_error", e.what()};
            break;
        }

        if (sinks.control) {
            if (auto p = sinks.control->take_policy()) config.policy = *p;
        }
        if (analysis) {
            rec.analyzed = true;
            rec.stats = analysis->stats;
            const RateDecision d = decide_rate(config.policy, rec.stats);
            rec.next_fps = d.fps;
            rec.fired_row = d.fired_row;
        } else {
            rec.flagged = true;
            rec.next_fps = std::clamp(fps, config.policy.fps_min, config.policy.fps_max);
            rec.fired_row = -1;
        }
        rec.compute_duration = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (sinks.publisher) sinks.publisher->on_batch(rec, analysis ? &*analysis : nullptr);
        rec.compute_duration = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        result.records.push_back(rec);
        for (auto* o : sinks.observers) o->on_batch(rec, analysis ? &*analysis : nullptr);

        if (cap.end_of_stream) break;
        fps = rec.next_fps;
    }

    result.outcome = outcome;
    notify_end(sinks, outcome, result.records);
    return result;
}

} // namespace isod
