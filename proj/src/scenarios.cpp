#include "isod/scenarios.hpp"

namespace isod {

DeformationSchedule enrichment_schedule(const EnrichmentScenario& s) {
    const double cy = (s.size - 1) / 2.0;
    auto key = [&](double t, double stretch, double amp) {
        return ScheduleKey{t, DisplacementMap({Affine{0.0, 0.0, 0.0, stretch}, Band{amp, cy, s.band_width}})};
    };
    return DeformationSchedule({key(0.0, 0.0, 0.0), key(s.phase_a_end, s.stretch, 0.0),
                                key(s.end_time, s.stretch, s.band_amplitude)});
}

std::vector<Phase> enrichment_phases(const EnrichmentScenario& s) {
    return {{"A", 0.0, s.phase_a_end}, {"B", s.phase_a_end, s.end_time + 1.0}};
}

DeformationSchedule alternating_band_schedule(const AlternatingBands& s) {
    const double y1 = s.size * 0.35;
    const double y2 = s.size * 0.65;
    std::vector<ScheduleKey> keys;
    double a1 = 0.0, a2 = 0.0;
    auto push = [&](double t) {
        keys.push_back({t, DisplacementMap({Band{a1, y1, s.band_width}, Band{a2, y2, s.band_width}})});
    };
    push(0.0);
    for (int c = 0; c < s.cycles; ++c) {
        (c % 2 == 0 ? a1 : a2) += s.step;
        push((c + 1) * s.cycle);
    }
    return DeformationSchedule(std::move(keys));
}

RunConfig scenario_config(int size, Metric metric) {
    RunConfig c;
    c.policy = RatePolicy::defaults(metric);
    const int margin = size / 8;
    c.roi = Roi{margin, margin, size - 2 * margin, size - 2 * margin};
    c.flow.window_half = 2;
    c.strain.smoothing_sigma = 1.5;
    c.source.speckle.width = size;
    c.source.speckle.height = size;
    c.source.speckle.dot_density = 50.0;
    c.source.speckle.blur_sigma = 1.0;
    c.source.speckle.rng_seed = 7;
    c.source.seed = 11;
    return c;
}

} // namespace isod
