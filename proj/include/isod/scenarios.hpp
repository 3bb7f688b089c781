#pragma once

#include "isod/controller.hpp"
#include "isod/deformation.hpp"

namespace isod {

// Two-phase loading: a homogeneous stretch ramps dv/dy 0 -> 0.005 over
// [0, phase_a_end], then a horizontal band opens across the ROI center until
// `end_time`.
struct EnrichmentScenario {
    int size = 128;
    double phase_a_end = 120.0;
    double end_time = 329.0;
    double stretch = 0.005;
    double band_amplitude = 0.8;  // px of total opening at end_time
    double band_width = 4.0;
};

DeformationSchedule enrichment_schedule(const EnrichmentScenario& s);
std::vector<Phase> enrichment_phases(const EnrichmentScenario& s);

// Two bands that grow in alternate cycles of `cycle` seconds, so the
// location and size of the per-batch strain increment jump back and forth.
struct AlternatingBands {
    int size = 128;
    int cycles = 24;
    double cycle = 3.0;
    double step = 0.12;  // px of opening added to the active band per cycle
    double band_width = 4.0;
};

DeformationSchedule alternating_band_schedule(const AlternatingBands& s);

// Simulation and analysis settings shared by the scripted scenarios.
RunConfig scenario_config(int size, Metric metric);

} // namespace isod
