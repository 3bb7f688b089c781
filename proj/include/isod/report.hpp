#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "isod/controller.hpp"

namespace isod {

struct PhaseSummary {
    std::string name;
    double t_start = 0.0;
    double t_end = 0.0;
    std::int64_t frame_count = 0;
    std::int64_t batch_count = 0;
    double frame_ratio = 0.0;     // frame_count / first phase's frame_count
    double duration_ratio = 0.0;  // duration / first phase's duration
};

struct ReportSummary {
    std::vector<PhaseSummary> phases;
    std::vector<std::string> warnings;
    std::vector<std::string> files;
};

// Frame counts per phase from frames.csv rows; a frame belongs to the phase
// whose [t_start, t_end) contains its timestamp.
std::vector<PhaseSummary> summarize_phases(const std::vector<Phase>& phases, const std::vector<double>& timestamps,
                                           const std::vector<std::pair<double, double>>& batch_windows);

// Writes max_strain_history.csv, rate_trace.csv, delmax_variants.csv,
// phase_summary.csv and report_manifest.json into `out_dir`. Missing or
// damaged archive parts produce warnings instead of failures. `phases`
// overrides the phases stored in the run configuration.
ReportSummary export_report(const std::filesystem::path& archive_dir, const std::filesystem::path& out_dir,
                            const std::optional<std::vector<Phase>>& phases = std::nullopt);

} // namespace isod
