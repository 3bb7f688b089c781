#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "isod/controller.hpp"
#include "isod/strain.hpp"

namespace isod {

// One batch's strain and displacement rasters. Values are stored as
// little-endian float32, so doubles come back rounded to float precision.
struct BatchContainer {
    StrainField strain;
    DisplacementField displacement;
    std::string strategy;
};

std::vector<std::uint8_t> encode_batch(const StrainField& strain, const DisplacementField& displacement,
                                       std::string_view strategy);
BatchContainer decode_batch(std::span<const std::uint8_t> bytes);

void save_batch(const std::filesystem::path& path, const StrainField& strain,
                const DisplacementField& displacement, std::string_view strategy);
BatchContainer load_batch(const std::filesystem::path& path);

// roi.txt: "rect x0 y0 width height", then optional '#' comment lines.
std::string format_roi(const Roi& roi, const std::vector<std::string>& comments = {});
Roi parse_roi(std::string_view text);  // ParseError names the line number
void write_roi(const Roi& roi, const std::filesystem::path& path, const std::vector<std::string>& comments = {});
Roi read_roi(const std::filesystem::path& path);

struct FrameRow {
    std::int64_t frame_index = 0;
    std::int64_t batch_index = 0;
    double timestamp = 0.0;
    double fps = 0.0;
    friend bool operator==(const FrameRow&, const FrameRow&) = default;
};

std::filesystem::path frame_file(const std::filesystem::path& root, std::int64_t frame_index);
std::filesystem::path batch_file(const std::filesystem::path& root, std::int64_t batch_index);

// CSV forms of the per-batch ledger. Columns for top-k statistics follow
// `k_fractions`.
std::string stats_csv_header(const std::vector<double>& k_fractions);
std::string stats_csv_row(const BatchRecord& r, const std::vector<double>& k_fractions);
std::vector<BatchRecord> parse_stats_csv(std::string_view text);

// Writes a run archive as the run progresses; every file touched in a batch
// is flushed before the next batch starts.
class ArchiveWriter final : public RunObserver {
public:
    // `source` is recorded verbatim in the manifest (kind, schedule, ...).
    ArchiveWriter(std::filesystem::path root, nlohmann::json source = nlohmann::json::object());

    const std::filesystem::path& root() const noexcept { return root_; }

    void on_run_start(const RunStartInfo& info) override;
    void on_roi(const Roi& roi) override;
    void on_frame(const GrayImage& frame, std::int64_t batch_index, double fps) override;
    void on_batch(const BatchRecord& record, const BatchAnalysis* analysis) override;
    void on_run_end(const RunOutcome& outcome, const std::vector<BatchRecord>& records) override;

private:
    void write_manifest(const std::string& status, const std::string& message);
    void write_replay_manifest();

    std::filesystem::path root_;
    nlohmann::json source_;
    nlohmann::json config_json_;
    std::string run_id_;
    std::string strategy_;
    std::vector<double> k_fractions_;
    int frame_width_ = 0;
    int frame_height_ = 0;
    std::ofstream frames_csv_;
    std::ofstream stats_csv_;
    std::ofstream timing_csv_;
    std::vector<std::pair<std::string, double>> replay_entries_;
};

struct RunArchive {
    std::filesystem::path root;
    nlohmann::json manifest;
    RunConfig config;
    std::string status;
    std::optional<Roi> roi;
    std::vector<FrameRow> frames;
    std::vector<BatchRecord> records;  // compute_duration merged from timing.csv
};

// Throws LoadError when the manifest or a required table is missing or corrupt.
RunArchive load_archive(const std::filesystem::path& root);

// Writes `bytes` to `path` through a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_text_file(const std::filesystem::path& path);

} // namespace isod
