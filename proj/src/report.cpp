#include "isod/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "isod/archive.hpp"
#include "isod/config.hpp"
#include "isod/text.hpp"

namespace isod {

namespace {

void write_csv(const std::filesystem::path& path, const std::string& header, const std::vector<std::string>& rows) {
    std::string text = header + "\n";
    for (const auto& r : rows) text += r + "\n";
    write_file_atomic(path, text);
}

std::string cell_or_empty(const std::map<double, double>& m, double k) {
    auto it = m.find(k);
    return it == m.end() ? std::string() : format_double(it->second);
}

} // namespace

std::vector<PhaseSummary> summarize_phases(const std::vector<Phase>& phases, const std::vector<double>& timestamps,
                                           const std::vector<std::pair<double, double>>& batch_windows) {
    std::vector<PhaseSummary> out;
    for (const auto& p : phases) {
        PhaseSummary s{p.name, p.t_start, p.t_end, 0, 0, 0.0, 0.0};
        for (double t : timestamps)
            if (t >= p.t_start && t < p.t_end) ++s.frame_count;
        for (const auto& [t0, t1] : batch_windows)
            if (t0 >= p.t_start && t0 < p.t_end) ++s.batch_count;
        out.push_back(s);
    }
    if (!out.empty()) {
        const double f0 = static_cast<double>(out.front().frame_count);
        const double d0 = out.front().t_end - out.front().t_start;
        for (auto& s : out) {
            s.frame_ratio = f0 > 0.0 ? static_cast<double>(s.frame_count) / f0 : 0.0;
            s.duration_ratio = d0 > 0.0 ? (s.t_end - s.t_start) / d0 : 0.0;
        }
    }
    return out;
}

ReportSummary export_report(const std::filesystem::path& archive_dir, const std::filesystem::path& out_dir,
                            const std::optional<std::vector<Phase>>& phase_override) {
    ReportSummary rep;
    std::filesystem::create_directories(out_dir);

    nlohmann::json manifest;
    std::vector<double> ks = kDefaultTopFractions;
    std::vector<Phase> phases;
    std::string status = "unknown";
    try {
        manifest = nlohmann::json::parse(read_text_file(archive_dir / "manifest.json"));
        status = manifest.value("status", "unknown");
        const RunConfig cfg = run_config_from_json(manifest.at("config"));
        ks = cfg.strain.k_fractions;
        if (cfg.policy.topk_fraction && std::find(ks.begin(), ks.end(), *cfg.policy.topk_fraction) == ks.end())
            ks.push_back(*cfg.policy.topk_fraction);
        phases = cfg.phases;
    } catch (const std::exception& e) {
        rep.warnings.push_back(std::string("manifest unreadable: ") + e.what());
    }
    if (phase_override) phases = *phase_override;
    if (status != "completed" && status != "stopped_by_operator")
        rep.warnings.push_back("run status is '" + status + "'");

    std::vector<BatchRecord> records;
    try {
        records = parse_stats_csv(read_text_file(archive_dir / "stats.csv"));
    } catch (const std::exception& e) {
        rep.warnings.push_back(std::string("stats.csv unreadable: ") + e.what());
    }

    std::vector<double> timestamps;
    try {
        const std::string text = read_text_file(archive_dir / "frames" / "frames.csv");
        std::size_t line_no = 0, pos = 0;
        while (pos < text.size()) {
            const std::size_t end = text.find('\n', pos);
            const std::string line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
            pos = end == std::string::npos ? text.size() : end + 1;
            if (line_no++ == 0 || line.empty()) continue;
            const auto cells = split_csv_line(line);
            if (cells.size() != 4) {
                rep.warnings.push_back("frames.csv:" + std::to_string(line_no) + ": malformed row");
                continue;
            }
            timestamps.push_back(parse_double(cells[2]));
            const auto frame = parse_int(cells[0]);
            if (!std::filesystem::is_regular_file(frame_file(archive_dir, frame)))
                rep.warnings.push_back("frame " + std::to_string(frame) + " listed in frames.csv is missing");
        }
    } catch (const std::exception& e) {
        rep.warnings.push_back(std::string("frames.csv unreadable: ") + e.what());
    }

    std::vector<std::string> hist, rate, del;
    std::string hist_header = "batch_index,t_end,max_eyy,mean_eyy";
    std::string del_header = "batch_index,t_end,del_max_all";
    for (double k : ks) {
        hist_header += ",top_" + format_double(k) + "_mean_eyy";
        del_header += ",del_top_" + format_double(k);
    }
    hist_header += ",valid_pixel_count,analyzed";
    std::vector<std::pair<double, double>> windows;
    for (const auto& r : records) {
        windows.emplace_back(r.t_start, r.t_end);
        std::string h = std::to_string(r.batch_index) + "," + format_double(r.t_end) + "," +
                        format_double(r.stats.max_eyy) + "," + format_double(r.stats.mean_eyy);
        std::string d = std::to_string(r.batch_index) + "," + format_double(r.t_end) + "," +
                        format_double(r.stats.del_max_eyy);
        for (double k : ks) {
            h += "," + cell_or_empty(r.stats.topk_mean_eyy, k);
            d += "," + cell_or_empty(r.stats.del_topk_mean_eyy, k);
        }
        h += "," + std::to_string(r.stats.valid_pixel_count) + "," + (r.analyzed ? "1" : "0");
        hist.push_back(h);
        del.push_back(d);
        rate.push_back(std::to_string(r.batch_index) + "," + format_double(r.t_start) + "," + format_double(r.t_end) +
                       "," + format_double(r.fps_used) + "," + format_double(r.next_fps) + "," +
                       std::to_string(r.fired_row) + "," + std::to_string(r.frame_count));
        if (r.flagged)
            rep.warnings.push_back("batch " + std::to_string(r.batch_index) + " flagged: " + r.note);
        else if (!r.analyzed)
            rep.warnings.push_back("batch " + std::to_string(r.batch_index) + " not analyzed: " + r.note);
    }

    write_csv(out_dir / "max_strain_history.csv", hist_header, hist);
    write_csv(out_dir / "rate_trace.csv", "batch_index,t_start,t_end,fps_used,next_fps,fired_row,frame_count", rate);
    write_csv(out_dir / "delmax_variants.csv", del_header, del);

    if (phases.empty() && !timestamps.empty())
        phases.push_back({"run", timestamps.front(), std::nextafter(timestamps.back(), 1e300)});
    rep.phases = summarize_phases(phases, timestamps, windows);
    std::vector<std::string> prow;
    for (const auto& p : rep.phases)
        prow.push_back(csv_escape(p.name) + "," + format_double(p.t_start) + "," + format_double(p.t_end) + "," +
                       format_double(p.t_end - p.t_start) + "," + std::to_string(p.frame_count) + "," +
                       std::to_string(p.batch_count) + "," + format_double(p.frame_ratio) + "," +
                       format_double(p.duration_ratio));
    write_csv(out_dir / "phase_summary.csv",
              "phase,t_start,t_end,duration,frame_count,batch_count,frame_ratio,duration_ratio", prow);

    rep.files = {"max_strain_history.csv", "rate_trace.csv", "delmax_variants.csv", "phase_summary.csv",
                 "report_manifest.json"};
    const nlohmann::json rm = {{"archive", archive_dir.string()},
                               {"status", status},
                               {"batches", records.size()},
                               {"frames", timestamps.size()},
                               {"files", rep.files},
                               {"warnings", rep.warnings}};
    write_file_atomic(out_dir / "report_manifest.json", rm.dump(2) + "\n");
    return rep;
}

} // namespace isod
