#include "isod/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <iterator>
#include <map>
#include <sstream>

#include "isod/config.hpp"
#include "isod/png_io.hpp"
#include "isod/text.hpp"
#include "isod/zip.hpp"

namespace isod {

static_assert(std::endian::native == std::endian::little, "raster containers assume a little-endian host");

namespace {

constexpr int kContainerVersion = 1;

std::vector<std::uint8_t> f32_bytes(const Raster<double>& r) {
    std::vector<std::uint8_t> out(r.size() * 4);
    for (std::size_t i = 0; i < r.size(); ++i) {
        const float f = static_cast<float>(r.values()[i]);
        std::memcpy(out.data() + 4 * i, &f, 4);
    }
    return out;
}

std::vector<std::uint8_t> i32_bytes(const Raster<std::int32_t>& r) {
    std::vector<std::uint8_t> out(r.size() * 4);
    std::memcpy(out.data(), r.values().data(), out.size());
    return out;
}

const ZipEntry& find_field(const std::vector<ZipEntry>& entries, const std::string& field, const std::string& file) {
    for (const auto& e : entries)
        if (e.name == file) return e;
    throw LoadError("strain container: missing field '" + field + "' (" + file + ")");
}

void check_length(const ZipEntry& e, const std::string& field, std::size_t expected) {
    if (e.data.size() != expected)
        throw LoadError("strain container: length mismatch for field '" + field + "': expected " +
                        std::to_string(expected) + " bytes, found " + std::to_string(e.data.size()));
}

Raster<double> f32_raster(const ZipEntry& e, const std::string& field, int w, int h) {
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    check_length(e, field, n * 4);
    Raster<double> r(w, h, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        float f;
        std::memcpy(&f, e.data.data() + 4 * i, 4);
        r.values()[i] = f;
    }
    return r;
}

Raster<std::uint8_t> u8_raster(const ZipEntry& e, const std::string& field, int w, int h) {
    check_length(e, field, static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
    return Raster<std::uint8_t>(w, h, e.data);
}

Raster<std::int32_t> i32_raster(const ZipEntry& e, const std::string& field, int w, int h) {
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    check_length(e, field, n * 4);
    std::vector<std::int32_t> v(n);
    std::memcpy(v.data(), e.data.data(), n * 4);
    return Raster<std::int32_t>(w, h, std::move(v));
}

std::string bool_text(bool b) { return b ? "1" : "0"; }

std::string top_column(double k) { return "top_" + format_double(k) + "_mean_eyy"; }
std::string del_top_column(double k) { return "del_top_" + format_double(k) + "_mean_eyy"; }

std::string frame_name(std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%06lld.png", static_cast<long long>(index));
    return buf;
}

std::vector<std::string> lines_of(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == '\n') {
            if (!cur.empty() && cur.back() == '\r') cur.pop_back();
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

} // namespace

std::vector<std::uint8_t> encode_batch(const StrainField& s, const DisplacementField& d, std::string_view strategy) {
    const Roi& roi = s.roi;
    if (!(d.roi == roi)) throw DimensionError("strain and displacement ROIs differ");
    const int w = roi.width, h = roi.height;
    for (const auto* r : {&s.exx, &s.eyy, &s.exy, &d.u, &d.v})
        if (r->width() != w || r->height() != h) throw DimensionError("raster size does not match the ROI");

    nlohmann::json fields = nlohmann::json::array();
    auto field = [&](const char* name, const char* dtype) {
        fields.push_back({{"name", name}, {"file", std::string(name) + ".bin"}, {"dtype", dtype}});
    };
    for (const char* n : {"exx", "eyy", "exy", "u", "v"}) field(n, "f32le");
    field("valid", "u8");
    field("flow_valid", "u8");
    field("iterations", "i32le");

    const nlohmann::json manifest = {
        {"format", "isod-strain"},
        {"version", kContainerVersion},
        {"roi", to_json(roi)},
        {"epoch", {{"batch_index", s.batch_index}, {"timestamp", s.timestamp}}},
        {"dtype", "f32le"},
        {"order", "row-major"},
        {"strategy", std::string(strategy)},
        {"fields", fields},
    };
    const std::string mtext = manifest.dump(2) + "\n";

    std::vector<ZipEntry> entries;
    entries.push_back({"manifest.json", std::vector<std::uint8_t>(mtext.begin(), mtext.end())});
    entries.push_back({"exx.bin", f32_bytes(s.exx)});
    entries.push_back({"eyy.bin", f32_bytes(s.eyy)});
    entries.push_back({"exy.bin", f32_bytes(s.exy)});
    entries.push_back({"u.bin", f32_bytes(d.u)});
    entries.push_back({"v.bin", f32_bytes(d.v)});
    entries.push_back({"valid.bin", s.valid.data()});
    entries.push_back({"flow_valid.bin", d.valid.data()});
    entries.push_back({"iterations.bin", i32_bytes(d.iterations_used)});
    return zip_store(entries);
}

BatchContainer decode_batch(std::span<const std::uint8_t> bytes) {
    const auto entries = zip_read(bytes);
    const auto& mentry = find_field(entries, "manifest", "manifest.json");
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(mentry.data.begin(), mentry.data.end());
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("strain container: invalid manifest: ") + e.what());
    }

    BatchContainer c;
    int w = 0, h = 0;
    try {
        const Roi roi = roi_from_json(m.at("roi"));
        w = roi.width;
        h = roi.height;
        c.strain.roi = roi;
        c.displacement.roi = roi;
        c.strain.batch_index = m.at("epoch").at("batch_index").get<std::int64_t>();
        c.strain.timestamp = m.at("epoch").at("timestamp").get<double>();
        c.strategy = m.value("strategy", "");
        if (m.at("dtype").get<std::string>() != "f32le" || m.at("order").get<std::string>() != "row-major")
            throw LoadError("strain container: unsupported dtype or raster order");
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("strain container: malformed manifest: ") + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("strain container: malformed manifest: ") + e.what());
    }
    if (w <= 0 || h <= 0) throw LoadError("strain container: empty ROI");

    c.strain.exx = f32_raster(find_field(entries, "exx", "exx.bin"), "exx", w, h);
    c.strain.eyy = f32_raster(find_field(entries, "eyy", "eyy.bin"), "eyy", w, h);
    c.strain.exy = f32_raster(find_field(entries, "exy", "exy.bin"), "exy", w, h);
    c.strain.valid = u8_raster(find_field(entries, "valid", "valid.bin"), "valid", w, h);
    c.displacement.u = f32_raster(find_field(entries, "u", "u.bin"), "u", w, h);
    c.displacement.v = f32_raster(find_field(entries, "v", "v.bin"), "v", w, h);
    c.displacement.valid = u8_raster(find_field(entries, "flow_valid", "flow_valid.bin"), "flow_valid", w, h);
    c.displacement.iterations_used =
        i32_raster(find_field(entries, "iterations", "iterations.bin"), "iterations", w, h);
    return c;
}

void save_batch(const std::filesystem::path& path, const StrainField& strain, const DisplacementField& displacement,
                std::string_view strategy) {
    const auto bytes = encode_batch(strain, displacement, strategy);
    write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

BatchContainer load_batch(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("cannot open strain container " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return decode_batch(bytes);
    } catch (const LoadError& e) {
        throw LoadError(path.string() + ": " + e.what());
    }
}

std::string format_roi(const Roi& roi, const std::vector<std::string>& comments) {
    std::string out = "rect " + std::to_string(roi.x0) + " " + std::to_string(roi.y0) + " " +
                      std::to_string(roi.width) + " " + std::to_string(roi.height) + "\n";
    for (const auto& c : comments) out += "# " + c + "\n";
    return out;
}

Roi parse_roi(std::string_view text) {
    const auto lines = lines_of(text);
    if (lines.empty()) throw ParseError("roi.txt:1: empty file, expected \"rect x0 y0 width height\"");
    std::istringstream in(lines[0]);
    std::string word, extra;
    Roi r;
    if (!(in >> word >> r.x0 >> r.y0 >> r.width >> r.height) || word != "rect" || (in >> extra))
        throw ParseError("roi.txt:1: expected \"rect x0 y0 width height\", found \"" + lines[0] + "\"");
    if (r.width <= 0 || r.height <= 0) throw ParseError("roi.txt:1: width and height must be positive");
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty() || lines[i][0] == '#') continue;
        throw ParseError("roi.txt:" + std::to_string(i + 1) + ": expected a '#' comment line");
    }
    return r;
}

void write_roi(const Roi& roi, const std::filesystem::path& path, const std::vector<std::string>& comments) {
    write_file_atomic(path, format_roi(roi, comments));
}

Roi read_roi(const std::filesystem::path& path) {
    try {
        return parse_roi(read_text_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::filesystem::path frame_file(const std::filesystem::path& root, std::int64_t frame_index) {
    return root / "frames" / frame_name(frame_index);
}

std::filesystem::path batch_file(const std::filesystem::path& root, std::int64_t batch_index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "batch_%06lld.zip", static_cast<long long>(batch_index));
    return root / "strain" / buf;
}

std::string stats_csv_header(const std::vector<double>& ks) {
    std::string h = "batch_index,t_start,t_end,fps_used,first_frame,last_frame,frame_count,max_eyy,mean_eyy,del_max_eyy";
    for (double k : ks) h += "," + top_column(k);
    for (double k : ks) h += "," + del_top_column(k);
    h += ",valid_pixel_count,fired_row,next_fps,analyzed,flagged,note";
    return h;
}

std::string stats_csv_row(const BatchRecord& r, const std::vector<double>& ks) {
    auto lookup = [](const std::map<double, double>& m, double k) {
        auto it = m.find(k);
        return it == m.end() ? std::string() : format_double(it->second);
    };
    std::string row = std::to_string(r.batch_index) + "," + format_double(r.t_start) + "," + format_double(r.t_end) +
                      "," + format_double(r.fps_used) + "," + std::to_string(r.first_frame) + "," +
                      std::to_string(r.last_frame) + "," + std::to_string(r.frame_count) + "," +
                      format_double(r.stats.max_eyy) + "," + format_double(r.stats.mean_eyy) + "," +
                      format_double(r.stats.del_max_eyy);
    for (double k : ks) row += "," + lookup(r.stats.topk_mean_eyy, k);
    for (double k : ks) row += "," + lookup(r.stats.del_topk_mean_eyy, k);
    row += "," + std::to_string(r.stats.valid_pixel_count) + "," + std::to_string(r.fired_row) + "," +
           format_double(r.next_fps) + "," + bool_text(r.analyzed) + "," + bool_text(r.flagged) + "," +
           csv_escape(r.note);
    return row;
}

std::vector<BatchRecord> parse_stats_csv(std::string_view text) {
    const auto lines = lines_of(text);
    if (lines.empty()) throw ParseError("stats.csv: missing header row");
    const auto header = split_csv_line(lines[0]);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const char* required : {"batch_index", "t_start", "t_end", "fps_used", "first_frame", "last_frame",
                                 "frame_count", "max_eyy", "mean_eyy", "del_max_eyy", "valid_pixel_count",
                                 "fired_row", "next_fps", "analyzed", "flagged", "note"})
        if (!col.count(required)) throw ParseError(std::string("stats.csv: missing column ") + required);

    std::vector<std::pair<double, std::size_t>> top_cols, del_cols;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const std::string& name = header[i];
        const std::string suffix = "_mean_eyy";
        if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
            continue;
        if (name.rfind("del_top_", 0) == 0)
            del_cols.emplace_back(parse_double(name.substr(8, name.size() - 8 - suffix.size())), i);
        else if (name.rfind("top_", 0) == 0)
            top_cols.emplace_back(parse_double(name.substr(4, name.size() - 4 - suffix.size())), i);
    }

    std::vector<BatchRecord> out;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        if (lines[li].empty()) continue;
        const auto cells = split_csv_line(lines[li]);
        if (cells.size() != header.size())
            throw ParseError("stats.csv:" + std::to_string(li + 1) + ": expected " + std::to_string(header.size()) +
                             " fields, found " + std::to_string(cells.size()));
        try {
            auto cell = [&](const char* name) -> const std::string& { return cells[col.at(name)]; };
            BatchRecord r;
            r.batch_index = parse_int(cell("batch_index"));
            r.t_start = parse_double(cell("t_start"));
            r.t_end = parse_double(cell("t_end"));
            r.fps_used = parse_double(cell("fps_used"));
            r.first_frame = parse_int(cell("first_frame"));
            r.last_frame = parse_int(cell("last_frame"));
            r.frame_count = parse_int(cell("frame_count"));
            r.stats.max_eyy = parse_double(cell("max_eyy"));
            r.stats.mean_eyy = parse_double(cell("mean_eyy"));
            r.stats.del_max_eyy = parse_double(cell("del_max_eyy"));
            for (const auto& [k, i] : top_cols)
                if (!cells[i].empty()) r.stats.topk_mean_eyy[k] = parse_double(cells[i]);
            for (const auto& [k, i] : del_cols)
                if (!cells[i].empty()) r.stats.del_topk_mean_eyy[k] = parse_double(cells[i]);
            r.stats.valid_pixel_count = static_cast<std::size_t>(parse_int(cell("valid_pixel_count")));
            r.fired_row = static_cast<int>(parse_int(cell("fired_row")));
            r.next_fps = parse_double(cell("next_fps"));
            r.analyzed = cell("analyzed") == "1";
            r.flagged = cell("flagged") == "1";
            r.note = cell("note");
            if (!out.empty() && r.batch_index <= out.back().batch_index)
                throw ParseError("batch_index is not strictly increasing");
            out.push_back(std::move(r));
        } catch (const ParseError& e) {
            throw ParseError("stats.csv:" + std::to_string(li + 1) + ": " + e.what());
        }
    }
    return out;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("cannot open " + path.string());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

ArchiveWriter::ArchiveWriter(std::filesystem::path root, nlohmann::json source)
    : root_(std::move(root)), source_(std::move(source)) {}

void ArchiveWriter::on_run_start(const RunStartInfo& info) {
    std::filesystem::create_directories(root_ / "frames");
    std::filesystem::create_directories(root_ / "strain");
    run_id_ = info.run_id;
    config_json_ = to_json(*info.config);
    strategy_ = std::string(to_string(info.config->reference_strategy));
    k_fractions_ = info.config->strain.k_fractions;
    if (auto k = info.config->policy.topk_fraction;
        k && std::find(k_fractions_.begin(), k_fractions_.end(), *k) == k_fractions_.end())
        k_fractions_.push_back(*k);
    frame_width_ = info.frame_width;
    frame_height_ = info.frame_height;

    auto open = [](std::ofstream& f, const std::filesystem::path& p, const std::string& header) {
        f.open(p, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot create " + p.string());
        f << header << "\n";
        f.flush();
    };
    open(frames_csv_, root_ / "frames" / "frames.csv", "frame_index,batch_index,timestamp,fps");
    open(stats_csv_, root_ / "stats.csv", stats_csv_header(k_fractions_));
    open(timing_csv_, root_ / "timing.csv", "batch_index,compute_duration");
    write_manifest("running", "");
    write_replay_manifest();
}

void ArchiveWriter::on_roi(const Roi& roi) { write_roi(roi, root_ / "roi.txt"); }

void ArchiveWriter::on_frame(const GrayImage& frame, std::int64_t batch_index, double fps) {
    write_png(frame_file(root_, frame.frame_index), quantize_u8(frame.pixels));
    frames_csv_ << frame.frame_index << "," << batch_index << "," << format_double(frame.timestamp) << ","
                << format_double(fps) << "\n";
    replay_entries_.emplace_back(frame_name(frame.frame_index), frame.timestamp);
}

void ArchiveWriter::on_batch(const BatchRecord& record, const BatchAnalysis* analysis) {
    if (analysis) save_batch(batch_file(root_, record.batch_index), analysis->strain, analysis->displacement, strategy_);
    stats_csv_ << stats_csv_row(record, k_fractions_) << "\n";
    timing_csv_ << record.batch_index << "," << format_double(record.compute_duration) << "\n";
    frames_csv_.flush();
    stats_csv_.flush();
    timing_csv_.flush();
    write_replay_manifest();
}

void ArchiveWriter::on_run_end(const RunOutcome& outcome, const std::vector<BatchRecord>&) {
    frames_csv_.flush();
    stats_csv_.flush();
    timing_csv_.flush();
    write_replay_manifest();
    write_manifest(outcome.status, outcome.message);
}

void ArchiveWriter::write_manifest(const std::string& status, const std::string& message) {
    const nlohmann::json m = {
        {"format", "isod-run"},
        {"version", 1},
        {"run_id", run_id_},
        {"config", config_json_},
        {"strategy", strategy_},
        {"start_time", 0.0},
        {"status", status},
        {"message", message},
        {"source", source_},
        {"frame_width", frame_width_},
        {"frame_height", frame_height_},
    };
    write_file_atomic(root_ / "manifest.json", m.dump(2) + "\n");
}

void ArchiveWriter::write_replay_manifest() {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& [name, t] : replay_entries_) frames.push_back({{"path", name}, {"timestamp", t}});
    write_file_atomic(root_ / "frames" / "manifest.json", nlohmann::json{{"frames", frames}}.dump(1) + "\n");
}

RunArchive load_archive(const std::filesystem::path& root) {
    RunArchive a;
    a.root = root;
    const auto mpath = root / "manifest.json";
    if (!std::filesystem::is_regular_file(mpath)) throw LoadError("archive has no manifest.json: " + root.string());
    try {
        a.manifest = nlohmann::json::parse(read_text_file(mpath));
        a.status = a.manifest.at("status").get<std::string>();
        a.config = run_config_from_json(a.manifest.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(mpath.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(mpath.string() + ": config." + e.path() + ": " + e.message());
    }

    if (std::filesystem::is_regular_file(root / "roi.txt")) a.roi = read_roi(root / "roi.txt");

    const auto fpath = root / "frames" / "frames.csv";
    const auto flines = lines_of(read_text_file(fpath));
    if (flines.empty() || flines[0] != "frame_index,batch_index,timestamp,fps")
        throw LoadError(fpath.string() + ": unexpected header");
    for (std::size_t i = 1; i < flines.size(); ++i) {
        if (flines[i].empty()) continue;
        const auto cells = split_csv_line(flines[i]);
        try {
            if (cells.size() != 4) throw ParseError("expected 4 fields");
            a.frames.push_back({parse_int(cells[0]), parse_int(cells[1]), parse_double(cells[2]), parse_double(cells[3])});
        } catch (const ParseError& e) {
            throw LoadError(fpath.string() + ":" + std::to_string(i + 1) + ": " + e.what());
        }
    }

    try {
        a.records = parse_stats_csv(read_text_file(root / "stats.csv"));
    } catch (const ParseError& e) {
        throw LoadError(e.what());
    }

    const auto tpath = root / "timing.csv";
    if (std::filesystem::is_regular_file(tpath)) {
        const auto tlines = lines_of(read_text_file(tpath));
        std::map<std::int64_t, double> durations;
        for (std::size_t i = 1; i < tlines.size(); ++i) {
            if (tlines[i].empty()) continue;
            const auto cells = split_csv_line(tlines[i]);
            if (cells.size() != 2) throw LoadError(tpath.string() + ":" + std::to_string(i + 1) + ": expected 2 fields");
            durations[parse_int(cells[0])] = parse_double(cells[1]);
        }
        for (auto& r : a.records)
            if (auto it = durations.find(r.batch_index); it != durations.end()) r.compute_duration = it->second;
    }
    return a;
}

} // namespace isod
