#include "isod/protocol.hpp"

#include <bit>
#include <cstring>

#include "isod/base64.hpp"
#include "isod/config.hpp"

namespace isod {

using nlohmann::json;

namespace {

template <class F>
auto guarded(const char* what, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ProtocolError&) {
        throw;
    } catch (const std::exception& e) {
        throw ProtocolError(std::string(what) + ": " + e.what());
    }
}

std::pair<int, int> dims_of(const json& j, std::size_t elem, std::size_t decoded) {
    const auto& d = j.at("dims");
    const int w = d.at(0).get<int>();
    const int h = d.at(1).get<int>();
    if (d.size() != 2 || w < 0 || h < 0) throw ProtocolError("raster: bad dims");
    if (static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * elem != decoded)
        throw ProtocolError("raster: dims " + std::to_string(w) + "x" + std::to_string(h) +
                            " do not match decoded length " + std::to_string(decoded));
    return {w, h};
}

} // namespace

std::string message_text(const Message& m) {
    return json{{"type", m.type}, {"seq", m.seq}, {"payload", m.payload}}.dump();
}

Message parse_message(std::string_view text) {
    return guarded("message", [&] {
        const json j = json::parse(text);
        if (!j.is_object()) throw ProtocolError("message: not a JSON object");
        Message m;
        m.type = j.at("type").get<std::string>();
        m.seq = j.at("seq").get<std::int64_t>();
        m.payload = j.contains("payload") ? j.at("payload") : json::object();
        return m;
    });
}

std::vector<std::uint8_t> frame_text(std::string_view text) {
    if (text.size() > kMaxMessageBytes) throw ProtocolError("message exceeds size limit");
    const auto n = static_cast<std::uint32_t>(text.size());
    std::vector<std::uint8_t> out(4 + text.size());
    for (int i = 0; i < 4; ++i) out[i] = static_cast<std::uint8_t>(n >> (8 * i));
    std::memcpy(out.data() + 4, text.data(), text.size());
    return out;
}

std::vector<std::uint8_t> encode_frame(const Message& m) { return frame_text(message_text(m)); }

void FrameDecoder::feed(std::span<const std::uint8_t> bytes) {
    if (pos_ > 0 && pos_ == buf_.size()) {
        buf_.clear();
        pos_ = 0;
    }
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
}

std::optional<Message> FrameDecoder::next() {
    if (buffered() < 4) return std::nullopt;
    const std::uint8_t* p = buf_.data() + pos_;
    const std::uint32_t n = p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    if (n > kMaxMessageBytes) throw ProtocolError("frame length " + std::to_string(n) + " exceeds size limit");
    if (buffered() < 4u + n) return std::nullopt;
    Message m = parse_message(std::string_view(reinterpret_cast<const char*>(p + 4), n));
    pos_ += 4u + n;
    if (pos_ > (1u << 20) && pos_ * 2 > buf_.size()) {
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
        pos_ = 0;
    }
    return m;
}

json raster_payload(const Raster<float>& r) {
    std::vector<std::uint8_t> bytes(r.size() * 4);
    for (std::size_t i = 0; i < r.size(); ++i) {
        const auto v = std::bit_cast<std::uint32_t>(r.data()[i]);
        for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<std::uint8_t>(v >> (8 * b));
    }
    return {{"dims", {r.width(), r.height()}}, {"dtype", "f32le"}, {"data", base64_encode(bytes)}};
}

json raster_payload(const Raster<std::uint8_t>& r) {
    return {{"dims", {r.width(), r.height()}}, {"dtype", "u8"}, {"data", base64_encode(r.data())}};
}

Raster<float> f32_raster_from_payload(const json& j) {
    return guarded("raster", [&] {
        if (j.at("dtype").get<std::string>() != "f32le") throw ProtocolError("raster: expected dtype f32le");
        const auto bytes = base64_decode(j.at("data").get<std::string>());
        const auto [w, h] = dims_of(j, 4, bytes.size());
        std::vector<float> v(bytes.size() / 4);
        for (std::size_t i = 0; i < v.size(); ++i) {
            std::uint32_t u = 0;
            for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
            v[i] = std::bit_cast<float>(u);
        }
        return Raster<float>(w, h, std::move(v));
    });
}

Raster<std::uint8_t> u8_raster_from_payload(const json& j) {
    return guarded("raster", [&] {
        if (j.at("dtype").get<std::string>() != "u8") throw ProtocolError("raster: expected dtype u8");
        auto bytes = base64_decode(j.at("data").get<std::string>());
        const auto [w, h] = dims_of(j, 1, bytes.size());
        return Raster<std::uint8_t>(w, h, std::move(bytes));
    });
}

Snapshot make_snapshot(const BatchRecord& record, const StrainField& strain) {
    Snapshot s;
    s.batch_index = record.batch_index;
    s.t_end = record.t_end;
    s.roi = strain.roi;
    s.stats = record.stats;
    std::vector<float> e(strain.eyy.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<float>(strain.eyy.data()[i]);
    s.eyy = Raster<float>(strain.eyy.width(), strain.eyy.height(), std::move(e));
    s.valid = strain.valid;
    s.fps_used = record.fps_used;
    s.next_fps = record.next_fps;
    return s;
}

json to_payload(const Hello& h) {
    return {{"protocol_version", h.protocol_version}, {"run_id", h.run_id}, {"state", h.state}};
}

namespace {
json to_payload_without_data(const Snapshot& s) {
    return {{"batch_index", s.batch_index},
            {"t_end", s.t_end},
            {"roi", to_json(s.roi)},
            {"stats", to_json(s.stats)},
            {"eyy", {{"dims", {s.eyy.width(), s.eyy.height()}}, {"dtype", "f32le"}, {"data", ""}}},
            {"valid", {{"dims", {s.valid.width(), s.valid.height()}}, {"dtype", "u8"}, {"data", ""}}},
            {"fps_used", s.fps_used},
            {"next_fps", s.next_fps}};
}
} // namespace

json to_payload(const Snapshot& s) {
    return {{"batch_index", s.batch_index}, {"t_end", s.t_end},       {"roi", to_json(s.roi)},
            {"stats", to_json(s.stats)},    {"eyy", raster_payload(s.eyy)}, {"valid", raster_payload(s.valid)},
            {"fps_used", s.fps_used},       {"next_fps", s.next_fps}};
}

std::string snapshot_payload_text(const Snapshot& s) {
    // Same text as to_payload(s).dump(); the base64 fields are spliced in
    // because they never need escaping.
    json j = to_payload_without_data(s);
    std::string text = j.dump();
    const std::string hole = "\"data\":\"\"";
    std::vector<std::uint8_t> f32(s.eyy.size() * 4);
    for (std::size_t i = 0; i < s.eyy.size(); ++i) {
        const auto v = std::bit_cast<std::uint32_t>(s.eyy.data()[i]);
        for (int b = 0; b < 4; ++b) f32[4 * i + b] = static_cast<std::uint8_t>(v >> (8 * b));
    }
    // Keys are sorted, so "eyy" precedes "valid".
    const auto first = text.find(hole);
    const auto second = text.find(hole, first + hole.size());
    const std::string a = base64_encode(f32), b = base64_encode(s.valid.data());
    std::string out;
    out.reserve(text.size() + a.size() + b.size());
    out.append(text, 0, first + hole.size() - 1).append(a);
    out.append(text, first + hole.size() - 1, second + hole.size() - 1 - (first + hole.size() - 1)).append(b);
    out.append(text, second + hole.size() - 1, std::string::npos);
    return out;
}

json first_frame_payload(std::span<const std::uint8_t> png) { return {{"png", base64_encode(png)}}; }

json rate_trace_payload(const RateTrace& trace) {
    json rows = json::array();
    for (const auto& [b, fps] : trace) rows.push_back({b, fps});
    return {{"trace", rows}};
}

json run_ended_payload(const std::string& status, const std::string& message) {
    return {{"status", status}, {"message", message}};
}

json set_roi_payload(const Roi& roi) { return {{"rect", to_json(roi)}}; }
json set_policy_payload(const RatePolicy& policy) { return {{"policy", to_json(policy)}}; }

json ack_payload(const std::string& ref_type, std::int64_t ref_seq) {
    return {{"ref_type", ref_type}, {"ref_seq", ref_seq}};
}

json error_payload(const std::string& ref_type, std::int64_t ref_seq, const std::string& message) {
    return {{"ref_type", ref_type}, {"ref_seq", ref_seq}, {"message", message}};
}

Hello hello_from_payload(const json& j) {
    return guarded("HELLO", [&] {
        return Hello{j.at("protocol_version").get<int>(), j.at("run_id").get<std::string>(),
                     j.at("state").get<std::string>()};
    });
}

Snapshot snapshot_from_payload(const json& j) {
    return guarded("BATCH_SNAPSHOT", [&] {
        Snapshot s;
        s.batch_index = j.at("batch_index").get<std::int64_t>();
        s.t_end = j.at("t_end").get<double>();
        s.roi = roi_from_json(j.at("roi"));
        s.stats = stats_from_json(j.at("stats"));
        s.eyy = f32_raster_from_payload(j.at("eyy"));
        s.valid = u8_raster_from_payload(j.at("valid"));
        s.fps_used = j.at("fps_used").get<double>();
        s.next_fps = j.at("next_fps").get<double>();
        if (s.eyy.width() != s.valid.width() || s.eyy.height() != s.valid.height())
            throw ProtocolError("BATCH_SNAPSHOT: eyy and valid dims differ");
        return s;
    });
}

std::vector<std::uint8_t> first_frame_png(const json& j) {
    return guarded("FIRST_FRAME", [&] { return base64_decode(j.at("png").get<std::string>()); });
}

RateTrace rate_trace_from_payload(const json& j) {
    return guarded("RATE_TRACE", [&] {
        RateTrace t;
        for (const auto& row : j.at("trace")) t.emplace_back(row.at(0).get<std::int64_t>(), row.at(1).get<double>());
        return t;
    });
}

Roi roi_from_payload(const json& j) {
    return guarded("SET_ROI", [&] { return roi_from_json(j.at("rect"), "rect"); });
}

RatePolicy policy_from_payload(const json& j) {
    return guarded("SET_POLICY", [&] { return policy_from_json(j.at("policy"), "policy"); });
}

} // namespace isod
