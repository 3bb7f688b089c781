#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "isod/controller.hpp"
#include "isod/errors.hpp"
#include "isod/strain.hpp"

namespace isod {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxMessageBytes = 64u << 20;

// Malformed frame, JSON or payload on the wire.
class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace msg {
inline constexpr const char* kHello = "HELLO";
inline constexpr const char* kFirstFrame = "FIRST_FRAME";
inline constexpr const char* kBatchSnapshot = "BATCH_SNAPSHOT";
inline constexpr const char* kRateTrace = "RATE_TRACE";
inline constexpr const char* kRunEnded = "RUN_ENDED";
inline constexpr const char* kAck = "ACK";
inline constexpr const char* kError = "ERROR";
inline constexpr const char* kSetRoi = "SET_ROI";
inline constexpr const char* kSetPolicy = "SET_POLICY";
inline constexpr const char* kStop = "STOP";
inline constexpr const char* kSubscribe = "SUBSCRIBE";
} // namespace msg

struct Message {
    std::string type;
    std::int64_t seq = 0;
    nlohmann::json payload = nlohmann::json::object();
    friend bool operator==(const Message&, const Message&) = default;
};

// JSON text of the envelope: {"payload":..., "seq":..., "type":...}.
std::string message_text(const Message& m);
Message parse_message(std::string_view text);  // throws ProtocolError

// 4-byte little-endian length, then the JSON text.
std::vector<std::uint8_t> encode_frame(const Message& m);
std::vector<std::uint8_t> frame_text(std::string_view json_text);

// Incremental reader for a byte stream of frames.
class FrameDecoder {
public:
    void feed(std::span<const std::uint8_t> bytes);
    // Next complete message, or nullopt when more bytes are needed.
    std::optional<Message> next();
    std::size_t buffered() const noexcept { return buf_.size() - pos_; }

private:
    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

// Raster payload: {"dims": [w, h], "dtype": "f32le" | "u8", "data": base64}.
nlohmann::json raster_payload(const Raster<float>& r);
nlohmann::json raster_payload(const Raster<std::uint8_t>& r);
Raster<float> f32_raster_from_payload(const nlohmann::json& j);
Raster<std::uint8_t> u8_raster_from_payload(const nlohmann::json& j);

struct Hello {
    int protocol_version = kProtocolVersion;
    std::string run_id;
    std::string state;  // idle | awaiting_roi | running | ended
    friend bool operator==(const Hello&, const Hello&) = default;
};

struct Snapshot {
    std::int64_t batch_index = 0;
    double t_end = 0.0;
    Roi roi;
    StrainStats stats;
    Raster<float> eyy;
    Raster<std::uint8_t> valid;
    double fps_used = 0.0;
    double next_fps = 0.0;
    friend bool operator==(const Snapshot&, const Snapshot&) = default;
};

Snapshot make_snapshot(const BatchRecord& record, const StrainField& strain);

using RateTrace = std::vector<std::pair<std::int64_t, double>>;

nlohmann::json to_payload(const Hello& h);
nlohmann::json to_payload(const Snapshot& s);
// Equal to to_payload(s).dump(), built without escaping the raster data.
std::string snapshot_payload_text(const Snapshot& s);
nlohmann::json first_frame_payload(std::span<const std::uint8_t> png);
nlohmann::json rate_trace_payload(const RateTrace& trace);
nlohmann::json run_ended_payload(const std::string& status, const std::string& message = {});
nlohmann::json set_roi_payload(const Roi& roi);
nlohmann::json set_policy_payload(const RatePolicy& policy);
nlohmann::json ack_payload(const std::string& ref_type, std::int64_t ref_seq);
nlohmann::json error_payload(const std::string& ref_type, std::int64_t ref_seq, const std::string& message);

Hello hello_from_payload(const nlohmann::json& j);
Snapshot snapshot_from_payload(const nlohmann::json& j);
std::vector<std::uint8_t> first_frame_png(const nlohmann::json& j);
RateTrace rate_trace_from_payload(const nlohmann::json& j);
Roi roi_from_payload(const nlohmann::json& j);
RatePolicy policy_from_payload(const nlohmann::json& j);

} // namespace isod
