#pragma once

#include <memory>
#include <optional>
#include <string>

#include "isod/protocol.hpp"

namespace isod {

// Blocking client for the framed TCP protocol.
class StreamClient {
public:
    StreamClient();
    ~StreamClient();
    StreamClient(const StreamClient&) = delete;
    StreamClient& operator=(const StreamClient&) = delete;

    // Throws std::runtime_error when the connection cannot be made.
    void connect(const std::string& host, int port, std::optional<int> receive_buffer_bytes = std::nullopt);
    void close();
    bool connected() const;

    // Assigns the next outgoing seq and returns it.
    std::int64_t send(const std::string& type, const nlohmann::json& payload = nlohmann::json::object());
    // Sends bytes as-is; for exercising the server with malformed input.
    void send_raw(std::span<const std::uint8_t> bytes);

    // Next message, or nullopt on timeout or when the server closed the
    // connection (see `connected()`).
    std::optional<Message> receive(double timeout_seconds);
    // Receives until a message of `type` arrives, discarding others.
    std::optional<Message> receive_type(const std::string& type, double timeout_seconds);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// "host:port" with the port required; throws ParseError.
std::pair<std::string, int> parse_address(std::string_view text);

} // namespace isod
