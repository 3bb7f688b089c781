#include "isod/stream_client.hpp"

#include <poll.h>

#include <boost/asio.hpp>

#include <chrono>

#include "isod/text.hpp"

namespace isod {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;

struct StreamClient::Impl {
    asio::io_context io;
    tcp::socket socket{io};
    FrameDecoder decoder;
    std::int64_t seq = 0;
    bool open = false;
};

StreamClient::StreamClient() : impl_(std::make_unique<Impl>()) {}
StreamClient::~StreamClient() { close(); }

void StreamClient::connect(const std::string& host, int port, std::optional<int> receive_buffer_bytes) {
    close();
    tcp::resolver resolver(impl_->io);
    boost::system::error_code ec;
    const auto eps = resolver.resolve(host, std::to_string(port), ec);
    if (!ec) {
        ec = asio::error::host_not_found;
        for (const auto& e : eps) {
            impl_->socket.close(ec);
            impl_->socket.open(e.endpoint().protocol(), ec);
            if (ec) continue;
            // Before connect, so the advertised window follows it.
            if (receive_buffer_bytes)
                impl_->socket.set_option(asio::socket_base::receive_buffer_size(*receive_buffer_bytes), ec);
            impl_->socket.connect(e.endpoint(), ec);
            if (!ec) break;
        }
    }
    if (ec) throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port) + ": " + ec.message());
    impl_->socket.set_option(tcp::no_delay(true), ec);
    impl_->decoder = FrameDecoder();
    impl_->seq = 0;
    impl_->open = true;
}

void StreamClient::close() {
    if (!impl_->open) return;
    boost::system::error_code ec;
    impl_->socket.shutdown(tcp::socket::shutdown_both, ec);
    impl_->socket.close(ec);
    impl_->open = false;
}

bool StreamClient::connected() const { return impl_->open; }

std::int64_t StreamClient::send(const std::string& type, const nlohmann::json& payload) {
    const Message m{type, ++impl_->seq, payload};
    send_raw(encode_frame(m));
    return m.seq;
}

void StreamClient::send_raw(std::span<const std::uint8_t> bytes) {
    if (!impl_->open) throw std::runtime_error("not connected");
    asio::write(impl_->socket, asio::buffer(bytes.data(), bytes.size()));
}

std::optional<Message> StreamClient::receive(double timeout_seconds) {
    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + std::chrono::duration_cast<clock::duration>(
                                             std::chrono::duration<double>(timeout_seconds));
    std::array<std::uint8_t, 65536> buf;
    for (;;) {
        if (auto m = impl_->decoder.next()) return m;
        if (!impl_->open) return std::nullopt;
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now()).count();
        if (left <= 0) return std::nullopt;
        pollfd pfd{impl_->socket.native_handle(), POLLIN, 0};
        const int rc = ::poll(&pfd, 1, static_cast<int>(left));
        if (rc <= 0) continue;
        boost::system::error_code ec;
        const std::size_t n = impl_->socket.read_some(asio::buffer(buf), ec);
        if (ec) {
            close();
            continue;
        }
        impl_->decoder.feed(std::span<const std::uint8_t>(buf.data(), n));
    }
}

std::optional<Message> StreamClient::receive_type(const std::string& type, double timeout_seconds) {
    using clock = std::chrono::steady_clock;
    const auto end = clock::now() + std::chrono::duration_cast<clock::duration>(
                                        std::chrono::duration<double>(timeout_seconds));
    for (;;) {
        const double left = std::chrono::duration<double>(end - clock::now()).count();
        if (left <= 0) return std::nullopt;
        auto m = receive(left);
        if (!m) return std::nullopt;
        if (m->type == type) return m;
    }
}

std::pair<std::string, int> parse_address(std::string_view text) {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos || colon == 0) throw ParseError("address must be host:port");
    const auto port = parse_int(text.substr(colon + 1));
    if (port <= 0 || port > 65535) throw ParseError("port out of range in address");
    return {std::string(text.substr(0, colon)), static_cast<int>(port)};
}

} // namespace isod
