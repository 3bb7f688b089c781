#include "isod/stream_server.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <array>
#include <deque>
#include <set>
#include <thread>

#include "isod/config.hpp"
#include "isod/png_io.hpp"
#include "isod/protocol.hpp"

namespace isod {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using nlohmann::json;

// ---------------------------------------------------------------- control

void ControlChannel::set_frame_dims(int width, int height) {
    std::lock_guard lk(mu_);
    width_ = width;
    height_ = height;
}

void ControlChannel::set_roi_locked() {
    std::lock_guard lk(mu_);
    locked_ = true;
}

std::optional<Roi> ControlChannel::wait_for_roi() {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return roi_.has_value() || stop_.load(); });
    return roi_;
}

std::optional<RatePolicy> ControlChannel::take_policy() {
    std::lock_guard lk(mu_);
    return std::exchange(pending_policy_, std::nullopt);
}

std::optional<std::string> ControlChannel::submit_roi(const Roi& roi) {
    {
        std::lock_guard lk(mu_);
        if (locked_) return "ROI is locked: analysis has started";
        if (width_ <= 0 || height_ <= 0) return "frame dimensions are not known yet";
        if (!roi.fits(width_, height_, margin_))
            return "ROI must lie at least " + std::to_string(margin_) + " px inside the " + std::to_string(width_) +
                   "x" + std::to_string(height_) + " frame";
        roi_ = roi;
    }
    cv_.notify_all();
    return std::nullopt;
}

std::optional<std::string> ControlChannel::submit_policy(const RatePolicy& policy) {
    try {
        policy.validate();
    } catch (const ConfigError& e) {
        return std::string(e.what());
    }
    std::lock_guard lk(mu_);
    pending_policy_ = policy;
    return std::nullopt;
}

void ControlChannel::request_stop() {
    {
        std::lock_guard lk(mu_);
        stop_ = true;
    }
    cv_.notify_all();
}

std::optional<Roi> ControlChannel::roi() const {
    std::lock_guard lk(mu_);
    return roi_;
}

bool ControlChannel::roi_locked() const {
    std::lock_guard lk(mu_);
    return locked_;
}

// ---------------------------------------------------------------- sessions

namespace {

class Session;

struct Outgoing {
    std::array<std::uint8_t, 4> header{};
    std::string text;
    bool snapshot = false;
};

// Envelope text with the payload already serialized; keys in sorted order.
std::string envelope(const std::string& type, std::int64_t seq, const std::string& payload_text) {
    std::string s;
    s.reserve(payload_text.size() + type.size() + 40);
    s += "{\"payload\":";
    s += payload_text;
    s += ",\"seq\":";
    s += std::to_string(seq);
    s += ",\"type\":\"";
    s += type;
    s += "\"}";
    return s;
}

} // namespace

struct StreamServer::Impl : std::enable_shared_from_this<StreamServer::Impl> {
    StreamOptions options;
    ControlChannel* control;
    asio::io_context io;
    std::optional<asio::executor_work_guard<asio::io_context::executor_type>> work;
    tcp::acceptor acceptor{io};
    tcp::acceptor ws_acceptor{io};
    std::thread thread;
    std::set<std::shared_ptr<Session>> sessions;
    bool shutting_down = false;
    std::optional<asio::steady_timer> grace_timer;

    std::atomic<int> bound_port{0};
    std::atomic<int> bound_ws_port{0};
    std::atomic<std::size_t> clients{0};
    std::atomic<std::size_t> subscribers{0};
    std::atomic<std::size_t> overflows{0};

    // Run state, touched only on the io thread.
    std::string run_id;
    std::string state = "idle";
    std::optional<std::string> first_frame_payload_text;
    RateTrace trace;

    Impl(StreamOptions o, ControlChannel* c) : options(std::move(o)), control(c) {}

    void accept(tcp::acceptor& a, bool ws);
    void broadcast(const std::string& type, const std::string& payload_text, bool snapshot);
    void handle(const std::shared_ptr<Session>& s, const Message& m);
    void remove(const std::shared_ptr<Session>& s);
    void begin_shutdown(double grace);
    void maybe_finish();
};

namespace {

class Session : public std::enable_shared_from_this<Session> {
public:
    explicit Session(StreamServer::Impl& hub) : hub_(hub) {}
    virtual ~Session() = default;

    virtual void start() = 0;

    void send(const std::string& type, const std::string& payload_text, bool snapshot = false) {
        if (closed_ || finishing_) return;
        if (snapshot && queued_snapshots_ >= hub_.options.queue_depth) {
            ++hub_.overflows;
            abort();
            return;
        }
        Outgoing o;
        o.text = envelope(type, ++out_seq_, payload_text);
        const auto n = static_cast<std::uint32_t>(o.text.size());
        for (int i = 0; i < 4; ++i) o.header[i] = static_cast<std::uint8_t>(n >> (8 * i));
        o.snapshot = snapshot;
        if (snapshot) ++queued_snapshots_;
        queue_.push_back(std::move(o));
        if (!writing_ && ready_) pump();
    }

    void send(const std::string& type, const json& payload) { send(type, payload.dump()); }

    // Close once everything queued has been written.
    void finish() {
        if (closed_) return;
        finishing_ = true;
        if (!writing_) do_finish();
    }

    // Close immediately, dropping anything queued.
    void abort() {
        if (closed_) return;
        closed_ = true;
        queue_.clear();
        close_transport();
        hub_.remove(shared_from_this());
    }

    bool subscribed = false;
    bool closed() const noexcept { return closed_; }

protected:
    virtual void write_front() = 0;
    virtual void close_transport() = 0;
    virtual void graceful_close() { abort(); }

    void became_ready() {
        ready_ = true;
        if (!queue_.empty() && !writing_) pump();
        else if (finishing_ && !writing_) do_finish();
    }

    void pump() {
        if (closed_ || queue_.empty()) return;
        writing_ = true;
        write_front();
    }

    void on_written(beast::error_code ec) {
        writing_ = false;
        if (closed_) return;
        if (ec) {
            abort();
            return;
        }
        if (queue_.front().snapshot) --queued_snapshots_;
        queue_.pop_front();
        if (!queue_.empty()) pump();
        else if (finishing_) do_finish();
    }

    void on_message(std::string_view text) {
        Message m;
        try {
            m = parse_message(text);
        } catch (const ProtocolError& e) {
            send(msg::kError, error_payload("", -1, e.what()));
            return;
        }
        if (m.seq <= last_in_seq_) {
            send(msg::kError, error_payload(m.type, m.seq, "seq must increase"));
            return;
        }
        last_in_seq_ = m.seq;
        hub_.handle(shared_from_this(), m);
    }

    StreamServer::Impl& hub_;
    std::deque<Outgoing> queue_;

private:
    void do_finish() {
        if (closed_) return;
        if (!ready_) {
            abort();
            return;
        }
        graceful_close();
    }

    bool ready_ = false;
    bool writing_ = false;
    bool finishing_ = false;
    bool closed_ = false;
    std::int64_t out_seq_ = 0;
    std::int64_t last_in_seq_ = 0;
    std::size_t queued_snapshots_ = 0;
};

class TcpSession final : public Session {
public:
    TcpSession(StreamServer::Impl& hub, tcp::socket socket) : Session(hub), socket_(std::move(socket)) {}

    void start() override {
        became_ready();
        read_header();
    }

private:
    void read_header() {
        asio::async_read(socket_, asio::buffer(header_),
                         [self = shared_from_this(), this](beast::error_code ec, std::size_t) {
                             if (ec || closed()) return abort();
                             const std::uint32_t n = header_[0] | (header_[1] << 8) | (header_[2] << 16) |
                                                     (static_cast<std::uint32_t>(header_[3]) << 24);
                             if (n > kMaxMessageBytes) return abort();
                             body_.resize(n);
                             read_body();
                         });
    }

    void read_body() {
        asio::async_read(socket_, asio::buffer(body_),
                         [self = shared_from_this(), this](beast::error_code ec, std::size_t) {
                             if (ec || closed()) return abort();
                             on_message(body_);
                             if (!closed()) read_header();
                         });
    }

    void write_front() override {
        const auto& o = queue_.front();
        std::array<asio::const_buffer, 2> bufs{asio::buffer(o.header), asio::buffer(o.text)};
        asio::async_write(socket_, bufs, [self = shared_from_this(), this](beast::error_code ec, std::size_t) {
            on_written(ec);
        });
    }

    void close_transport() override {
        beast::error_code ec;
        socket_.shutdown(tcp::socket::shutdown_both, ec);
        socket_.close(ec);
    }

    void graceful_close() override { abort(); }

    tcp::socket socket_;
    std::array<std::uint8_t, 4> header_{};
    std::string body_;
};

class WsSession final : public Session {
public:
    WsSession(StreamServer::Impl& hub, tcp::socket socket) : Session(hub), ws_(std::move(socket)) {}

    void start() override {
        http::async_read(ws_.next_layer(), buf_, req_,
                         [self = shared_from_this(), this](beast::error_code ec, std::size_t) {
                             if (ec || closed()) return abort();
                             if (req_.target() != "/ws" || !websocket::is_upgrade(req_)) return reject();
                             ws_.text(true);
                             ws_.async_accept(req_, [self = shared_from_this(), this](beast::error_code ec2) {
                                 if (ec2 || closed()) return abort();
                                 buf_.consume(buf_.size());
                                 became_ready();
                                 read();
                             });
                         });
    }

private:
    void reject() {
        auto res = std::make_shared<http::response<http::string_body>>(http::status::not_found, req_.version());
        res->set(http::field::content_type, "text/plain");
        res->body() = "websocket endpoint is /ws\n";
        res->prepare_payload();
        http::async_write(ws_.next_layer(), *res,
                          [self = shared_from_this(), this, res](beast::error_code, std::size_t) { abort(); });
    }

    void read() {
        ws_.async_read(buf_, [self = shared_from_this(), this](beast::error_code ec, std::size_t) {
            if (ec || closed()) return abort();
            const std::string text = beast::buffers_to_string(buf_.data());
            buf_.consume(buf_.size());
            on_message(text);
            if (!closed()) read();
        });
    }

    void write_front() override {
        ws_.async_write(asio::buffer(queue_.front().text),
                        [self = shared_from_this(), this](beast::error_code ec, std::size_t) { on_written(ec); });
    }

    void close_transport() override {
        beast::error_code ec;
        ws_.next_layer().shutdown(tcp::socket::shutdown_both, ec);
        ws_.next_layer().close(ec);
    }

    void graceful_close() override {
        ws_.async_close(websocket::close_code::normal,
                        [self = shared_from_this(), this](beast::error_code) { abort(); });
    }

    websocket::stream<tcp::socket> ws_;
    beast::flat_buffer buf_;
    http::request<http::string_body> req_;
};

} // namespace

void StreamServer::Impl::accept(tcp::acceptor& a, bool ws) {
    a.async_accept([self = shared_from_this(), &a, ws](beast::error_code ec, tcp::socket socket) {
        if (ec || self->shutting_down) return;
        beast::error_code opt_ec;
        socket.set_option(tcp::no_delay(true), opt_ec);
        if (self->options.send_buffer_bytes)
            socket.set_option(asio::socket_base::send_buffer_size(*self->options.send_buffer_bytes), opt_ec);
        std::shared_ptr<Session> s;
        if (ws) s = std::make_shared<WsSession>(*self, std::move(socket));
        else s = std::make_shared<TcpSession>(*self, std::move(socket));
        self->sessions.insert(s);
        ++self->clients;
        s->send(msg::kHello, to_payload(Hello{kProtocolVersion, self->run_id, self->state}));
        s->start();
        self->accept(a, ws);
    });
}

void StreamServer::Impl::broadcast(const std::string& type, const std::string& payload_text, bool snapshot) {
    // Copy: send() may remove sessions on overflow.
    const auto targets = sessions;
    for (const auto& s : targets)
        if (s->subscribed) s->send(type, payload_text, snapshot);
}

void StreamServer::Impl::remove(const std::shared_ptr<Session>& s) {
    if (sessions.erase(s) == 0) return;
    --clients;
    if (s->subscribed) --subscribers;
    maybe_finish();
}

void StreamServer::Impl::handle(const std::shared_ptr<Session>& s, const Message& m) {
    auto reply = [&](const std::optional<std::string>& err) {
        if (err) s->send(msg::kError, error_payload(m.type, m.seq, *err));
        else s->send(msg::kAck, ack_payload(m.type, m.seq));
    };
    if (m.type == msg::kSubscribe) {
        if (!s->subscribed) {
            s->subscribed = true;
            ++subscribers;
        }
        reply(std::nullopt);
        if (first_frame_payload_text) s->send(msg::kFirstFrame, *first_frame_payload_text);
        if (!trace.empty()) s->send(msg::kRateTrace, rate_trace_payload(trace));
        return;
    }
    if (m.type == msg::kSetRoi || m.type == msg::kSetPolicy || m.type == msg::kStop) {
        if (!control) return reply("this server does not accept control commands");
        try {
            if (m.type == msg::kSetRoi) return reply(control->submit_roi(roi_from_payload(m.payload)));
            if (m.type == msg::kSetPolicy) return reply(control->submit_policy(policy_from_payload(m.payload)));
        } catch (const ProtocolError& e) {
            return reply(std::string(e.what()));
        }
        control->request_stop();
        return reply(std::nullopt);
    }
    reply("unknown message type '" + m.type + "'");
}

void StreamServer::Impl::begin_shutdown(double grace) {
    shutting_down = true;
    beast::error_code ec;
    acceptor.close(ec);
    ws_acceptor.close(ec);
    const auto targets = sessions;
    for (const auto& s : targets) s->finish();
    grace_timer.emplace(io, std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                std::chrono::duration<double>(grace)));
    grace_timer->async_wait([self = shared_from_this()](beast::error_code ec2) {
        if (ec2) return;
        const auto rest = self->sessions;
        for (const auto& s : rest) s->abort();
        self->work.reset();
    });
    maybe_finish();
}

void StreamServer::Impl::maybe_finish() {
    if (!shutting_down || !sessions.empty()) return;
    if (grace_timer) grace_timer->cancel();
    work.reset();
}

// ---------------------------------------------------------------- server

StreamServer::StreamServer(StreamOptions options, ControlChannel* control)
    : impl_(std::make_shared<Impl>(std::move(options), control)) {}

StreamServer::~StreamServer() { stop(0.0); }

void StreamServer::start() {
    auto& im = *impl_;
    if (im.thread.joinable()) return;
    const auto addr = asio::ip::make_address(im.options.address);
    auto open = [&](tcp::acceptor& a, int port) {
        const tcp::endpoint ep(addr, static_cast<unsigned short>(port));
        a.open(ep.protocol());
        a.set_option(asio::socket_base::reuse_address(true));
        a.bind(ep);
        a.listen();
        return static_cast<int>(a.local_endpoint().port());
    };
    im.bound_port = open(im.acceptor, im.options.port);
    if (im.options.ws_port) im.bound_ws_port = open(im.ws_acceptor, *im.options.ws_port);
    im.work.emplace(im.io.get_executor());
    im.accept(im.acceptor, false);
    if (im.options.ws_port) im.accept(im.ws_acceptor, true);
    im.thread = std::thread([impl = impl_] { impl->io.run(); });
}

void StreamServer::stop(double grace_seconds) {
    auto& im = *impl_;
    if (!im.thread.joinable()) return;
    asio::post(im.io, [impl = impl_, grace_seconds] { impl->begin_shutdown(grace_seconds); });
    im.thread.join();
    im.sessions.clear();
}

int StreamServer::port() const { return impl_->bound_port; }
int StreamServer::ws_port() const { return impl_->bound_ws_port; }
std::size_t StreamServer::client_count() const { return impl_->clients; }
std::size_t StreamServer::subscriber_count() const { return impl_->subscribers; }
std::size_t StreamServer::overflow_disconnects() const { return impl_->overflows; }

void StreamServer::on_run_start(const RunStartInfo& info) {
    asio::post(impl_->io, [impl = impl_, id = info.run_id, roi = info.config && info.config->roi] {
        impl->run_id = id;
        impl->state = roi ? "running" : "awaiting_roi";
        impl->trace.clear();
        impl->first_frame_payload_text.reset();
    });
}

void StreamServer::on_first_frame(const GrayImage& frame) {
    asio::post(impl_->io, [impl = impl_, px = quantize_u8(frame.pixels)] {
        impl->first_frame_payload_text = first_frame_payload(encode_png(px)).dump();
        impl->broadcast(msg::kFirstFrame, *impl->first_frame_payload_text, false);
    });
}

void StreamServer::on_roi(const Roi&) {
    asio::post(impl_->io, [impl = impl_] { impl->state = "running"; });
}

void StreamServer::on_batch(const BatchRecord& record, const BatchAnalysis* analysis) {
    std::optional<Snapshot> snap;
    if (analysis && record.analyzed) snap = make_snapshot(record, analysis->strain);
    asio::post(impl_->io, [impl = impl_, b = record.batch_index, fps = record.fps_used, snap = std::move(snap)] {
        impl->trace.emplace_back(b, fps);
        if (snap && impl->subscribers > 0) impl->broadcast(msg::kBatchSnapshot, snapshot_payload_text(*snap), true);
    });
}

void StreamServer::on_run_end(const RunOutcome& outcome, const std::vector<BatchRecord>&) {
    asio::post(impl_->io, [impl = impl_, outcome] {
        impl->state = "ended";
        impl->broadcast(msg::kRateTrace, rate_trace_payload(impl->trace).dump(), false);
        impl->broadcast(msg::kRunEnded, run_ended_payload(outcome.status, outcome.message).dump(), false);
    });
}

} // namespace isod
