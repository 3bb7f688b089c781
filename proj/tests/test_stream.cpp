#include "doctest.h"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <random>
#include <thread>

#include "isod/base64.hpp"
#include "isod/config.hpp"
#include "isod/frame_source.hpp"
#include "isod/png_io.hpp"
#include "isod/protocol.hpp"
#include "isod/scenarios.hpp"
#include "isod/stream_client.hpp"
#include "isod/stream_server.hpp"
#include "support.hpp"

using namespace isod;
using nlohmann::json;

namespace {

StreamOptions local_options(bool ws = false) {
    StreamOptions o;
    o.port = 0;
    o.ws_port = ws ? std::optional<int>(0) : std::nullopt;
    return o;
}

BatchAnalysis synthetic_analysis(int side, std::int64_t batch) {
    const Roi roi{4, 4, side, side};
    BatchAnalysis a;
    a.displacement = DisplacementField(roi);
    a.strain.roi = roi;
    a.strain.exx = Raster<double>(side, side, 0.0);
    a.strain.exy = Raster<double>(side, side, 0.0);
    a.strain.eyy = Raster<double>(side, side, 0.001 * static_cast<double>(batch));
    a.strain.valid = Raster<std::uint8_t>(side, side, 1);
    a.strain.batch_index = batch;
    a.stats.max_eyy = 0.001 * static_cast<double>(batch);
    a.stats.valid_pixel_count = static_cast<std::size_t>(side * side);
    return a;
}

BatchRecord record_for(std::int64_t batch) {
    BatchRecord r;
    r.batch_index = batch;
    r.fps_used = 1.0;
    r.next_fps = 4.0;
    r.frame_count = 2;
    r.t_start = 3.0 * batch;
    r.t_end = 3.0 * batch + 1.0;
    r.analyzed = true;
    r.stats.max_eyy = 0.001 * static_cast<double>(batch);
    return r;
}

void subscribe(StreamClient& c) {
    const auto seq = c.send(msg::kSubscribe);
    const auto ack = c.receive_type(msg::kAck, 5.0);
    REQUIRE(ack);
    CHECK(ack->payload.at("ref_seq") == seq);
}

template <class Pred>
bool eventually(Pred&& p, double seconds = 5.0) {
    const auto end = std::chrono::steady_clock::now() + std::chrono::milliseconds(static_cast<int>(seconds * 1000));
    while (std::chrono::steady_clock::now() < end) {
        if (p()) return true;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    return p();
}

} // namespace

TEST_CASE("base64") {
    const std::string vectors[][2] = {{"", ""},        {"f", "Zg=="},         {"fo", "Zm8="},        {"foo", "Zm9v"},
                                      {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="}, {"foobar", "Zm9vYmFy"}};
    for (const auto& [plain, enc] : vectors) {
        const std::vector<std::uint8_t> bytes(plain.begin(), plain.end());
        CHECK(base64_encode(bytes) == enc);
        CHECK(base64_decode(enc) == bytes);
    }
    std::mt19937 rng(3);
    for (int n = 0; n < 200; ++n) {
        std::vector<std::uint8_t> b(static_cast<std::size_t>(n));
        for (auto& x : b) x = static_cast<std::uint8_t>(rng());
        CHECK(base64_decode(base64_encode(b)) == b);
    }
    CHECK_THROWS_AS(base64_decode("Zm9"), ParseError);
    CHECK_THROWS_AS(base64_decode("Zm9*"), ParseError);
    CHECK_THROWS_AS(base64_decode("Z=9v"), ParseError);
}

TEST_CASE("every message type survives framing") {
    const auto a = synthetic_analysis(6, 3);
    const Snapshot snap = make_snapshot(record_for(3), a.strain);
    const std::vector<std::uint8_t> png = encode_png(Raster<std::uint8_t>(9, 9, 200));
    const std::vector<Message> all{
        {msg::kHello, 1, to_payload(Hello{1, "run-0123", "awaiting_roi"})},
        {msg::kFirstFrame, 2, first_frame_payload(png)},
        {msg::kBatchSnapshot, 3, to_payload(snap)},
        {msg::kRateTrace, 4, rate_trace_payload({{0, 1.0}, {1, 4.0}, {2, 16.0}})},
        {msg::kRunEnded, 5, run_ended_payload("completed")},
        {msg::kAck, 6, ack_payload("SET_ROI", 2)},
        {msg::kError, 7, error_payload("SET_ROI", 3, "outside the margin")},
        {msg::kSetRoi, 1, set_roi_payload(Roi{5, 6, 7, 8})},
        {msg::kSetPolicy, 2, set_policy_payload(RatePolicy::defaults(Metric::DelMaxStrain))},
        {msg::kStop, 3, json::object()},
        {msg::kSubscribe, 4, json::object()},
    };
    std::vector<std::uint8_t> stream;
    for (const auto& m : all) {
        const auto f = encode_frame(m);
        CHECK(parse_message(message_text(m)) == m);
        stream.insert(stream.end(), f.begin(), f.end());
    }
    FrameDecoder dec;
    std::vector<Message> out;
    for (std::uint8_t b : stream) {  // one byte at a time
        dec.feed(std::span<const std::uint8_t>(&b, 1));
        while (auto m = dec.next()) out.push_back(*m);
    }
    CHECK(out == all);
    CHECK(dec.buffered() == 0);

    CHECK(hello_from_payload(all[0].payload) == Hello{1, "run-0123", "awaiting_roi"});
    CHECK(first_frame_png(all[1].payload) == png);
    CHECK(snapshot_from_payload(all[2].payload) == snap);
    CHECK(rate_trace_from_payload(all[3].payload) == RateTrace{{0, 1.0}, {1, 4.0}, {2, 16.0}});
    CHECK(roi_from_payload(all[7].payload) == Roi{5, 6, 7, 8});
    CHECK(policy_from_payload(all[8].payload) == RatePolicy::defaults(Metric::DelMaxStrain));
}

TEST_CASE("fast snapshot text equals the generic dump") {
    for (int side : {1, 2, 3, 7, 40}) {
        auto a = synthetic_analysis(side, side);
        for (std::size_t i = 0; i < a.strain.eyy.size(); ++i) a.strain.eyy.values()[i] = 1e-3 * static_cast<double>(i % 13) - 4e-3;
        a.strain.valid.values()[0] = 0;
        auto rec = record_for(side);
        rec.stats.topk_mean_eyy = {{0.05, 0.01}, {0.1, 0.005}};
        const Snapshot s = make_snapshot(rec, a.strain);
        CHECK(snapshot_payload_text(s) == to_payload(s).dump());
        CHECK(snapshot_from_payload(json::parse(snapshot_payload_text(s))) == s);
    }
}

TEST_CASE("envelope keys and sizes") {
    const Message m{msg::kStop, 9, json::object()};
    CHECK(message_text(m) == R"({"payload":{},"seq":9,"type":"STOP"})");
    const auto f = encode_frame(m);
    CHECK(f.size() == 4 + message_text(m).size());
    CHECK(f[0] == message_text(m).size());
    CHECK(f[1] == 0);
}

TEST_CASE("raster payloads check their dims") {
    Raster<float> r(3, 2, 1.5f);
    auto p = raster_payload(r);
    CHECK(f32_raster_from_payload(p) == r);
    p["dims"] = {2, 2};
    CHECK_THROWS_AS(f32_raster_from_payload(p), ProtocolError);
    auto q = raster_payload(Raster<std::uint8_t>(4, 4, 1));
    q["dims"] = {4, 5};
    CHECK_THROWS_AS(u8_raster_from_payload(q), ProtocolError);
    CHECK_THROWS_AS(f32_raster_from_payload(q), ProtocolError);
}

TEST_CASE("malformed frames") {
    FrameDecoder dec;
    const std::string junk = "{not json";
    dec.feed(frame_text(junk));
    CHECK_THROWS_AS(dec.next(), ProtocolError);
    FrameDecoder big;
    const std::uint8_t hdr[4] = {0xff, 0xff, 0xff, 0x7f};
    big.feed(hdr);
    CHECK_THROWS_AS(big.next(), ProtocolError);
    CHECK_THROWS_AS(parse_message(R"({"type":"STOP"})"), ProtocolError);
}

TEST_CASE("control channel") {
    ControlChannel ch(3);
    CHECK(ch.submit_roi(Roi{10, 10, 20, 20}).has_value());  // dims unknown
    ch.set_frame_dims(64, 64);
    const auto err = ch.submit_roi(Roi{0, 10, 20, 20});
    REQUIRE(err);
    CHECK(err->find("3 px") != std::string::npos);
    CHECK_FALSE(ch.submit_roi(Roi{3, 3, 58, 58}));
    CHECK(ch.wait_for_roi() == Roi{3, 3, 58, 58});
    ch.set_roi_locked();
    CHECK(ch.submit_roi(Roi{4, 4, 20, 20}).value().find("locked") != std::string::npos);

    auto bad = RatePolicy::defaults(Metric::MaxStrain);
    bad.thresholds[0].fps = 0.0;
    CHECK(ch.submit_policy(bad).has_value());
    CHECK_FALSE(ch.take_policy());
    CHECK_FALSE(ch.submit_policy(RatePolicy::defaults(Metric::Constant)));
    CHECK(ch.take_policy() == RatePolicy::defaults(Metric::Constant));
    CHECK_FALSE(ch.take_policy());

    SUBCASE("stop releases a waiting controller") {
        ControlChannel w(2);
        std::thread t([&] { std::this_thread::sleep_for(std::chrono::milliseconds(50)); w.request_stop(); });
        CHECK_FALSE(w.wait_for_roi());
        CHECK(w.stop_requested());
        t.join();
    }
}

TEST_CASE("server greets, subscribes and publishes snapshots") {
    ControlChannel ch(3);
    StreamServer server(local_options(), &ch);
    server.start();
    REQUIRE(server.port() > 0);

    StreamClient c;
    c.connect("127.0.0.1", server.port());
    const auto hello = c.receive(5.0);
    REQUIRE(hello);
    CHECK(hello->type == msg::kHello);
    CHECK(hello->seq == 1);
    CHECK(hello_from_payload(hello->payload).protocol_version == 1);
    CHECK(hello_from_payload(hello->payload).state == "idle");

    SUBCASE("unsubscribed clients get nothing") {
        server.on_batch(record_for(0), nullptr);
        const auto a = synthetic_analysis(8, 0);
        server.on_batch(record_for(0), &a);
        CHECK_FALSE(c.receive(0.3));
    }
    SUBCASE("one subscriber, one batch") {
        subscribe(c);
        const auto a = synthetic_analysis(8, 5);
        server.on_batch(record_for(5), &a);
        const auto m = c.receive(5.0);
        REQUIRE(m);
        CHECK(m->type == msg::kBatchSnapshot);
        const auto s = snapshot_from_payload(m->payload);
        CHECK(s.batch_index == 5);
        CHECK(s.eyy.width() == 8);
        CHECK(s.eyy(3, 3) == doctest::Approx(0.005));
        CHECK_FALSE(c.receive(0.2));
    }
    SUBCASE("late subscriber receives the first frame and trace") {
        RunConfig cfg;
        server.on_run_start(RunStartInfo{"run-x", &cfg, 64, 64});
        server.on_first_frame(GrayImage(Raster<double>(64, 64, 0.5)));
        server.on_batch(record_for(0), nullptr);
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
        StreamClient late;
        late.connect("127.0.0.1", server.port());
        const auto h = late.receive(5.0);
        REQUIRE(h);
        CHECK(h->payload.at("run_id") == "run-x");
        CHECK(h->payload.at("state") == "awaiting_roi");
        late.send(msg::kSubscribe);
        CHECK(late.receive_type(msg::kAck, 5.0));
        const auto ff = late.receive(5.0);
        REQUIRE(ff);
        CHECK(ff->type == msg::kFirstFrame);
        const auto px = decode_png(first_frame_png(ff->payload));
        CHECK(px.width() == 64);
        const auto tr = late.receive(5.0);
        REQUIRE(tr);
        CHECK(rate_trace_from_payload(tr->payload) == RateTrace{{0, 1.0}});
    }
    SUBCASE("control replies") {
        ch.set_frame_dims(64, 64);
        auto seq = c.send(msg::kSetRoi, set_roi_payload(Roi{0, 0, 64, 64}));
        auto r = c.receive(5.0);
        REQUIRE(r);
        CHECK(r->type == msg::kError);
        CHECK(r->payload.at("ref_seq") == seq);
        CHECK(r->payload.at("message").get<std::string>().find("inside") != std::string::npos);

        seq = c.send(msg::kSetRoi, set_roi_payload(Roi{8, 8, 40, 40}));
        r = c.receive(5.0);
        REQUIRE(r);
        CHECK(r->type == msg::kAck);
        CHECK(ch.roi() == Roi{8, 8, 40, 40});

        ch.set_roi_locked();
        c.send(msg::kSetRoi, set_roi_payload(Roi{8, 8, 30, 30}));
        r = c.receive(5.0);
        REQUIRE(r);
        CHECK(r->type == msg::kError);

        c.send(msg::kSetPolicy, json{{"policy", {{"metric", "NOPE"}}}});
        CHECK(c.receive(5.0)->type == msg::kError);
        c.send(msg::kSetPolicy, set_policy_payload(RatePolicy::defaults(Metric::Constant)));
        CHECK(c.receive(5.0)->type == msg::kAck);
        CHECK(ch.take_policy() == RatePolicy::defaults(Metric::Constant));

        c.send("DANCE");
        CHECK(c.receive(5.0)->type == msg::kError);

        c.send_raw(encode_frame(Message{msg::kStop, 1, json::object()}));  // seq went backwards
        CHECK(c.receive(5.0)->type == msg::kError);
        CHECK_FALSE(ch.stop_requested());

        c.send_raw(frame_text("[1,2"));
        CHECK(c.receive(5.0)->type == msg::kError);

        c.send(msg::kStop);
        CHECK(c.receive(5.0)->type == msg::kAck);
        CHECK(ch.stop_requested());
        CHECK(c.connected());
    }
    SUBCASE("outgoing seq increases per connection") {
        subscribe(c);
        std::int64_t last = 2;
        for (int b = 0; b < 5; ++b) {
            const auto a = synthetic_analysis(4, b);
            server.on_batch(record_for(b), &a);
        }
        for (int b = 0; b < 5; ++b) {
            const auto m = c.receive(5.0);
            REQUIRE(m);
            CHECK(m->seq == last + 1);
            CHECK(snapshot_from_payload(m->payload).batch_index == b);
            last = m->seq;
        }
    }
    server.stop();
}

TEST_CASE("a stalled client is dropped without holding back others") {
    StreamServer server(local_options(), nullptr);
    server.start();
    StreamClient good, stalled;
    good.connect("127.0.0.1", server.port());
    stalled.connect("127.0.0.1", server.port());
    REQUIRE(good.receive(5.0));
    REQUIRE(stalled.receive(5.0));
    subscribe(good);
    subscribe(stalled);
    REQUIRE(eventually([&] { return server.subscriber_count() == 2; }));

    const int batches = 40;  // ~1 MB per snapshot
    std::vector<std::int64_t> got;
    std::thread reader([&] {
        while (static_cast<int>(got.size()) < batches) {
            auto m = good.receive(10.0);
            if (!m) break;
            got.push_back(snapshot_from_payload(m->payload).batch_index);
        }
    });
    for (int b = 0; b < batches; ++b) {
        const auto a = synthetic_analysis(400, b);
        server.on_batch(record_for(b), &a);
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    reader.join();
    INFO("overflows " << server.overflow_disconnects() << " clients " << server.client_count() << " good " << good.connected());
    REQUIRE(static_cast<int>(got.size()) == batches);
    for (int b = 0; b < batches; ++b) CHECK(got[static_cast<std::size_t>(b)] == b);
    CHECK(eventually([&] { return server.overflow_disconnects() == 1; }));
    CHECK(server.client_count() == 1);

    // The stalled client can drain what reached it, then sees the close.
    int drained = 0;
    while (stalled.receive(2.0)) ++drained;
    CHECK_FALSE(stalled.connected());
    CHECK(drained < batches);
    server.stop();
}

TEST_CASE("stop flushes the end of the run") {
    StreamServer server(local_options(), nullptr);
    server.start();
    StreamClient c;
    c.connect("127.0.0.1", server.port());
    REQUIRE(c.receive(5.0));
    subscribe(c);
    server.on_batch(record_for(0), nullptr);
    server.on_run_end(RunOutcome{"completed", ""}, {});
    server.stop(2.0);
    const auto tr = c.receive(5.0);
    REQUIRE(tr);
    CHECK(tr->type == msg::kRateTrace);
    const auto end = c.receive(5.0);
    REQUIRE(end);
    CHECK(end->type == msg::kRunEnded);
    CHECK(end->payload.at("status") == "completed");
    CHECK_FALSE(c.receive(1.0));
    CHECK_FALSE(c.connected());
}

TEST_CASE("websocket endpoint") {
    namespace beast = boost::beast;
    namespace websocket = beast::websocket;
    using tcp = boost::asio::ip::tcp;
    StreamServer server(local_options(true), nullptr);
    server.start();
    REQUIRE(server.ws_port() > 0);
    boost::asio::io_context io;

    SUBCASE("same messages as JSON text frames") {
        websocket::stream<tcp::socket> ws(io);
        ws.next_layer().connect(tcp::endpoint(boost::asio::ip::make_address("127.0.0.1"),
                                              static_cast<unsigned short>(server.ws_port())));
        ws.handshake("127.0.0.1", "/ws");
        beast::flat_buffer buf;
        ws.read(buf);
        const auto hello = parse_message(beast::buffers_to_string(buf.data()));
        buf.consume(buf.size());
        CHECK(hello.type == msg::kHello);
        CHECK(hello.payload.at("protocol_version") == 1);
        ws.text(true);
        ws.write(boost::asio::buffer(message_text(Message{msg::kSubscribe, 1, json::object()})));
        ws.read(buf);
        CHECK(parse_message(beast::buffers_to_string(buf.data())).type == msg::kAck);
        buf.consume(buf.size());
        const auto a = synthetic_analysis(6, 2);
        server.on_batch(record_for(2), &a);
        ws.read(buf);
        const auto snap = parse_message(beast::buffers_to_string(buf.data()));
        CHECK(snap.type == msg::kBatchSnapshot);
        CHECK(snapshot_from_payload(snap.payload).batch_index == 2);
        ws.close(websocket::close_code::normal);
    }
    SUBCASE("other paths are refused") {
        websocket::stream<tcp::socket> ws(io);
        ws.next_layer().connect(tcp::endpoint(boost::asio::ip::make_address("127.0.0.1"),
                                              static_cast<unsigned short>(server.ws_port())));
        CHECK_THROWS(ws.handshake("127.0.0.1", "/other"));
    }
    server.stop();
}

TEST_CASE("interactive run over the wire") {
    RunConfig cfg = scenario_config(64, Metric::MaxStrain);
    cfg.roi.reset();
    ControlChannel ch(cfg.flow.margin());
    StreamServer server(local_options(), &ch);
    server.start();
    StreamClient c;
    c.connect("127.0.0.1", server.port());
    REQUIRE(c.receive(5.0));
    subscribe(c);

    const DeformationSchedule sched({{0.0, DisplacementMap::identity()}, {60.0, DisplacementMap({Affine{0, 0, 0, 0.02}})}});
    SimulatedSource src(cfg.source.speckle, sched, 0.0, 1.0, cfg.source.seed);
    RunResult result;
    std::thread run([&] { result = run_experiment(src, cfg, RunSinks{{}, &server, &ch}); });

    const auto ff = c.receive_type(msg::kFirstFrame, 10.0);
    REQUIRE(ff);
    c.send(msg::kSetRoi, set_roi_payload(Roi{0, 0, 64, 64}));
    CHECK(c.receive_type(msg::kError, 5.0));
    c.send(msg::kSetRoi, set_roi_payload(Roi{8, 8, 48, 48}));
    CHECK(c.receive_type(msg::kAck, 5.0));

    std::vector<std::int64_t> seen;
    for (int i = 0; i < 3; ++i) {
        const auto m = c.receive_type(msg::kBatchSnapshot, 20.0);
        REQUIRE(m);
        const auto s = snapshot_from_payload(m->payload);
        CHECK(s.roi == Roi{8, 8, 48, 48});
        seen.push_back(s.batch_index);
    }
    CHECK(seen == std::vector<std::int64_t>{0, 1, 2});
    c.send(msg::kStop);
    const auto end = c.receive_type(msg::kRunEnded, 30.0);
    REQUIRE(end);
    CHECK(end->payload.at("status") == "stopped_by_operator");
    run.join();
    CHECK(result.outcome.status == "stopped_by_operator");
    server.stop();
}
