#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "isod/controller.hpp"

namespace isod {

// Mailbox between operator clients and the controller. Operator calls come
// from the network thread; the controller reads at batch boundaries.
class ControlChannel final : public ControlInlet {
public:
    explicit ControlChannel(int flow_margin) : margin_(flow_margin) {}

    void set_frame_dims(int width, int height) override;
    void set_roi_locked() override;
    std::optional<Roi> wait_for_roi() override;
    std::optional<RatePolicy> take_policy() override;
    bool stop_requested() const override { return stop_.load(); }

    // Each returns an error text when the command is rejected.
    std::optional<std::string> submit_roi(const Roi& roi);
    std::optional<std::string> submit_policy(const RatePolicy& policy);
    void request_stop();

    std::optional<Roi> roi() const;
    bool roi_locked() const;

private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    int margin_;
    int width_ = 0;
    int height_ = 0;
    bool locked_ = false;
    std::optional<Roi> roi_;
    std::optional<RatePolicy> pending_policy_;
    std::atomic<bool> stop_{false};
};

struct StreamOptions {
    std::string address = "127.0.0.1";
    int port = 7341;                  // 0 picks a free port
    std::optional<int> ws_port = 7342;  // browser endpoint at /ws; nullopt disables
    std::size_t queue_depth = 8;      // snapshots a client may have pending
    std::optional<int> send_buffer_bytes;  // SO_SNDBUF for accepted sockets
};

// Publishes run events to TCP and websocket clients from its own thread.
class StreamServer final : public RunObserver {
public:
    StreamServer(StreamOptions options, ControlChannel* control);
    ~StreamServer() override;
    StreamServer(const StreamServer&) = delete;
    StreamServer& operator=(const StreamServer&) = delete;

    void start();
    // Flushes queued messages (bounded by `grace_seconds`) and joins the thread.
    void stop(double grace_seconds = 2.0);

    int port() const;
    int ws_port() const;  // 0 when disabled
    std::size_t client_count() const;
    std::size_t subscriber_count() const;
    std::size_t overflow_disconnects() const;

    void on_run_start(const RunStartInfo& info) override;
    void on_first_frame(const GrayImage& frame) override;
    void on_roi(const Roi& roi) override;
    void on_batch(const BatchRecord& record, const BatchAnalysis* analysis) override;
    void on_run_end(const RunOutcome& outcome, const std::vector<BatchRecord>& records) override;

    struct Impl;

private:
    std::shared_ptr<Impl> impl_;
};

} // namespace isod
