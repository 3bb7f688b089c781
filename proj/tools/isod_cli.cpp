// isod: simulate, replay, analyze and watch ISOD runs.
#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <deque>
#include <fstream>
#include <iostream>
#include <thread>

#include "isod/archive.hpp"
#include "isod/config.hpp"
#include "isod/errors.hpp"
#include "isod/frame_source.hpp"
#include "isod/protocol.hpp"
#include "isod/report.hpp"
#include "isod/scenarios.hpp"
#include "isod/stream_client.hpp"
#include "isod/stream_server.hpp"

using namespace isod;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kSource = 3, kAnalysis = 4 };

struct Failure {
    int code;
    std::string message;
};

[[noreturn]] void fail(int code, std::string message) { throw Failure{code, std::move(message)}; }

std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

std::atomic<bool> g_interrupted{false};
extern "C" void on_sigint(int) { g_interrupted = true; }

int exit_code_for(const std::string& status) {
    if (status == "source_error") return kSource;
    if (status == "analysis_error") return kAnalysis;
    return kOk;
}

// Prints one line per batch.
class ProgressPrinter final : public RunObserver {
public:
    explicit ProgressPrinter(bool quiet) : quiet_(quiet) {}
    void on_run_start(const RunStartInfo& info) override {
        if (!quiet_) std::printf("run %s  %dx%d\n", info.run_id.c_str(), info.frame_width, info.frame_height);
    }
    void on_batch(const BatchRecord& r, const BatchAnalysis*) override {
        if (quiet_) return;
        if (r.analyzed)
            std::printf("batch %4lld  t=[%7.2f, %7.2f]  frames %3lld  fps %6.2f -> %6.2f  max_eyy %.6f\n",
                        static_cast<long long>(r.batch_index), r.t_start, r.t_end,
                        static_cast<long long>(r.frame_count), r.fps_used, r.next_fps, r.stats.max_eyy);
        else
            std::printf("batch %4lld  t=[%7.2f, %7.2f]  frames %3lld  fps %6.2f -> %6.2f  %s\n",
                        static_cast<long long>(r.batch_index), r.t_start, r.t_end,
                        static_cast<long long>(r.frame_count), r.fps_used, r.next_fps,
                        r.note.empty() ? "not analyzed" : r.note.c_str());
        std::fflush(stdout);
    }
    void on_run_end(const RunOutcome& o, const std::vector<BatchRecord>& records) override {
        std::int64_t frames = 0;
        for (const auto& r : records) frames += r.frame_count;
        if (!quiet_)
            std::printf("%s  batches %zu  frames %lld%s%s\n", o.status.c_str(), records.size(),
                        static_cast<long long>(frames), o.message.empty() ? "" : "  ", o.message.c_str());
    }

private:
    bool quiet_;
};

struct LoopOptions {
    bool serve = false;
    bool headless = false;
    bool quiet = false;
};

int run_loop(FrameSource& source, const RunConfig& cfg, const fs::path& out, json source_json,
             const LoopOptions& opt) {
    if (opt.serve && opt.headless) fail(kConfig, "--serve and --headless are mutually exclusive");
    if (!cfg.roi && !opt.serve) fail(kConfig, "roi: required unless --serve is given");

    ControlChannel control(cfg.flow.margin());
    ArchiveWriter archive(out, std::move(source_json));
    ProgressPrinter progress(opt.quiet);
    RunSinks sinks;
    sinks.observers = {&archive, &progress};
    sinks.control = &control;

    std::unique_ptr<StreamServer> server;
    if (opt.serve) {
        StreamOptions so;
        so.address = cfg.stream.address;
        so.port = cfg.stream.port;
        if (cfg.stream.ws_port > 0) so.ws_port = cfg.stream.ws_port;
        else so.ws_port.reset();
        server = std::make_unique<StreamServer>(so, &control);
        try {
            server->start();
        } catch (const std::exception& e) {
            fail(kConfig, std::string("stream: ") + e.what());
        }
        std::printf("serving on %s:%d", so.address.c_str(), server->port());
        if (server->ws_port() > 0) std::printf("  ws://%s:%d/ws", so.address.c_str(), server->ws_port());
        std::printf("\n");
        std::fflush(stdout);
        sinks.publisher = server.get();
    }

    g_interrupted = false;
    std::signal(SIGINT, on_sigint);
    std::atomic<bool> done{false};
    std::thread watcher([&] {
        while (!done) {
            if (g_interrupted) {
                control.request_stop();
                break;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
    });
    RunResult result;
    try {
        result = run_experiment(source, cfg, sinks);
    } catch (...) {
        done = true;
        watcher.join();
        throw;
    }
    done = true;
    watcher.join();
    std::signal(SIGINT, SIG_DFL);
    if (server) server->stop();
    const int code = exit_code_for(result.outcome.status);
    if (code != kOk) fail(code, result.outcome.status + ": " + result.outcome.message);
    return kOk;
}

RunConfig load_config_or_fail(const fs::path& path) {
    try {
        return load_run_config(path);
    } catch (const std::exception& e) {
        fail(kConfig, e.what());
    }
}

// ---- simulate ----

struct SimulateArgs {
    fs::path config, schedule, out;
    std::string policy;
    std::optional<std::uint64_t> seed;
    LoopOptions loop;
};

int cmd_simulate(const SimulateArgs& a) {
    RunConfig cfg = load_config_or_fail(a.config);
    DeformationSchedule schedule = [&] {
        try {
            return load_schedule(a.schedule);
        } catch (const std::exception& e) {
            fail(kConfig, e.what());
        }
    }();
    if (!a.policy.empty()) {
        const Metric m = a.policy == "max" ? Metric::MaxStrain : a.policy == "delmax" ? Metric::DelMaxStrain : Metric::Constant;
        if (m != cfg.policy.metric) {
            const double base = cfg.policy.base_fps;
            cfg.policy = RatePolicy::defaults(m);
            cfg.policy.base_fps = base;
        }
    }
    if (a.seed) {
        cfg.source.seed = *a.seed;
        cfg.source.speckle.rng_seed = *a.seed;
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        fail(kConfig, e.what());
    }
    SimulatedSource src(cfg.source.speckle, schedule, cfg.source.noise_sigma, cfg.source.activation_delay,
                        cfg.source.seed);
    return run_loop(src, cfg, a.out, json{{"kind", "simulated"}, {"schedule", to_json(schedule)}}, a.loop);
}

// ---- replay ----

// Without --config, a manifest inside an archive (<archive>/frames/manifest.json)
// reuses the configuration recorded by that run.
RunConfig replay_config(const fs::path& manifest, const fs::path& config) {
    if (!config.empty()) return load_config_or_fail(config);
    const auto archive_manifest = manifest.parent_path().parent_path() / "manifest.json";
    if (!fs::is_regular_file(archive_manifest)) fail(kConfig, "--config is required for this manifest");
    try {
        return run_config_from_json(read_json_file(archive_manifest).at("config"));
    } catch (const std::exception& e) {
        fail(kConfig, archive_manifest.string() + ": " + e.what());
    }
}

int cmd_replay(const fs::path& manifest, const fs::path& config, const fs::path& out, const LoopOptions& loop) {
    RunConfig cfg = replay_config(manifest, config);
    std::unique_ptr<ReplaySource> src;
    try {
        src = std::make_unique<ReplaySource>(manifest, cfg.source.activation_delay);
    } catch (const std::exception& e) {
        fail(kSource, e.what());
    }
    return run_loop(*src, cfg, out, json{{"kind", "replay"}, {"manifest", fs::absolute(manifest).string()}}, loop);
}

// ---- analyze ----

int cmd_analyze(const fs::path& archive, fs::path out, const std::optional<double>& split) {
    if (!fs::is_regular_file(archive / "manifest.json")) fail(kSource, archive.string() + ": not a run archive");
    if (out.empty()) out = archive / "report";
    std::optional<std::vector<Phase>> phases;
    if (split) phases = std::vector<Phase>{{"A", 0.0, *split}, {"B", *split, 1e300}};
    ReportSummary s;
    try {
        s = export_report(archive, out, phases);
    } catch (const std::exception& e) {
        fail(kSource, e.what());
    }
    for (const auto& w : s.warnings) std::fprintf(stderr, "warning: %s\n", one_line(w).c_str());
    for (const auto& p : s.phases)
        std::printf("phase %-8s frames %6lld  batches %4lld  frame_ratio %.3f\n", p.name.c_str(),
                    static_cast<long long>(p.frame_count), static_cast<long long>(p.batch_count), p.frame_ratio);
    std::printf("report written to %s\n", out.string().c_str());
    return kOk;
}

// ---- watch ----

std::string sparkline(const std::deque<double>& v) {
    static const char levels[] = " .:-=+*#%@";
    if (v.empty()) return {};
    double lo = v.front(), hi = v.front();
    for (double x : v) lo = std::min(lo, x), hi = std::max(hi, x);
    std::string s;
    for (double x : v) {
        const int i = hi > lo ? static_cast<int>((x - lo) / (hi - lo) * 9.0 + 0.5) : 0;
        s += levels[std::clamp(i, 0, 9)];
    }
    return s;
}

int cmd_watch(const std::string& address, std::size_t width, double timeout) {
    std::pair<std::string, int> hp;
    try {
        hp = parse_address(address);
    } catch (const std::exception& e) {
        fail(kConfig, "address: " + std::string(e.what()));
    }
    StreamClient c;
    try {
        c.connect(hp.first, hp.second);
    } catch (const std::exception& e) {
        fail(kSource, "cannot connect to " + address + ": " + e.what());
    }
    c.send(msg::kSubscribe);
    std::deque<double> eyy, fps;
    for (;;) {
        const auto m = c.receive(timeout);
        if (!m) fail(kSource, c.connected() ? "no message within the timeout" : "connection closed by server");
        if (m->type == msg::kHello) {
            const auto h = hello_from_payload(m->payload);
            std::printf("connected: run %s, state %s\n", h.run_id.c_str(), h.state.c_str());
        } else if (m->type == msg::kBatchSnapshot) {
            const auto s = snapshot_from_payload(m->payload);
            eyy.push_back(s.stats.max_eyy);
            fps.push_back(s.fps_used);
            while (eyy.size() > width) eyy.pop_front(), fps.pop_front();
            std::printf("batch %4lld  t_end %7.2f  fps %6.2f -> %6.2f  max_eyy %.6f  mean %.6f  valid %zu\n",
                        static_cast<long long>(s.batch_index), s.t_end, s.fps_used, s.next_fps, s.stats.max_eyy,
                        s.stats.mean_eyy, s.stats.valid_pixel_count);
            std::printf("  max_eyy |%s|\n  fps     |%s|\n", sparkline(eyy).c_str(), sparkline(fps).c_str());
        } else if (m->type == msg::kRunEnded) {
            std::printf("run ended: %s\n", m->payload.value("status", std::string("?")).c_str());
            return kOk;
        } else if (m->type == msg::kError) {
            std::fprintf(stderr, "server error: %s\n", m->payload.value("message", std::string()).c_str());
        }
        std::fflush(stdout);
    }
}

// ---- scenario ----

int cmd_scenario(const std::string& name, const fs::path& out, int size, const std::string& policy) {
    const Metric m = policy == "delmax" ? Metric::DelMaxStrain : policy == "constant" ? Metric::Constant : Metric::MaxStrain;
    RunConfig cfg = scenario_config(size, m);
    DeformationSchedule sched;
    if (name == "enrichment") {
        EnrichmentScenario s;
        s.size = size;
        sched = enrichment_schedule(s);
        cfg.phases = enrichment_phases(s);
    } else {
        AlternatingBands s;
        s.size = size;
        sched = alternating_band_schedule(s);
    }
    fs::create_directories(out);
    write_file_atomic(out / "config.json", to_json(cfg).dump(2) + "\n");
    write_file_atomic(out / "schedule.json", to_json(sched).dump(2) + "\n");
    std::printf("wrote %s and %s\n", (out / "config.json").string().c_str(), (out / "schedule.json").string().c_str());
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"In-situ on-demand strain monitoring: adaptive frame-rate control from live DIC strain."};
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "Run the control loop on synthetic speckle frames");
    simulate->add_option("--config", sim.config, "Run configuration (JSON)")->required();
    simulate->add_option("--schedule", sim.schedule, "Deformation schedule (JSON)")->required();
    simulate->add_option("--out", sim.out, "Archive directory")->required();
    simulate->add_option("--policy", sim.policy, "Override the rate policy with defaults for this metric")
        ->check(CLI::IsMember({"max", "delmax", "constant"}));
    simulate->add_option("--seed", sim.seed, "Seed for speckle and noise");
    simulate->add_flag("--serve", sim.loop.serve, "Start the stream server");
    simulate->add_flag("--headless", sim.loop.headless, "Never open a listener");
    simulate->add_flag("-q,--quiet", sim.loop.quiet, "No per-batch output");

    fs::path rp_manifest, rp_config, rp_out;
    LoopOptions rp_loop;
    auto* replay = app.add_subcommand("replay", "Run the control loop over recorded frames");
    replay->add_option("--manifest", rp_manifest, "Replay manifest (frames/manifest.json of an archive)")->required();
    replay->add_option("--config", rp_config, "Run configuration (JSON); default: the recorded run's");
    replay->add_option("--out", rp_out, "Archive directory")->required();
    replay->add_flag("--serve", rp_loop.serve, "Start the stream server");
    replay->add_flag("--headless", rp_loop.headless, "Never open a listener");
    replay->add_flag("-q,--quiet", rp_loop.quiet, "No per-batch output");

    fs::path an_archive, an_out;
    std::optional<double> an_split;
    auto* analyze = app.add_subcommand("analyze", "Export report tables from a run archive");
    analyze->add_option("--archive", an_archive, "Archive directory")->required();
    analyze->add_option("--out", an_out, "Report directory (default: <archive>/report)");
    analyze->add_option("--phase-split", an_split, "Split into phases A and B at this time instead of the configured phases");

    std::string w_address = "127.0.0.1:7341";
    std::size_t w_width = 60;
    double w_timeout = 600.0;
    auto* watch = app.add_subcommand("watch", "Print live batch statistics from a running server");
    watch->add_option("--address", w_address, "host:port of the stream server");
    watch->add_option("--width", w_width, "Sparkline length")->check(CLI::Range(1, 1000));
    watch->add_option("--timeout", w_timeout, "Seconds to wait for the next message");

    std::string sc_name;
    fs::path sc_out;
    int sc_size = 128;
    std::string sc_policy = "max";
    auto* scenario = app.add_subcommand("scenario", "Write the configuration and schedule of a scripted scenario");
    scenario->add_option("name", sc_name, "enrichment | alternating")->required()->check(CLI::IsMember({"enrichment", "alternating"}));
    scenario->add_option("--out", sc_out, "Output directory")->required();
    scenario->add_option("--size", sc_size, "Frame side in pixels")->check(CLI::Range(32, 4096));
    scenario->add_option("--policy", sc_policy)->check(CLI::IsMember({"max", "delmax", "constant"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
        return kConfig;
    }

    try {
        if (*simulate) return cmd_simulate(sim);
        if (*replay) return cmd_replay(rp_manifest, rp_config, rp_out, rp_loop);
        if (*analyze) return cmd_analyze(an_archive, an_out, an_split);
        if (*watch) return cmd_watch(w_address, w_width, w_timeout);
        if (*scenario) return cmd_scenario(sc_name, sc_out, sc_size, sc_policy);
    } catch (const Failure& f) {
        std::fprintf(stderr, "error: %s\n", one_line(f.message).c_str());
        return f.code;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
        return kConfig;
    } catch (const LoadError& e) {
        std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
        return kSource;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
        return kAnalysis;
    }
    return kOk;
}
