#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "isod/archive.hpp"
#include "isod/config.hpp"
#include "isod/controller.hpp"
#include "isod/errors.hpp"
#include "isod/flow.hpp"
#include "isod/frame_source.hpp"
#include "isod/png_io.hpp"
#include "isod/protocol.hpp"
#include "isod/strain.hpp"

namespace py = pybind11;
using namespace isod;
using nlohmann::json;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

template <class T>
Raster<T> to_raster(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
    const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    return Raster<T>(w, h, std::vector<T>(a.data(), a.data() + a.size()));
}

template <class T>
py::array_t<T> to_array(const Raster<T>& r) {
    py::array_t<T> a({r.height(), r.width()});
    std::copy(r.data().begin(), r.data().end(), a.mutable_data());
    return a;
}

Roi roi_from(const py::tuple& t) {
    if (t.size() != 4) throw DimensionError("roi must be (x0, y0, width, height)");
    return Roi{t[0].cast<int>(), t[1].cast<int>(), t[2].cast<int>(), t[3].cast<int>()};
}

json record_json(const BatchRecord& r) {
    return {{"batch_index", r.batch_index}, {"fps_used", r.fps_used},       {"next_fps", r.next_fps},
            {"frame_count", r.frame_count}, {"first_frame", r.first_frame}, {"last_frame", r.last_frame},
            {"t_start", r.t_start},         {"t_end", r.t_end},             {"analyzed", r.analyzed},
            {"flagged", r.flagged},         {"fired_row", r.fired_row},     {"note", r.note},
            {"compute_duration", r.compute_duration}, {"stats", to_json(r.stats)}};
}

StrainField strain_from(const F64& exx, const F64& eyy, const F64& exy, const U8& valid, const Roi& roi) {
    StrainField s;
    s.roi = roi;
    s.exx = to_raster(exx);
    s.eyy = to_raster(eyy);
    s.exy = to_raster(exy);
    s.valid = to_raster(valid);
    if (s.eyy.width() != roi.width || s.eyy.height() != roi.height || s.exx.size() != s.eyy.size() ||
        s.exy.size() != s.eyy.size() || s.valid.size() != s.eyy.size())
        throw DimensionError("strain arrays must all match the roi size");
    return s;
}

} // namespace

PYBIND11_MODULE(_isod, m) {
    m.doc() = "Dense optical-flow strain measurement and adaptive frame-rate control.";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
    py::register_exception<LoadError>(m, "LoadError", PyExc_OSError);
    py::register_exception<InsufficientDataError>(m, "InsufficientDataError", PyExc_RuntimeError);
    py::register_exception<ProtocolError>(m, "ProtocolError", PyExc_ValueError);

    m.def("generate_speckle", [](const std::string& spec) {
        return to_array(generate_speckle(speckle_from_json(json::parse(spec))).pixels);
    });

    m.def("warp", [](const F64& image, const std::string& map, double fill) {
        return to_array(warp_image(GrayImage(to_raster(image)), map_from_json(json::parse(map)), fill).pixels);
    });

    m.def("solve_flow", [](const F64& ref, const F64& def, const py::tuple& roi, const std::string& flow) {
        const GrayImage a(to_raster(ref)), b(to_raster(def));
        const Roi r = roi_from(roi);
        const FlowConfig cfg = flow_from_json(json::parse(flow));
        DisplacementField d;
        {
            py::gil_scoped_release release;
            d = solve_dense(a, b, r, cfg);
        }
        return py::make_tuple(to_array(d.u), to_array(d.v), to_array(d.valid));
    });

    m.def("green_strain", [](const F64& u, const F64& v, const U8& valid, const py::tuple& roi, double sigma) {
        DisplacementField d(roi_from(roi));
        d.u = to_raster(u);
        d.v = to_raster(v);
        d.valid = to_raster(valid);
        if (d.u.width() != d.roi.width || d.u.height() != d.roi.height || d.v.size() != d.u.size() ||
            d.valid.size() != d.u.size())
            throw DimensionError("displacement arrays must all match the roi size");
        const auto s = green_strain(displacement_gradients(d, sigma));
        return py::make_tuple(to_array(s.exx), to_array(s.eyy), to_array(s.exy), to_array(s.valid));
    });

    m.def("strain_stats", [](const F64& exx, const F64& eyy, const F64& exy, const U8& valid, const py::tuple& roi,
                             const std::optional<std::string>& previous, const std::vector<double>& k_fractions) {
        const auto s = strain_from(exx, eyy, exy, valid, roi_from(roi));
        std::optional<StrainStats> prev;
        if (previous) prev = stats_from_json(json::parse(*previous));
        return to_json(strain_stats(s, prev ? &*prev : nullptr, k_fractions)).dump();
    });

    m.def("decide_rate", [](const std::string& policy, const std::string& stats) {
        const auto p = policy_from_json(json::parse(policy));
        p.validate();
        const auto d = decide_rate(p, stats_from_json(json::parse(stats)));
        return py::make_tuple(d.fps, d.fired_row);
    });

    m.def("simulate", [](const std::string& config, const std::string& schedule, const std::string& out_dir) {
        const RunConfig cfg = run_config_from_json(json::parse(config));
        const DeformationSchedule sched = schedule_from_json(json::parse(schedule));
        SimulatedSource src(cfg.source.speckle, sched, cfg.source.noise_sigma, cfg.source.activation_delay,
                            cfg.source.seed);
        std::optional<ArchiveWriter> archive;
        RunSinks sinks;
        if (!out_dir.empty()) {
            archive.emplace(out_dir, json{{"kind", "simulated"}, {"schedule", to_json(sched)}});
            sinks.observers.push_back(&*archive);
        }
        RunResult res;
        {
            py::gil_scoped_release release;
            res = run_experiment(src, cfg, sinks);
        }
        json records = json::array();
        for (const auto& r : res.records) records.push_back(record_json(r));
        return json{{"run_id", res.run_id}, {"status", res.outcome.status}, {"message", res.outcome.message},
                    {"records", records}}
            .dump();
    });

    m.def("load_archive", [](const std::string& root) {
        const auto a = load_archive(root);
        json records = json::array();
        for (const auto& r : a.records) records.push_back(record_json(r));
        json frames = json::array();
        for (const auto& f : a.frames)
            frames.push_back({{"frame_index", f.frame_index}, {"batch_index", f.batch_index},
                              {"timestamp", f.timestamp}, {"fps", f.fps}});
        return json{{"status", a.status},
                    {"config", to_json(a.config)},
                    {"roi", a.roi ? to_json(*a.roi) : json(nullptr)},
                    {"records", records},
                    {"frames", frames}}
            .dump();
    });

    m.def("load_batch", [](const std::string& path) {
        const auto c = load_batch(path);
        py::dict d;
        d["roi"] = py::make_tuple(c.strain.roi.x0, c.strain.roi.y0, c.strain.roi.width, c.strain.roi.height);
        d["exx"] = to_array(c.strain.exx);
        d["eyy"] = to_array(c.strain.eyy);
        d["exy"] = to_array(c.strain.exy);
        d["valid"] = to_array(c.strain.valid);
        d["u"] = to_array(c.displacement.u);
        d["v"] = to_array(c.displacement.v);
        d["flow_valid"] = to_array(c.displacement.valid);
        d["strategy"] = c.strategy;
        return d;
    });

    m.def("encode_png", [](const U8& image) {
        const auto bytes = encode_png(to_raster(image));
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    });
    m.def("decode_png", [](const py::bytes& data) {
        const std::string s = data;
        return to_array(decode_png(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
    });

    m.def("encode_message", [](const std::string& type, std::int64_t seq, const std::string& payload) {
        const auto f = encode_frame(Message{type, seq, json::parse(payload)});
        return py::bytes(reinterpret_cast<const char*>(f.data()), f.size());
    });
    m.def("decode_messages", [](const py::bytes& data) {
        const std::string s = data;
        FrameDecoder dec;
        dec.feed(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
        py::list out;
        while (auto msg = dec.next()) out.append(py::make_tuple(msg->type, msg->seq, msg->payload.dump()));
        return py::make_tuple(out, dec.buffered());
    });

    m.attr("protocol_version") = kProtocolVersion;
}
