#include "isod/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace isod {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Object reader that records visited keys so unknown ones can be reported.
class Fields {
public:
    Fields(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_.empty() ? "$" : path_, "expected an object");
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const Json* get(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() || it->is_null() ? nullptr : &*it;
    }

    void number(const std::string& key, double& out) {
        if (const Json* v = get(key)) {
            if (!v->is_number()) throw ConfigError(at(key), "expected a number");
            out = v->get<double>();
        }
    }
    void integer(const std::string& key, int& out) {
        if (const Json* v = get(key)) {
            if (!v->is_number_integer()) throw ConfigError(at(key), "expected an integer");
            out = v->get<int>();
        }
    }
    void integer(const std::string& key, std::int64_t& out) {
        if (const Json* v = get(key)) {
            if (!v->is_number_integer()) throw ConfigError(at(key), "expected an integer");
            out = v->get<std::int64_t>();
        }
    }
    void unsigned_integer(const std::string& key, std::uint64_t& out) {
        if (const Json* v = get(key)) {
            if (!v->is_number_unsigned()) throw ConfigError(at(key), "expected a non-negative integer");
            out = v->get<std::uint64_t>();
        }
    }
    void string(const std::string& key, std::string& out) {
        if (const Json* v = get(key)) {
            if (!v->is_string()) throw ConfigError(at(key), "expected a string");
            out = v->get<std::string>();
        }
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(at(it.key()), "unknown field");
    }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class F>
auto rethrow_as_config(const std::string& path, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(path, e.what());
    }
}

std::string interpolation_name(Interpolation i) { return i == Interpolation::Bilinear ? "bilinear" : "bicubic"; }

Json map_term_to_json(const MapTerm& t) {
    if (const auto* p = std::get_if<Translation>(&t)) return {{"kind", "translate"}, {"u", p->u}, {"v", p->v}};
    if (const auto* p = std::get_if<Affine>(&t))
        return {{"kind", "affine"}, {"du_dx", p->du_dx}, {"du_dy", p->du_dy}, {"dv_dx", p->dv_dx}, {"dv_dy", p->dv_dy}};
    if (const auto* p = std::get_if<Rotation>(&t)) return {{"kind", "rotate"}, {"theta_rad", p->theta_rad}};
    const auto& b = std::get<Band>(t);
    return {{"kind", "band"}, {"amplitude", b.amplitude}, {"center_y", b.center_y}, {"width", b.width}};
}

MapTerm map_term_from_json(const Json& j, const std::string& path) {
    Fields f(j, path);
    std::string kind;
    f.string("kind", kind);
    MapTerm out;
    if (kind == "translate") {
        Translation t;
        f.number("u", t.u);
        f.number("v", t.v);
        out = t;
    } else if (kind == "affine") {
        Affine a;
        f.number("du_dx", a.du_dx);
        f.number("du_dy", a.du_dy);
        f.number("dv_dx", a.dv_dx);
        f.number("dv_dy", a.dv_dy);
        out = a;
    } else if (kind == "rotate") {
        Rotation r;
        double deg = NAN;
        f.number("theta_rad", r.theta_rad);
        f.number("theta_deg", deg);
        if (!std::isnan(deg)) r.theta_rad = deg * kPi / 180.0;
        out = r;
    } else if (kind == "band") {
        Band b;
        f.number("amplitude", b.amplitude);
        f.number("center_y", b.center_y);
        f.number("width", b.width);
        if (!(b.width > 0.0)) throw ConfigError(f.at("width"), "must be positive");
        out = b;
    } else {
        throw ConfigError(f.at("kind"), "expected translate, affine, rotate or band");
    }
    f.finish();
    return out;
}

} // namespace

Json to_json(const DisplacementMap& m) {
    Json terms = Json::array();
    for (const auto& t : m.terms()) terms.push_back(map_term_to_json(t));
    return terms;
}

DisplacementMap map_from_json(const Json& j, const std::string& path) {
    std::vector<MapTerm> terms;
    if (j.is_array()) {
        for (std::size_t k = 0; k < j.size(); ++k) terms.push_back(map_term_from_json(j[k], path + "[" + std::to_string(k) + "]"));
    } else {
        terms.push_back(map_term_from_json(j, path));
    }
    return DisplacementMap(std::move(terms));
}

Json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string(), "cannot open file");
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
    }
}

Json to_json(const Roi& r) { return Json::array({r.x0, r.y0, r.width, r.height}); }

Roi roi_from_json(const Json& j, const std::string& path) {
    if (!j.is_array() || j.size() != 4) throw ConfigError(path, "expected [x0, y0, width, height]");
    for (const auto& v : j)
        if (!v.is_number_integer()) throw ConfigError(path, "ROI entries must be integers");
    return Roi{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

Json to_json(const RatePolicy& p) {
    Json rows = Json::array();
    for (const auto& t : p.thresholds) rows.push_back(Json::array({t.lower_bound, t.fps}));
    return {{"metric", std::string(to_string(p.metric))},
            {"thresholds", rows},
            {"base_fps", p.base_fps},
            {"fps_min", p.fps_min},
            {"fps_max", p.fps_max},
            {"topk_fraction", p.topk_fraction ? Json(*p.topk_fraction) : Json(nullptr)}};
}

RatePolicy policy_from_json(const Json& j, const std::string& path) {
    Fields f(j, path);
    std::string metric = "MAX_STRAIN";
    f.string("metric", metric);
    RatePolicy p = RatePolicy::defaults(
        rethrow_as_config(f.at("metric"), [&] { return metric_from_string(metric); }));
    if (const Json* rows = f.get("thresholds")) {
        if (!rows->is_array()) throw ConfigError(f.at("thresholds"), "expected [[lower_bound, fps], ...]");
        p.thresholds.clear();
        for (std::size_t i = 0; i < rows->size(); ++i) {
            const Json& r = (*rows)[i];
            const std::string at = f.at("thresholds") + "[" + std::to_string(i) + "]";
            if (!r.is_array() || r.size() != 2 || !r[0].is_number() || !r[1].is_number())
                throw ConfigError(at, "expected [lower_bound, fps]");
            p.thresholds.push_back({r[0].get<double>(), r[1].get<double>()});
        }
    }
    f.number("base_fps", p.base_fps);
    f.number("fps_min", p.fps_min);
    f.number("fps_max", p.fps_max);
    if (const Json* k = f.get("topk_fraction")) {
        if (!k->is_number()) throw ConfigError(f.at("topk_fraction"), "expected a number or null");
        p.topk_fraction = k->get<double>();
    }
    f.finish();
    try {
        p.validate();
    } catch (const ConfigError& e) {
        // validate() reports paths rooted at "policy".
        const std::string rel = e.path().substr(std::string("policy").size());
        throw ConfigError(path + rel, e.message());
    }
    return p;
}

Json to_json(const FlowConfig& c) {
    return {{"window_half", c.window_half},       {"min_eigen_tol", c.min_eigen_tol},
            {"max_iterations", c.max_iterations}, {"convergence_eps", c.convergence_eps},
            {"pyramid_levels", c.pyramid_levels}, {"interpolation", interpolation_name(c.interpolation)}};
}

FlowConfig flow_from_json(const Json& j, const std::string& path) {
    Fields f(j, path);
    FlowConfig c;
    f.integer("window_half", c.window_half);
    f.number("min_eigen_tol", c.min_eigen_tol);
    f.integer("max_iterations", c.max_iterations);
    f.number("convergence_eps", c.convergence_eps);
    f.integer("pyramid_levels", c.pyramid_levels);
    std::string interp = interpolation_name(c.interpolation);
    f.string("interpolation", interp);
    if (interp == "bicubic")
        c.interpolation = Interpolation::Bicubic;
    else if (interp == "bilinear")
        c.interpolation = Interpolation::Bilinear;
    else
        throw ConfigError(f.at("interpolation"), "expected bicubic or bilinear");
    f.finish();
    if (c.window_half < 1) throw ConfigError(f.at("window_half"), "must be >= 1");
    if (c.pyramid_levels < 1) throw ConfigError(f.at("pyramid_levels"), "must be >= 1");
    if (c.max_iterations < 1) throw ConfigError(f.at("max_iterations"), "must be >= 1");
    if (!(c.min_eigen_tol > 0.0)) throw ConfigError(f.at("min_eigen_tol"), "must be positive");
    if (!(c.convergence_eps > 0.0)) throw ConfigError(f.at("convergence_eps"), "must be positive");
    rethrow_as_config(path, [&] { c.validate(); });
    return c;
}

Json to_json(const SpeckleSpec& s) {
    return {{"width", s.width},
            {"height", s.height},
            {"dot_density", s.dot_density},
            {"dot_radius_range", Json::array({s.radius_min, s.radius_max})},
            {"background_level", s.background_level},
            {"dot_level", s.dot_level},
            {"blur_sigma", s.blur_sigma},
            {"rng_seed", s.rng_seed}};
}

SpeckleSpec speckle_from_json(const Json& j, const std::string& path) {
    Fields f(j, path);
    SpeckleSpec s;
    f.integer("width", s.width);
    f.integer("height", s.height);
    f.number("dot_density", s.dot_density);
    if (const Json* r = f.get("dot_radius_range")) {
        if (!r->is_array() || r->size() != 2 || !(*r)[0].is_number() || !(*r)[1].is_number())
            throw ConfigError(f.at("dot_radius_range"), "expected [min, max]");
        s.radius_min = (*r)[0].get<double>();
        s.radius_max = (*r)[1].get<double>();
    }
    f.number("background_level", s.background_level);
    f.number("dot_level", s.dot_level);
    f.number("blur_sigma", s.blur_sigma);
    f.unsigned_integer("rng_seed", s.rng_seed);
    f.finish();
    rethrow_as_config(path, [&] { s.validate(); });
    return s;
}

Json to_json(const RunConfig& c) {
    Json phases = Json::array();
    for (const auto& p : c.phases) phases.push_back({{"name", p.name}, {"t_start", p.t_start}, {"t_end", p.t_end}});
    Json ks = Json::array();
    for (double k : c.strain.k_fractions) ks.push_back(k);
    return {
        {"batch_duration", c.batch_duration},
        {"policy", to_json(c.policy)},
        {"roi", c.roi ? to_json(*c.roi) : Json("interactive")},
        {"flow", to_json(c.flow)},
        {"strain",
         {{"smoothing_sigma", c.strain.smoothing_sigma},
          {"component", std::string(to_string(c.strain.component))},
          {"k_fractions", ks}}},
        {"stop", {{"max_batches", c.stop.max_batches ? Json(*c.stop.max_batches) : Json(nullptr)}}},
        {"reference_strategy", std::string(to_string(c.reference_strategy))},
        {"source",
         {{"speckle", to_json(c.source.speckle)},
          {"noise_sigma", c.source.noise_sigma},
          {"activation_delay", c.source.activation_delay},
          {"seed", c.source.seed}}},
        {"stream", {{"address", c.stream.address}, {"port", c.stream.port}, {"ws_port", c.stream.ws_port}}},
        {"phases", phases},
    };
}

RunConfig run_config_from_json(const Json& j) {
    Fields f(j, "");
    RunConfig c;
    f.number("batch_duration", c.batch_duration);
    if (const Json* p = f.get("policy")) c.policy = policy_from_json(*p, "policy");
    if (const Json* r = f.get("roi")) {
        if (r->is_string()) {
            if (r->get<std::string>() != "interactive")
                throw ConfigError("roi", "expected [x0, y0, width, height] or \"interactive\"");
            c.roi.reset();
        } else {
            c.roi = roi_from_json(*r, "roi");
        }
    }
    if (const Json* fl = f.get("flow")) c.flow = flow_from_json(*fl, "flow");
    if (const Json* s = f.get("strain")) {
        Fields sf(*s, "strain");
        sf.number("smoothing_sigma", c.strain.smoothing_sigma);
        std::string comp = std::string(to_string(c.strain.component));
        sf.string("component", comp);
        c.strain.component =
            rethrow_as_config("strain.component", [&] { return strain_component_from_string(comp); });
        if (const Json* ks = sf.get("k_fractions")) {
            if (!ks->is_array()) throw ConfigError("strain.k_fractions", "expected an array of fractions");
            c.strain.k_fractions.clear();
            for (std::size_t i = 0; i < ks->size(); ++i) {
                if (!(*ks)[i].is_number())
                    throw ConfigError("strain.k_fractions[" + std::to_string(i) + "]", "expected a number");
                c.strain.k_fractions.push_back((*ks)[i].get<double>());
            }
        }
        sf.finish();
    }
    if (const Json* s = f.get("stop")) {
        Fields sf(*s, "stop");
        if (const Json* m = sf.get("max_batches")) {
            if (!m->is_number_integer()) throw ConfigError("stop.max_batches", "expected an integer");
            c.stop.max_batches = m->get<std::int64_t>();
        }
        sf.finish();
    }
    std::string strategy = std::string(to_string(c.reference_strategy));
    f.string("reference_strategy", strategy);
    c.reference_strategy =
        rethrow_as_config("reference_strategy", [&] { return reference_strategy_from_string(strategy); });
    if (const Json* s = f.get("source")) {
        Fields sf(*s, "source");
        if (const Json* sp = sf.get("speckle")) c.source.speckle = speckle_from_json(*sp, "source.speckle");
        sf.number("noise_sigma", c.source.noise_sigma);
        sf.number("activation_delay", c.source.activation_delay);
        sf.unsigned_integer("seed", c.source.seed);
        sf.finish();
    }
    if (const Json* s = f.get("stream")) {
        Fields sf(*s, "stream");
        sf.string("address", c.stream.address);
        sf.integer("port", c.stream.port);
        sf.integer("ws_port", c.stream.ws_port);
        sf.finish();
    }
    if (const Json* ph = f.get("phases")) {
        if (!ph->is_array()) throw ConfigError("phases", "expected an array");
        for (std::size_t i = 0; i < ph->size(); ++i) {
            Fields pf((*ph)[i], "phases[" + std::to_string(i) + "]");
            Phase p;
            pf.string("name", p.name);
            pf.number("t_start", p.t_start);
            pf.number("t_end", p.t_end);
            pf.finish();
            c.phases.push_back(p);
        }
    }
    f.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    const Json j = read_json_file(path);
    try {
        return run_config_from_json(j);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ":" + e.path(), e.message());
    }
}

Json to_json(const StrainStats& s) {
    Json top = Json::object(), del = Json::object();
    for (const auto& [k, v] : s.topk_mean_eyy) top[fraction_label(k)] = v;
    for (const auto& [k, v] : s.del_topk_mean_eyy) del[fraction_label(k)] = v;
    return {{"max_eyy", s.max_eyy},
            {"mean_eyy", s.mean_eyy},
            {"del_max_eyy", s.del_max_eyy},
            {"topk_mean_eyy", top},
            {"del_topk_mean_eyy", del},
            {"valid_pixel_count", s.valid_pixel_count}};
}

StrainStats stats_from_json(const Json& j) {
    StrainStats s;
    s.max_eyy = j.at("max_eyy").get<double>();
    s.mean_eyy = j.at("mean_eyy").get<double>();
    s.del_max_eyy = j.at("del_max_eyy").get<double>();
    for (auto it = j.at("topk_mean_eyy").begin(); it != j.at("topk_mean_eyy").end(); ++it)
        s.topk_mean_eyy[std::stod(it.key())] = it->get<double>();
    for (auto it = j.at("del_topk_mean_eyy").begin(); it != j.at("del_topk_mean_eyy").end(); ++it)
        s.del_topk_mean_eyy[std::stod(it.key())] = it->get<double>();
    s.valid_pixel_count = j.at("valid_pixel_count").get<std::size_t>();
    return s;
}

Json to_json(const DeformationSchedule& s) {
    Json out = Json::array();
    for (const auto& k : s.keys()) {
        Json terms = Json::array();
        for (const auto& t : k.map.terms()) terms.push_back(map_term_to_json(t));
        out.push_back({{"t", k.time}, {"map", terms}});
    }
    return out;
}

DeformationSchedule schedule_from_json(const Json& j, const std::string& path) {
    if (!j.is_array()) throw ConfigError(path, "expected a list of {\"t\", \"map\"} entries");
    std::vector<ScheduleKey> keys;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string at = path + "[" + std::to_string(i) + "]";
        Fields f(j[i], at);
        ScheduleKey key;
        f.number("t", key.time);
        std::vector<MapTerm> terms;
        if (const Json* m = f.get("map")) {
            if (m->is_array()) {
                for (std::size_t k = 0; k < m->size(); ++k)
                    terms.push_back(map_term_from_json((*m)[k], at + ".map[" + std::to_string(k) + "]"));
            } else {
                terms.push_back(map_term_from_json(*m, at + ".map"));
            }
        }
        key.map = DisplacementMap(std::move(terms));
        f.finish();
        keys.push_back(std::move(key));
    }
    return rethrow_as_config(path, [&] { return DeformationSchedule(std::move(keys)); });
}

DeformationSchedule load_schedule(const std::filesystem::path& path) {
    const Json j = read_json_file(path);
    try {
        return schedule_from_json(j, "schedule");
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ":" + e.path(), e.message());
    }
}

std::string make_run_id(const RunConfig& config) {
    const std::string text = to_json(config).dump();
    std::uint64_t h = 14695981039346656037ull;  // FNV-1a
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "run-%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace isod
