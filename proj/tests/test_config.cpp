#include "doctest.h"

#include <fstream>
#include <numbers>

#include "isod/config.hpp"
#include "isod/scenarios.hpp"
#include "support.hpp"

using namespace isod;
using nlohmann::json;

namespace {

std::string error_path(const json& j) {
    try {
        run_config_from_json(j);
    } catch (const ConfigError& e) {
        return e.path();
    }
    return "<no error>";
}

} // namespace

TEST_CASE("run config round trip") {
    RunConfig c = scenario_config(128, Metric::DelMaxStrain);
    c.policy.topk_fraction = 0.1;
    c.stop.max_batches = 40;
    c.reference_strategy = ReferenceStrategy::BatchPair;
    c.flow.interpolation = Interpolation::Bilinear;
    c.flow.pyramid_levels = 2;
    c.strain.component = StrainComponent::Exy;
    c.stream.port = 9000;
    c.phases = {{"A", 0, 120}, {"B", 120, 330}};
    CHECK(run_config_from_json(to_json(c)) == c);
    CHECK(run_config_from_json(json::parse(to_json(c).dump())) == c);

    RunConfig interactive;
    interactive.roi.reset();
    CHECK(to_json(interactive).at("roi") == "interactive");
    CHECK(run_config_from_json(to_json(interactive)) == interactive);
}

TEST_CASE("defaults fill missing fields") {
    const auto c = run_config_from_json(json::object());
    CHECK(c == RunConfig{});
    const auto p = run_config_from_json(json{{"policy", {{"metric", "DEL_MAX_STRAIN"}}}});
    CHECK(p.policy.thresholds == RatePolicy::defaults(Metric::DelMaxStrain).thresholds);
}

TEST_CASE("config errors name the field") {
    CHECK(error_path(json{{"policy", {{"thresholds", {{0.01, 4}, {0.005, 16}}}}}}).rfind("policy.thresholds", 0) == 0);
    CHECK(error_path(json{{"policy", {{"foo", 1}}}}) == "policy.foo");
    CHECK(error_path(json{{"flow", {{"window_half", "three"}}}}) == "flow.window_half");
    CHECK(error_path(json{{"flow", {{"window_half", 0}}}}) == "flow.window_half");
    CHECK(error_path(json{{"batch_duration", -1}}) == "batch_duration");
    CHECK(error_path(json{{"roi", {1, 2, 3}}}) == "roi");
    CHECK(error_path(json{{"source", {{"speckle", {{"dot_radius_range", {3, 1}}}}}}}).rfind("source.speckle", 0) == 0);
    CHECK(error_path(json{{"reference_strategy", "SOMETIMES"}}) == "reference_strategy");
    CHECK(error_path(json::array()) == "$");
}

TEST_CASE("config files") {
    test::TempDir dir;
    std::ofstream(dir / "bad.json") << R"({"policy": {"metric": "MAX_STRAIN", "base_fps": "fast"}})";
    try {
        load_run_config(dir / "bad.json");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.path().find("bad.json") != std::string::npos);
        CHECK(e.path().find("policy.base_fps") != std::string::npos);
    }
    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK_THROWS_AS(load_run_config(dir / "broken.json"), ConfigError);
    CHECK_THROWS_AS(load_run_config(dir / "absent.json"), ConfigError);
}

TEST_CASE("schedule files") {
    const json j = json::parse(R"([
        {"t": 0, "map": {"kind": "translate", "u": 0, "v": 0}},
        {"t": 10, "map": [{"kind": "translate", "u": 1.5, "v": -2},
                          {"kind": "rotate", "theta_deg": 90}]},
        {"t": 20, "map": [{"kind": "translate", "u": 2, "v": 0},
                          {"kind": "rotate", "theta_rad": 0},
                          {"kind": "affine", "du_dx": 0.01, "dv_dy": 0.02},
                          {"kind": "band", "amplitude": 1, "center_y": 30, "width": 5}]}
    ])");
    const auto s = schedule_from_json(j);
    REQUIRE(s.keys().size() == 3);
    CHECK(s.end_time() == 20.0);
    const auto& rot = std::get<Rotation>(s.keys()[1].map.terms()[1]);
    CHECK(rot.theta_rad == doctest::Approx(std::numbers::pi / 2));
    CHECK(schedule_from_json(to_json(s)).keys().size() == 3);
    CHECK(to_json(schedule_from_json(to_json(s))) == to_json(s));

    SUBCASE("errors") {
        auto bad = j;
        bad[1]["map"][0]["kind"] = "shear";
        CHECK_THROWS_WITH_AS(schedule_from_json(bad), doctest::Contains("schedule[1].map[0].kind"), ConfigError);
        bad = j;
        bad[2]["t"] = 5;
        CHECK_THROWS_AS(schedule_from_json(bad), ConfigError);
        bad = j;
        bad[0]["map"]["u"] = 1;
        CHECK_THROWS_AS(schedule_from_json(bad), ConfigError);
        bad = j;
        bad[2]["map"][0]["kind"] = "band";
        bad[2]["map"][0].erase("u");
        bad[2]["map"][0].erase("v");
        CHECK_THROWS_AS(schedule_from_json(bad), ConfigError);
    }
}

TEST_CASE("stats json keeps every value") {
    StrainStats s;
    s.max_eyy = 0.1 + 0.2;
    s.mean_eyy = 1.0 / 3.0;
    s.del_max_eyy = -1e-17;
    s.topk_mean_eyy = {{0.05, 0.123456789012345678}, {0.1, 2e-300}};
    s.del_topk_mean_eyy = {{0.05, -0.5}, {0.1, 0.0}};
    s.valid_pixel_count = 4321;
    CHECK(stats_from_json(json::parse(to_json(s).dump())) == s);
}

TEST_CASE("run identifiers follow the configuration") {
    RunConfig a = scenario_config(64, Metric::MaxStrain);
    RunConfig b = a;
    CHECK(make_run_id(a) == make_run_id(b));
    b.source.seed += 1;
    CHECK(make_run_id(a) != make_run_id(b));
}
