#include "doctest.h"

#include <cmath>

#include "isod/flow.hpp"
#include "support.hpp"

using namespace isod;

namespace {

GrayImage from_fn(int w, int h, auto&& f) {
    Raster<double> px(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) px(x, y) = f(static_cast<double>(x), static_cast<double>(y));
    return GrayImage(std::move(px));
}

DisplacementField affine_field(const Roi& roi, double a11, double a12, double a21, double a22, Vec2 c) {
    DisplacementField d(roi);
    for (int y = 0; y < roi.height; ++y)
        for (int x = 0; x < roi.width; ++x) {
            const double X = roi.x0 + x - c.x;
            const double Y = roi.y0 + y - c.y;
            d.u(x, y) = a11 * X + a12 * Y;
            d.v(x, y) = a21 * X + a22 * Y;
        }
    return d;
}

} // namespace

TEST_CASE("spatial gradients") {
    const Roi region{1, 1, 30, 20};
    SUBCASE("linear ramp") {
        const auto img = from_fn(32, 22, [](double x, double) { return x / 32.0; });
        const auto [ix, iy] = spatial_gradients(img, region);
        for (double v : ix.values()) CHECK(v == doctest::Approx(1.0 / 32.0).epsilon(1e-12));
        for (double v : iy.values()) CHECK(v == 0.0);
    }
    SUBCASE("constant image") {
        const auto img = from_fn(32, 22, [](double, double) { return 0.4; });
        const auto [ix, iy] = spatial_gradients(img, region);
        for (double v : ix.values()) CHECK(v == 0.0);
        for (double v : iy.values()) CHECK(v == 0.0);
    }
    SUBCASE("quadratic in y") {
        const double h = 22.0;
        const auto img = from_fn(32, 22, [&](double, double y) { return y * y / (h * h); });
        const auto [ix, iy] = spatial_gradients(img, region);
        for (int y = 0; y < region.height; ++y)
            for (int x = 0; x < region.width; ++x)
                CHECK(iy(x, y) == doctest::Approx(2.0 * (y + 1) / (h * h)).epsilon(1e-12));
    }
    SUBCASE("region touching the border is rejected") {
        const auto img = from_fn(32, 22, [](double, double) { return 0.0; });
        CHECK_THROWS_AS(spatial_gradients(img, Roi{0, 1, 5, 5}), DimensionError);
    }
}

TEST_CASE("temporal gradient") {
    const auto ref = from_fn(24, 24, [](double x, double y) { return 0.3 + 0.01 * x + 0.002 * y; });
    const Roi region{2, 2, 20, 20};
    SUBCASE("identical frames") {
        for (double v : temporal_gradient(ref, ref, region).values()) CHECK(v == 0.0);
    }
    SUBCASE("brightness offset") {
        const auto def = from_fn(24, 24, [](double x, double y) { return 0.4 + 0.01 * x + 0.002 * y; });
        for (double v : temporal_gradient(ref, def, region).values()) CHECK(v == doctest::Approx(0.1));
    }
    SUBCASE("shifted ramp") {
        const double w = 24.0, u0 = 0.4;
        const auto a = from_fn(24, 24, [&](double x, double) { return x / w; });
        const auto b = from_fn(24, 24, [&](double x, double) { return (x - u0) / w; });
        for (double v : temporal_gradient(a, b, region).values()) CHECK(v == doctest::Approx(-u0 / w));
    }
}

TEST_CASE("window solve") {
    SUBCASE("aperture problem is degenerate") {
        const double w = 16.0;
        GradientField g{Raster<double>(7, 7, 1.0 / w), Raster<double>(7, 7, 0.0), Raster<double>(7, 7, -0.5 / w)};
        CHECK(solve_lk_window(g, 3, 3, 1, 1e-4).degenerate);
    }
    SUBCASE("zero temporal change gives zero motion") {
        GradientField g{Raster<double>(7, 7, 0.2), Raster<double>(7, 7), Raster<double>(7, 7, 0.0)};
        for (int y = 0; y < 7; ++y)
            for (int x = 0; x < 7; ++x) g.iy(x, y) = (x + y) % 2 ? -0.2 : 0.2;
        const auto s = solve_lk_window(g, 3, 3, 1, 1e-4);
        REQUIRE_FALSE(s.degenerate);
        CHECK(s.u == 0.0);
        CHECK(s.v == 0.0);
    }
    SUBCASE("quadratic texture under a 0.3 px shift") {
        auto tex = [](double x, double y) {
            const double X = x - 8.0, Y = y - 8.0;
            return 0.5 + 0.004 * X * X + 0.006 * Y * Y + 0.003 * X * Y + 0.02 * X - 0.01 * Y;
        };
        const auto ref = from_fn(17, 17, tex);
        const auto def = from_fn(17, 17, [&](double x, double y) { return tex(x - 0.3, y); });
        const Roi region{1, 1, 15, 15};
        auto [ix, iy] = spatial_gradients(ref, region);
        GradientField g{std::move(ix), std::move(iy), temporal_gradient(ref, def, region)};
        const auto s = solve_lk_window(g, 7, 7, 2, 1e-8);
        REQUIRE_FALSE(s.degenerate);
        CHECK(std::abs(s.u - 0.3) <= 0.05);
        CHECK(std::abs(s.v) <= 0.05);
    }
}

TEST_CASE("dense solve on speckle") {
    const auto ref = generate_speckle(test::dense_speckle(96, 96));
    const Roi roi = test::inner_roi(96, 96, 16);
    FlowConfig cfg;
    cfg.window_half = 2;

    SUBCASE("identical frames give zero displacement in one iteration") {
        const auto d = solve_dense(ref, ref, roi, cfg);
        CHECK(test::flow_error(d, 0, 0).validity >= 0.95);
        for (std::size_t i = 0; i < d.valid.size(); ++i) {
            if (!d.valid.data()[i]) continue;
            CHECK(d.u.data()[i] == 0.0);
            CHECK(d.v.data()[i] == 0.0);
            CHECK(d.iterations_used.data()[i] <= 1);
        }
    }
    SUBCASE("subpixel translation") {
        const auto def = test::warped(ref, DisplacementMap::translation(0.4, -0.2));
        const auto e = test::flow_error(solve_dense(ref, def, roi, cfg), 0.4, -0.2);
        CHECK(e.validity >= 0.95);
        CHECK(std::abs(e.mean_u - 0.4) <= 0.05);
        CHECK(std::abs(e.mean_v + 0.2) <= 0.05);
    }
    SUBCASE("integer shift with a pyramid is recovered uniformly") {
        cfg.pyramid_levels = 3;
        const auto def = test::warped(ref, DisplacementMap::translation(3, 2));
        const auto e = test::flow_error(solve_dense(ref, def, roi, cfg), 3, 2);
        CHECK(e.validity >= 0.9);
        CHECK(e.rms <= 0.1);
    }
    SUBCASE("single linear step is available") {
        cfg.max_iterations = 1;
        const auto def = test::warped(ref, DisplacementMap::translation(0.2, 0.1));
        const auto d = solve_dense(ref, def, roi, cfg);
        for (std::size_t i = 0; i < d.valid.size(); ++i)
            if (d.valid.data()[i]) CHECK(d.iterations_used.data()[i] == 1);
        CHECK(test::flow_error(d, 0.2, 0.1).rms <= 0.1);
    }
    SUBCASE("brightness offset biases the result") {
        auto def = test::warped(ref, DisplacementMap::translation(0.3, 0.0));
        const auto clean = test::flow_error(solve_dense(ref, def, roi, cfg), 0.3, 0.0);
        for (double& p : def.pixels.values()) p += 0.05;
        const auto biased = test::flow_error(solve_dense(ref, def, roi, cfg), 0.3, 0.0);
        CHECK(biased.rms > 3.0 * clean.rms);
        CHECK(biased.rms > 0.05);
    }
    SUBCASE("deterministic") {
        const auto def = test::warped(ref, DisplacementMap::translation(0.7, 0.3));
        CHECK(solve_dense(ref, def, roi, cfg) == solve_dense(ref, def, roi, cfg));
    }
    SUBCASE("ROI inside the margin is rejected") {
        CHECK_THROWS_AS(solve_dense(ref, ref, Roi{1, 10, 20, 20}, cfg), DimensionError);
    }
}

TEST_CASE("textureless windows are invalid") {
    auto spec = test::dense_speckle(64, 64);
    const auto speckle = generate_speckle(spec);
    Raster<double> px = speckle.pixels;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 32; ++x) px(x, y) = 0.6;
    const GrayImage ref(std::move(px));
    FlowConfig cfg;
    const Roi roi = test::inner_roi(64, 64, 4);
    const auto d = solve_dense(ref, ref, roi, cfg);
    for (int y = 0; y < roi.height; ++y)
        for (int x = 0; x + roi.x0 + cfg.window_half + 1 < 32; ++x) CHECK(d.valid(x, y) == 0);
}

TEST_CASE("block matching agreement") {
    const auto ref = generate_speckle(test::dense_speckle(64, 64, 11));
    const auto def = test::warped(ref, DisplacementMap::translation(3, 2));
    FlowConfig cfg;
    cfg.window_half = 2;
    cfg.pyramid_levels = 3;
    const Roi roi = test::inner_roi(64, 64, 8);
    const auto d = solve_dense(ref, def, roi, cfg);
    std::size_t valid = 0, agree = 0;
    for (int y = 0; y < roi.height; y += 3)
        for (int x = 0; x < roi.width; x += 3) {
            if (!d.valid(x, y)) continue;
            ++valid;
            const auto [bx, by] = test::ssd_match(ref, def, roi.x0 + x, roi.y0 + y);
            agree += std::abs(d.u(x, y) - bx) <= 0.5 && std::abs(d.v(x, y) - by) <= 0.5;
        }
    REQUIRE(valid > 100);
    CHECK(static_cast<double>(agree) / static_cast<double>(valid) >= 0.9);
}

TEST_CASE("accumulating displacement fields") {
    const Roi roi{10, 10, 40, 40};
    const Vec2 c{29.5, 29.5};

    SUBCASE("zero total leaves the increment") {
        const auto inc = affine_field(roi, 0.01, 0.0, 0.0, -0.02, c);
        const auto out = accumulate(DisplacementField(roi), inc);
        CHECK(out.u == inc.u);
        CHECK(out.v == inc.v);
    }
    SUBCASE("translations add") {
        auto t1 = affine_field(roi, 0, 0, 0, 0, c);
        auto t2 = t1;
        for (auto& v : t1.u.values()) v = 0.3;
        for (auto& v : t1.v.values()) v = -0.5;
        for (auto& v : t2.u.values()) v = 0.25;
        for (auto& v : t2.v.values()) v = 0.75;
        const auto out = accumulate(t1, t2);
        for (int y = 0; y < roi.height - 1; ++y)
            for (int x = 1; x < roi.width; ++x) {
                if (!out.valid(x, y)) continue;
                CHECK(out.u(x, y) == doctest::Approx(0.55).epsilon(1e-12));
                CHECK(out.v(x, y) == doctest::Approx(0.25).epsilon(1e-12));
            }
        CHECK(out.valid_count() > roi.area() * 9 / 10);
    }
    SUBCASE("stretches compose multiplicatively") {
        const double a = 0.01, b = 0.02;
        const auto out = accumulate(affine_field(roi, 0, 0, 0, a, c), affine_field(roi, 0, 0, 0, b, c));
        const double expect = (1 + a) * (1 + b) - 1;
        int checked = 0;
        for (int y = 1; y + 1 < roi.height; ++y)
            for (int x = 0; x < roi.width; ++x)
                if (out.valid(x, y - 1) && out.valid(x, y + 1)) {
                    CHECK(std::abs(0.5 * (out.v(x, y + 1) - out.v(x, y - 1)) - expect) <= 1e-3);
                    ++checked;
                }
        CHECK(checked > 500);
    }
    SUBCASE("invalid increment propagates") {
        auto inc = affine_field(roi, 0, 0, 0, 0, c);
        inc.valid(5, 5) = 0;
        const auto out = accumulate(DisplacementField(roi), inc);
        CHECK(out.valid(5, 5) == 0);
    }
}
