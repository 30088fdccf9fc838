#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "d2bnet/geometry.hpp"

using namespace d2b;
using namespace d2b::geom;

TEST_CASE("project: optical axis, unit camera, homogeneous matrix oracle") {
    const CameraIntrinsics k{210.0, 190.0, 64.0, 48.0};
    const Vec2 axis = project(k, {0.0, 0.0, 7.5});
    CHECK(axis.u == k.u0);
    CHECK(axis.v == k.v0);

    const CameraIntrinsics unit{1.0, 1.0, 0.0, 0.0};
    const Vec2 uv = project(unit, {2.0, 3.0, 1.0});
    CHECK(uv.u == 2.0);
    CHECK(uv.v == 3.0);

    Rng rng(60);
    for (int i = 0; i < 50; ++i) {
        const CameraIntrinsics kr{rng.uniform(20.0, 400.0), rng.uniform(20.0, 400.0),
                                  rng.uniform(-100.0, 400.0), rng.uniform(-100.0, 400.0)};
        const Vec3 p{rng.uniform(-30.0, 30.0), rng.uniform(-30.0, 30.0), rng.uniform(0.2, 90.0)};
        // 3x3 homogeneous multiply, then dehomogenise.
        const double row0[3] = {kr.fx, 0.0, kr.u0};
        const double row1[3] = {0.0, kr.fy, kr.v0};
        const double hu = row0[0] * p.x + row0[1] * p.y + row0[2] * p.z;
        const double hv = row1[0] * p.x + row1[1] * p.y + row1[2] * p.z;
        const Vec2 got = project(kr, p);
        CHECK(std::abs(got.u - hu / p.z) < 1e-12 * std::max(1.0, std::abs(hu / p.z)));
        CHECK(std::abs(got.v - hv / p.z) < 1e-12 * std::max(1.0, std::abs(hv / p.z)));
    }

    CHECK_THROWS(project(k, {0.0, 0.0, 0.0}));
    CHECK_THROWS(project(CameraIntrinsics{0.0, 1.0, 0.0, 0.0}, {0.0, 0.0, 1.0}));
}

TEST_CASE("backproject round-trips") {
    const CameraIntrinsics k{210.0, 190.0, 64.0, 48.0};
    const Vec3 axis = backproject(k, {k.u0, k.v0}, 5.0);
    CHECK(axis.x == 0.0);
    CHECK(axis.y == 0.0);
    CHECK(axis.z == 5.0);

    const CameraIntrinsics unit{1.0, 1.0, 0.0, 0.0};
    const Vec3 p = backproject(unit, {2.0, 3.0}, 1.0);
    CHECK(p.x == 2.0);
    CHECK(p.y == 3.0);

    Rng rng(61);
    for (int i = 0; i < 50; ++i) {
        const CameraIntrinsics kr{rng.uniform(20.0, 400.0), rng.uniform(20.0, 400.0),
                                  rng.uniform(0.0, 300.0), rng.uniform(0.0, 300.0)};
        const double z = rng.uniform(0.1, 120.0);
        const Vec2 uv{rng.uniform(-200.0, 600.0), rng.uniform(-200.0, 600.0)};
        const Vec2 rt = project(kr, backproject(kr, uv, z));
        CHECK(std::abs(rt.u - uv.u) < 1e-10 * std::max(1.0, std::abs(uv.u)));
        CHECK(std::abs(rt.v - uv.v) < 1e-10 * std::max(1.0, std::abs(uv.v)));
    }
    CHECK_THROWS(backproject(k, {1.0, 1.0}, -2.0));
}

TEST_CASE("update_intrinsics: identity, halving, consistency") {
    const CameraIntrinsics k{200.0, 220.0, 100.0, 80.0};
    const CameraIntrinsics same = update_intrinsics(k, 1.0, 0.0, 0.0);
    CHECK(same.fx == k.fx);
    CHECK(same.fy == k.fy);
    CHECK(same.u0 == k.u0);
    CHECK(same.v0 == k.v0);

    CHECK(update_intrinsics(k, 0.5, 0.0, 0.0).fx == 100.0);

    Rng rng(62);
    for (int i = 0; i < 200; ++i) {
        const double s = rng.uniform(0.5, 1.0);
        const double x0 = rng.uniform(0.0, 60.0), y0 = rng.uniform(0.0, 60.0);
        const Vec3 p{rng.uniform(-20.0, 20.0), rng.uniform(-10.0, 10.0), rng.uniform(0.5, 80.0)};
        const CameraIntrinsics k2 = update_intrinsics(k, s, x0, y0);
        const Vec2 a = project(k2, p);
        const Vec2 b = project(k, p);
        CHECK(std::abs(a.u - (s * b.u - x0)) < 1e-10 * std::max(1.0, std::abs(a.u)));
        CHECK(std::abs(a.v - (s * b.v - y0)) < 1e-10 * std::max(1.0, std::abs(a.v)));
    }
}

TEST_CASE("box_corners: unit cube, quarter-turn footprint, template oracle") {
    Box3D cube;
    cube.center = {0.0, 0.0, 10.0};
    cube.h = cube.w = cube.l = 1.0;
    cube.yaw = 0.0;
    const auto corners = box_corners(cube);
    for (const auto& c : corners) {
        CHECK(std::abs(std::abs(c.x) - 0.5) < 1e-15);
        CHECK(std::abs(std::abs(c.y) - 0.5) < 1e-15);
        CHECK(std::abs(std::abs(c.z - 10.0) - 0.5) < 1e-15);
    }

    // A quarter turn swaps the footprint extents of l and w.
    Box3D slab = cube;
    slab.l = 4.0;
    slab.w = 2.0;
    const auto flat = box_corners(slab);
    slab.yaw = std::numbers::pi / 2.0;
    const auto turned = box_corners(slab);
    const auto extent = [](const auto& cs, bool along_x) {
        double lo = 1e30, hi = -1e30;
        for (const auto& c : cs) {
            const double v = along_x ? c.x : c.z;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        return hi - lo;
    };
    CHECK(extent(flat, true) == doctest::Approx(4.0));
    CHECK(extent(turned, true) == doctest::Approx(2.0));
    CHECK(extent(turned, false) == doctest::Approx(4.0));

    Rng rng(63);
    for (int i = 0; i < 40; ++i) {
        Box3D b;
        b.center = {rng.uniform(-10.0, 10.0), rng.uniform(-3.0, 3.0), rng.uniform(2.0, 60.0)};
        b.h = rng.uniform(0.5, 3.0);
        b.w = rng.uniform(0.5, 3.0);
        b.l = rng.uniform(0.5, 5.0);
        b.yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
        const auto got = box_corners(b);

        // rotate(R_yaw) * template + center, written out directly.
        const double c = std::cos(b.yaw), s = std::sin(b.yaw);
        double cx = 0.0, cy = 0.0, cz = 0.0;
        for (size_t ci = 0; ci < 8; ++ci) {
            const double dl = 0.5 * kCornerSigns[ci][0] * b.l;
            const double dh = 0.5 * kCornerSigns[ci][1] * b.h;
            const double dw = 0.5 * kCornerSigns[ci][2] * b.w;
            const double ex = b.center.x + c * dl + s * dw;
            const double ey = b.center.y + dh;
            const double ez = b.center.z - s * dl + c * dw;
            CHECK(std::abs(got[ci].x - ex) < 1e-12);
            CHECK(std::abs(got[ci].y - ey) < 1e-12);
            CHECK(std::abs(got[ci].z - ez) < 1e-12);
            cx += got[ci].x;
            cy += got[ci].y;
            cz += got[ci].z;
        }
        CHECK(std::abs(cx / 8 - b.center.x) < 1e-12);
        CHECK(std::abs(cy / 8 - b.center.y) < 1e-12);
        CHECK(std::abs(cz / 8 - b.center.z) < 1e-12);

        // The twelve edges realise each of h, w, l exactly four times.
        int count_h = 0, count_w = 0, count_l = 0;
        for (size_t a = 0; a < 8; ++a)
            for (size_t b2 = a + 1; b2 < 8; ++b2) {
                int differing = 0;
                for (int d = 0; d < 3; ++d)
                    if (kCornerSigns[a][d] != kCornerSigns[b2][d]) ++differing;
                if (differing != 1) continue;  // not an edge
                const double len = std::hypot(got[a].x - got[b2].x, got[a].y - got[b2].y,
                                              got[a].z - got[b2].z);
                if (std::abs(len - b.h) < 1e-9) ++count_h;
                if (std::abs(len - b.w) < 1e-9) ++count_w;
                if (std::abs(len - b.l) < 1e-9) ++count_l;
            }
        CHECK(count_h >= 4);
        CHECK(count_w >= 4);
        CHECK(count_l >= 4);
        CHECK(count_h + count_w + count_l == 12);
    }
}

TEST_CASE("alpha/yaw conversions") {
    CHECK(alpha_to_yaw(0.7, {0.0, 0.0, 12.0}) == 0.7);
    CHECK(alpha_to_yaw(0.0, {5.0, 0.0, 5.0}) ==
          doctest::Approx(std::numbers::pi / 4.0).epsilon(1e-15));
    Rng rng(64);
    for (int i = 0; i < 50; ++i) {
        const Vec3 p{rng.uniform(-20.0, 20.0), rng.uniform(-5.0, 5.0), rng.uniform(0.5, 60.0)};
        const double alpha = rng.uniform(-2.0, 2.0);
        CHECK(std::abs(yaw_to_alpha(alpha_to_yaw(alpha, p), p) - alpha) < 1e-12);
    }
}

TEST_CASE("relative crop: full-image ratio, bounds, determinism") {
    const CropParams full = crop_from_ratio(1.0, 0.37, 0.81, 256, 128);
    CHECK(full.crop_w == 256);
    CHECK(full.crop_h == 128);
    CHECK(full.x0 == 0.0);
    CHECK(full.y0 == 0.0);
    CHECK(full.scale == 1.0);

    Rng rng(65);
    for (int i = 0; i < 1000; ++i) {
        const CropParams p = relative_crop_params(rng, 256, 128);
        CHECK(p.crop_w >= 128);
        CHECK(p.crop_w <= 256);
        CHECK(p.crop_h >= 64);
        CHECK(p.crop_h <= 128);
        CHECK(p.x0 >= 0.0);
        CHECK(p.x0 <= 256.0 - p.crop_w);
        CHECK(p.y0 >= 0.0);
        CHECK(p.y0 <= 128.0 - p.crop_h);
    }

    Rng a(9), b(9);
    const CropParams pa = relative_crop_params(a, 100, 80);
    const CropParams pb = relative_crop_params(b, 100, 80);
    CHECK(pa.crop_w == pb.crop_w);
    CHECK(pa.x0 == pb.x0);
    CHECK(pa.y0 == pb.y0);
}

TEST_CASE("intrinsics JSON round-trip") {
    const CameraIntrinsics k{123.5, 130.25, 64.0, 32.0};
    const CameraIntrinsics back = intrinsics_from_json(intrinsics_to_json(k));
    CHECK(back.fx == k.fx);
    CHECK(back.fy == k.fy);
    CHECK(back.u0 == k.u0);
    CHECK(back.v0 == k.v0);
}
