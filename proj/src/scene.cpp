#include "d2bnet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "d2bnet/rng.hpp"

namespace d2b::harness {

namespace {

struct Pt {
    double x, y;
};

// Monotone-chain convex hull; returns vertices in counter-clockwise order.
std::vector<Pt> convex_hull(std::vector<Pt> pts) {
    std::sort(pts.begin(), pts.end(), [](const Pt& a, const Pt& b) {
        return a.x != b.x ? a.x < b.x : a.y < b.y;
    });
    const auto cross = [](const Pt& o, const Pt& a, const Pt& b) {
        return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    };
    std::vector<Pt> hull(2 * pts.size());
    size_t k = 0;
    for (const Pt& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

bool inside_hull(const std::vector<Pt>& hull, double x, double y) {
    for (size_t i = 0; i < hull.size(); ++i) {
        const Pt& a = hull[i];
        const Pt& b = hull[(i + 1) % hull.size()];
        if ((b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x) < 0.0) return false;
    }
    return true;
}

}  // namespace

SyntheticScene gen_scene(uint64_t seed, const SceneConfig& cfg) {
    check_arg(cfg.min_objects >= 0 && cfg.max_objects >= cfg.min_objects,
              "gen_scene: bad object-count range");
    Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);

    SyntheticScene scene;
    scene.seed = seed;
    scene.width = cfg.width;
    scene.height = cfg.height;
    scene.intrinsics = {cfg.focal, cfg.focal, 0.5 * cfg.width, 0.5 * cfg.height};
    const geom::CameraIntrinsics& k = scene.intrinsics;

    const int n_objects = rng.uniform_int(cfg.min_objects, cfg.max_objects);
    std::vector<std::vector<Pt>> hulls;
    for (int i = 0; i < n_objects; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
            geom::Box3D box;
            box.h = rng.uniform(1.0, 2.4);
            box.w = rng.uniform(0.8, 2.0);
            box.l = rng.uniform(1.2, 4.0);
            box.yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
            const double z = rng.uniform(8.0, 40.0);
            // Rests on the ground plane y = camera_height (y points down).
            box.center = {0.0, cfg.camera_height - 0.5 * box.h, z};
            const double reach = 0.5 * std::hypot(box.l, box.w);
            const double x_lim = (0.5 * cfg.width - 4.0) * z / k.fx - reach;
            if (x_lim <= 0.0) continue;
            box.center.x = rng.uniform(-x_lim, x_lim);

            const auto corners = geom::box_corners(box);
            std::vector<Pt> pts;
            bool ok = true;
            for (const auto& c : corners) {
                const geom::Vec2 uv = geom::project(k, c);
                if (uv.u < 1.0 || uv.u > cfg.width - 1.0 || uv.v < 1.0 ||
                    uv.v > cfg.height - 1.0) {
                    ok = false;
                    break;
                }
                pts.push_back({uv.u, uv.v});
            }
            if (!ok) continue;

            GtInstance inst;
            inst.box3d = box;
            inst.box3d.attribute = (i + static_cast<int>(seed)) % std::max(1, cfg.num_attributes);
            inst.class_id = cfg.num_stuff + rng.uniform_int(0, cfg.num_thing_classes - 1);
            inst.attribute = *inst.box3d.attribute;
            double x1 = 1e30, y1 = 1e30, x2 = -1e30, y2 = -1e30;
            for (const Pt& p : pts) {
                x1 = std::min(x1, p.x);
                y1 = std::min(y1, p.y);
                x2 = std::max(x2, p.x);
                y2 = std::max(y2, p.y);
            }
            inst.box2d = {x1, y1, x2, y2};
            scene.objects.push_back(inst);
            hulls.push_back(convex_hull(pts));
            placed = true;
        }
    }

    check_arg(cfg.background_depth > 0.0 && cfg.background_depth <= cfg.max_depth,
              "gen_scene: background depth must lie in (0, max_depth]");

    // Background: ground plane below the horizon, sky above, both shaded.
    const int64_t npix = static_cast<int64_t>(cfg.height) * cfg.width;
    std::vector<double> image(static_cast<size_t>(3 * npix), 0.0);
    scene.depth.assign(static_cast<size_t>(npix), cfg.background_depth);
    scene.depth_valid.assign(static_cast<size_t>(npix), 1);
    scene.pano.h = cfg.height;
    scene.pano.w = cfg.width;
    scene.pano.class_id.assign(static_cast<size_t>(npix), 1);
    scene.pano.instance_id.assign(static_cast<size_t>(npix), 0);

    for (int v = 0; v < cfg.height; ++v)
        for (int u = 0; u < cfg.width; ++u) {
            const size_t p = static_cast<size_t>(v) * cfg.width + u;
            const double vc = v + 0.5, uc = u + 0.5;
            double ground_z = -1.0;
            if (vc > k.v0 + 1e-9) ground_z = k.fy * cfg.camera_height / (vc - k.v0);
            if (ground_z > 0.0 && ground_z <= cfg.background_depth) {
                scene.pano.class_id[p] = 0;
                scene.depth[p] = ground_z;
                const double checker =
                    ((static_cast<int>(uc / 8) + static_cast<int>(ground_z / 4)) % 2) ? 0.08 : 0.0;
                image[0 * npix + p] = 0.25 + checker;
                image[1 * npix + p] = 0.45 + checker;
                image[2 * npix + p] = 0.2;
            } else {
                scene.pano.class_id[p] = 1;  // sky / far background plateau
                scene.depth[p] = cfg.background_depth;
                const double t = vc / cfg.height;
                image[0 * npix + p] = 0.35 + 0.1 * t;
                image[1 * npix + p] = 0.55 + 0.1 * t;
                image[2 * npix + p] = 0.85;
            }
        }

    // Painter's order: far objects first so near ones overwrite them.
    std::vector<size_t> order(scene.objects.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return scene.objects[a].box3d.center.z > scene.objects[b].box3d.center.z;
    });
    for (size_t oi : order) {
        const GtInstance& inst = scene.objects[oi];
        const std::vector<Pt>& hull = hulls[oi];
        const double base_r = 0.55 + 0.15 * ((inst.class_id * 7 + 1) % 3);
        const double base_g = 0.25 + 0.2 * ((inst.class_id * 5 + static_cast<int>(oi)) % 3);
        const double base_b = 0.3 + 0.18 * (static_cast<int>(oi) % 4);
        const int v0p = std::max(0, static_cast<int>(std::floor(inst.box2d.y1)));
        const int v1p = std::min(cfg.height - 1, static_cast<int>(std::ceil(inst.box2d.y2)));
        const int u0p = std::max(0, static_cast<int>(std::floor(inst.box2d.x1)));
        const int u1p = std::min(cfg.width - 1, static_cast<int>(std::ceil(inst.box2d.x2)));
        for (int v = v0p; v <= v1p; ++v)
            for (int u = u0p; u <= u1p; ++u) {
                if (!inside_hull(hull, u + 0.5, v + 0.5)) continue;
                const size_t p = static_cast<size_t>(v) * cfg.width + u;
                scene.pano.class_id[p] = inst.class_id;
                scene.pano.instance_id[p] = static_cast<int32_t>(oi) + 1;
                scene.depth[p] = inst.box3d.center.z;
                const double tex = ((u / 4 + v / 4) % 2) ? 0.1 : -0.05;
                image[0 * npix + p] = std::clamp(base_r + tex, 0.0, 1.0);
                image[1 * npix + p] = std::clamp(base_g + tex, 0.0, 1.0);
                image[2 * npix + p] = std::clamp(base_b + tex, 0.0, 1.0);
            }
    }

    scene.image = Tensor::from({3, cfg.height, cfg.width}, std::move(image));
    return scene;
}

}  // namespace d2b::harness
