#include "d2bnet/geometry.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "d2bnet/tensor.hpp"  // check_arg

namespace d2b::geom {

void CameraIntrinsics::validate() const {
    check_arg(fx > 0.0 && fy > 0.0, "camera intrinsics: focal lengths must be positive");
}

Vec2 project(const CameraIntrinsics& k, const Vec3& p) {
    k.validate();
    check_arg(p.z > 0.0, "project: point behind the camera (z <= 0)");
    return {k.fx * p.x / p.z + k.u0, k.fy * p.y / p.z + k.v0};
}

Vec3 backproject(const CameraIntrinsics& k, const Vec2& px, double z) {
    k.validate();
    check_arg(z > 0.0, "backproject: depth must be positive");
    return {(px.u - k.u0) * z / k.fx, (px.v - k.v0) * z / k.fy, z};
}

CameraIntrinsics update_intrinsics(const CameraIntrinsics& k, double s, double x0, double y0) {
    check_arg(s > 0.0, "update_intrinsics: scale must be positive");
    return {k.fx * s, k.fy * s, k.u0 * s - x0, k.v0 * s - y0};
}

const std::array<std::array<double, 3>, 8> kCornerSigns = {{
    {+1, +1, +1},
    {+1, +1, -1},
    {+1, -1, +1},
    {+1, -1, -1},
    {-1, +1, +1},
    {-1, +1, -1},
    {-1, -1, +1},
    {-1, -1, -1},
}};

std::array<Vec3, 8> box_corners(const Box3D& b) {
    check_arg(b.h > 0.0 && b.w > 0.0 && b.l > 0.0, "box_corners: dimensions must be positive");
    check_arg(b.center.z > 0.0, "box_corners: box must be in front of the camera");
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    std::array<Vec3, 8> out;
    for (size_t i = 0; i < 8; ++i) {
        const double dl = 0.5 * kCornerSigns[i][0] * b.l;  // heading
        const double dh = 0.5 * kCornerSigns[i][1] * b.h;  // vertical (y down)
        const double dw = 0.5 * kCornerSigns[i][2] * b.w;  // lateral
        // R_y(yaw) * (dl, dh, dw)
        out[i] = {b.center.x + c * dl + s * dw, b.center.y + dh,
                  b.center.z - s * dl + c * dw};
    }
    return out;
}

double alpha_to_yaw(double alpha, const Vec3& center) {
    check_arg(center.z > 0.0, "alpha_to_yaw: z must be positive");
    return alpha + std::atan2(center.x, center.z);
}

double yaw_to_alpha(double yaw, const Vec3& center) {
    check_arg(center.z > 0.0, "yaw_to_alpha: z must be positive");
    return yaw - std::atan2(center.x, center.z);
}

CropParams crop_from_ratio(double ratio, double u1, double u2, int image_w, int image_h) {
    check_arg(ratio >= 0.5 && ratio <= 1.0, "crop_from_ratio: ratio must lie in [0.5, 1]");
    CropParams p;
    p.scale = 1.0;
    p.crop_w = std::max(1, static_cast<int>(std::lround(ratio * image_w)));
    p.crop_h = std::max(1, static_cast<int>(std::lround(ratio * image_h)));
    p.x0 = u1 * static_cast<double>(image_w - p.crop_w);
    p.y0 = u2 * static_cast<double>(image_h - p.crop_h);
    return p;
}

CropParams relative_crop_params(Rng& rng, int image_w, int image_h) {
    const double ratio = rng.uniform(0.5, 1.0);
    const double u1 = rng.uniform();
    const double u2 = rng.uniform();
    return crop_from_ratio(ratio, u1, u2, image_w, image_h);
}

std::string intrinsics_to_json(const CameraIntrinsics& k) {
    nlohmann::json j;
    j["fx"] = k.fx;
    j["fy"] = k.fy;
    j["u0"] = k.u0;
    j["v0"] = k.v0;
    return j.dump();
}

CameraIntrinsics intrinsics_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    CameraIntrinsics k{j.at("fx"), j.at("fy"), j.at("u0"), j.at("v0")};
    k.validate();
    return k;
}

}  // namespace d2b::geom
