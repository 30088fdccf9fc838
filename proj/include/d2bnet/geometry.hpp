#pragma once

// Pinhole camera math and 3-D box geometry.
//
// Camera frame convention: x right, y down, z forward (optical axis); yaw
// rotates about the vertical (y) axis. Box dimensions are (h, w, l) with l
// along the heading direction, w lateral and h vertical.

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "d2bnet/rng.hpp"

namespace d2b::geom {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;
};

struct Vec2 {
    double u = 0.0, v = 0.0;
};

struct CameraIntrinsics {
    double fx = 0.0, fy = 0.0, u0 = 0.0, v0 = 0.0;
    void validate() const;  // fx > 0, fy > 0
};

struct Box3D {
    Vec3 center;                    // metres, camera frame; z > 0
    double h = 0.0, w = 0.0, l = 0.0;  // metres, all > 0
    double yaw = 0.0;               // radians about the vertical axis
    std::optional<int> attribute;
};

// u = fx*x/z + u0, v = fy*y/z + v0. Rejects z <= 0.
Vec2 project(const CameraIntrinsics& k, const Vec3& p);

// Inverse of project at the given depth. Rejects z <= 0.
Vec3 backproject(const CameraIntrinsics& k, const Vec2& px, double z);

// Intrinsics after resizing the image by s and cropping at (x0, y0) pixels:
// focal lengths scale by s, principal point maps to (u0*s - x0, v0*s - y0).
CameraIntrinsics update_intrinsics(const CameraIntrinsics& k, double s, double x0, double y0);

// Corner-sign table shared by every corner construction. Row i holds
// (sign_l, sign_h, sign_w); corners are center + R_yaw * (sl*l/2, sh*h/2, sw*w/2).
extern const std::array<std::array<double, 3>, 8> kCornerSigns;

// The 8 cuboid corners in the fixed kCornerSigns order.
std::array<Vec3, 8> box_corners(const Box3D& b);

// Global yaw from the observation angle: yaw = alpha + atan2(x, z).
double alpha_to_yaw(double alpha, const Vec3& center);
double yaw_to_alpha(double yaw, const Vec3& center);

struct CropParams {
    double scale = 1.0;         // resize ratio s consumed by update_intrinsics
    double x0 = 0.0, y0 = 0.0;  // crop offsets in resized pixels
    int crop_w = 0, crop_h = 0;
};

// Deterministic core of the crop sampler: ratio in [0.5, 1], placement
// fractions u1, u2 in [0, 1). ratio == 1 yields the full image at (0, 0).
CropParams crop_from_ratio(double ratio, double u1, double u2, int image_w, int image_h);

// Relative crop with side ratio uniform in [0.5, 1.0] of the image and
// placement uniform within bounds; scale stays 1 (crop-only augmentation).
CropParams relative_crop_params(Rng& rng, int image_w, int image_h);

// Intrinsics JSON {"fx":..,"fy":..,"u0":..,"v0":..}.
std::string intrinsics_to_json(const CameraIntrinsics& k);
CameraIntrinsics intrinsics_from_json(const std::string& text);

}  // namespace d2b::geom
