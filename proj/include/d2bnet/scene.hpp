#pragma once

// Synthetic scene generator: textured cuboids resting on a ground plane,
// rendered in painter's order with per-pixel class, instance and depth
// labels, plus pinhole intrinsics and 3-D ground truth. Deterministic per
// seed.

#include <vector>

#include "d2bnet/branches.hpp"
#include "d2bnet/geometry.hpp"
#include "d2bnet/metrics.hpp"
#include "d2bnet/tensor.hpp"

namespace d2b::harness {

struct SceneConfig {
    int width = 256;
    int height = 128;
    int min_objects = 1;
    int max_objects = 6;
    int num_stuff = 2;         // 0 = ground, 1 = sky
    int num_thing_classes = 3; // taxonomy ids num_stuff .. num_stuff+2
    int num_attributes = 2;
    double focal = 200.0;
    double camera_height = 1.5;  // metres above the ground plane
    double max_depth = 120.0;        // regression cap; every gt depth stays below it
    double background_depth = 60.0;  // sky and far-ground plateau

    metrics::Taxonomy taxonomy() const { return {num_stuff, num_thing_classes}; }
};

struct GtInstance {
    geom::Box3D box3d;
    branches::Box2D box2d;  // pixel-space hull bounds, clipped to the image
    int class_id = 0;       // taxonomy id
    int attribute = 0;
};

struct SyntheticScene {
    uint64_t seed = 0;
    int width = 0, height = 0;
    geom::CameraIntrinsics intrinsics;
    Tensor image;  // (3,H,W), values in [0,1]
    std::vector<GtInstance> objects;
    metrics::PanopticMap pano;
    std::vector<double> depth;        // h*w, metres in (0, max_depth]
    std::vector<uint8_t> depth_valid; // h*w
};

// Every generated 3-D box projects fully inside the image; occlusion can
// still hide an object entirely in the label maps.
SyntheticScene gen_scene(uint64_t seed, const SceneConfig& cfg);

}  // namespace d2b::harness
