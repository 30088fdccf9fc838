#pragma once

// The two-branched skeleton: an instance branch producing per-level context
// tensors and embedding maps over a feature pyramid, a dense branch folding
// the pyramid into a stride-8 basis map, a ground-truth-driven proposal
// assigner, and the RoI crop.

#include <span>
#include <utility>
#include <vector>

#include "d2bnet/dynamic_ops.hpp"
#include "d2bnet/tensor.hpp"

namespace d2b::branches {

struct BranchConfig {
    int channels = 64;      // C, divisible by 8; also the dense-branch width
    int tower_depth = 2;    // 3x3 conv + tanh blocks in the box tower
    int level_min = 3;      // strides 2^l for l in [level_min, level_max]
    int level_max = 7;
    int dense_width = 64;   // D', width of the basis map F; equals channels here
    int pad_divisibility = 4;
    int attention_bases = 4;    // K
    int attention_factors = 4;  // diagonal entries per basis
    int num_attributes = 2;     // A; 0 disables the attribute head

    void validate() const;
    int num_levels() const { return level_max - level_min + 1; }

    // Instance-embedding slice layout: [t | s | pano | 3d].
    int64_t t_len() const { return static_cast<int64_t>(dense_width) * attention_bases; }
    int64_t s_len() const { return static_cast<int64_t>(attention_bases) * attention_factors; }
    int64_t pano_len() const { return dense_width; }
    int64_t e3d_len() const { return 8 + num_attributes; }
    int64_t embed_dim() const { return t_len() + s_len() + pano_len() + e3d_len(); }
    int64_t t_off() const { return 0; }
    int64_t s_off() const { return t_len(); }
    int64_t pano_off() const { return t_len() + s_len(); }
    int64_t e3d_off() const { return t_len() + s_len() + pano_len(); }
};

// FPN levels level_min..level_max with strides 2^l; consecutive levels halve
// spatial extents (rounding up) and share one channel width.
struct FeaturePyramid {
    int level_min = 3;
    std::vector<Tensor> levels;  // index 0 holds level_min

    int level_max() const { return level_min + static_cast<int>(levels.size()) - 1; }
    static int stride(int level) { return 1 << level; }
    const Tensor& at_level(int level) const;
    void validate() const;
};

struct ConvParam {
    Tensor w;
    Tensor b;
};

struct InstanceBranchParams {
    std::vector<ConvParam> tower;        // shared across levels; 3x3, C -> C
    ConvParam top_embed;                 // 3x3, C -> E
    std::vector<ConvParam> top_context;  // per task; 3x3, C -> 2C
};

struct InstanceLevelOutput {
    Tensor tower_feat;            // (C,H,W) box-tower output, router input
    Tensor embed_map;             // (E,H,W)
    std::vector<Tensor> context;  // per task, (2C,H,W) dynamic tensors
};

// Tower(P_l) shared across levels and tasks, then one 3x3 top projection for
// the embedding map and one per task for the context tensors.
std::vector<InstanceLevelOutput> instance_branch_forward(const FeaturePyramid& pyr,
                                                         const InstanceBranchParams& params);

// Channel halves of a context tensor as (A, B) factors.
dyn::Rank1Factors split_dynamic_tensors(const Tensor& m);

struct Box2D {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
};

struct GtObject2D {
    Box2D box;
    int class_id = 0;
};

struct InstanceProposal {
    Tensor embedding;  // (E) read from the level's embedding map
    Box2D box2d;
    int class_id = 0;
    int level = 0;
    int grid_h = 0, grid_w = 0;
    int instance_index = 0;  // index of the assigned ground-truth object
};

// Level whose size range covers the box's longest side; ranges are
// (0,64], (64,128], (128,256], (256,512], (512,inf) for levels 3..7,
// clamped into [level_min, level_max].
int assign_level(double longest_side, int level_min, int level_max);

// Grid cells of the level whose centres fall inside the box's central half,
// always including the cell containing the box centre. Returns (h, w) pairs.
std::vector<std::pair<int, int>> assign_locations(const Box2D& box, int stride, int64_t grid_h,
                                                  int64_t grid_w);

// Positive-proposal extraction: one proposal per assigned location, carrying
// the embedding read from that level's map. Empty assignments are allowed.
std::vector<InstanceProposal> assign_and_filter(std::span<const Tensor> embed_maps,
                                                int level_min,
                                                std::span<const GtObject2D> gts);

struct DenseTaskParams {
    std::vector<ConvParam> lateral;            // per level; 3x3, C -> C
    std::vector<dyn::Rank1ConvLayer> refine;   // per level
};

// Inverted-pyramid fold from level_max down to level_min; factors are
// indexed like pyramid levels. Output stride is 2^level_min.
Tensor dense_branch_forward(const FeaturePyramid& pyr,
                            std::span<const dyn::Rank1Factors> factors,
                            const DenseTaskParams& params);

// Bilinear crop of a pixel-space box from the stride-`stride` basis map on
// an out_size x out_size grid of sub-cell centres.
Tensor crop_roi(const Tensor& f, const Box2D& box_pixels, int stride = 8, int out_size = 56);

}  // namespace d2b::branches
