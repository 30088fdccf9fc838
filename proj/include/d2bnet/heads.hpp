#pragma once

// Task heads: factored-attention instance masks, the unified panoptic layer,
// monocular-3D regression with the disentangled corner loss, the dense depth
// head, and the weighted total loss.

#include <optional>
#include <span>
#include <string>

#include "d2bnet/branches.hpp"
#include "d2bnet/geometry.hpp"
#include "d2bnet/tensor.hpp"

namespace d2b::heads {

// Instance-specific segmentation embedding e_seg = [t : s].
struct SegEmbedding {
    Tensor t;  // (D'*K) flattened 1x1 projection kernel
    Tensor s;  // (K*4) diagonal attention factors
};

// Attention components shared by all instances.
struct AttentionBasis {
    Tensor u;  // (K, 4, N)
    Tensor v;  // (K, 4, N)
};

// R' = t * R projected to K channels; each attention map Q_k = U_k^T S_k V_k
// (N x N) is aligned-bilinearly upsampled to the crop size; the mask logits
// are sum_k R'_k o Q_k. The crop must be (D', 4N, 4N).
Tensor factored_attention_mask(const Tensor& crop, const SegEmbedding& e,
                               const AttentionBasis& basis);

// Per-instance parameter counts: the factored head carries only the 16
// diagonal entries versus a full N*N*K attention tensor.
int64_t per_instance_attention_params(const branches::BranchConfig& cfg);
int64_t full_attention_params(const branches::BranchConfig& cfg, int attn_size = 14);

// Arithmetic mean of the proposals' embeddings for one instance.
Tensor aggregate_instance_embeddings(std::span<const Tensor> embeddings);

// Y = W_pano^T F with W_pano = [W_stuff | thing embeddings]. thing
// embeddings are (D') vectors, one column per ground-truth instance.
Tensor panoptic_logits(const Tensor& f, const Tensor& w_stuff,
                       std::span<const Tensor> thing_embeddings);

// Decoded 3-D regression state; tensors stay connected to the graph.
struct Decoded3D {
    Tensor loc;          // (3) camera-frame centre
    Tensor dims;         // (3) (h,w,l) after the exponential map
    Tensor alpha;        // (1) observation angle
    Tensor attr_logits;  // (A), undefined when attributes are disabled
    geom::Box3D box;     // plain snapshot with global yaw composed
};

// e3d layout: [c_x, c_y, z_inst, h, w, l, sin a, cos a, a_1..a_A]. Centre
// offsets are in grid units of the proposal's level; instance depth is
// z_inst + GAP(crop)^T w_z. Returns nullopt (with a reason) when the decode
// is invalid: non-positive depth or a degenerate orientation vector.
std::optional<Decoded3D> decode_3d(const Tensor& e3d, double loc_u, double loc_v, int stride,
                                   const geom::CameraIntrinsics& k, const Tensor& crop,
                                   const Tensor& w_z, std::string* reject_reason = nullptr);

// Differentiable mirror of geom::box_corners: (8,3) corners from loc (3),
// dims (3) = (h,w,l) and observation angle alpha (1); the global yaw is
// alpha + atan2(x, z).
Tensor corners_from_params(const Tensor& loc, const Tensor& dims, const Tensor& alpha);

struct CornerLossTerms {
    Tensor loc;  // group {loc} from the prediction, rest from ground truth
    Tensor dim;
    Tensor ori;
};

// L1 over the 24 corner coordinates, one term per parameter group. The
// reference corners are built through corners_from_params on the ground
// truth so an unperturbed group contributes exactly zero.
CornerLossTerms corner_loss_terms(const Decoded3D& pred, const geom::Box3D& gt);

// Corner terms plus attribute cross-entropy when both sides carry attributes.
Tensor corner_loss(const Decoded3D& pred, const geom::Box3D& gt);

struct DepthHeadParams {
    branches::ConvParam conv0;  // D' -> D'
    branches::ConvParam conv1;  // D' -> D'
    branches::ConvParam conv2;  // D' -> 1
};

inline constexpr double kDepthFloor = 1e-3;
inline constexpr double kDepthCeil = 120.0;

// Three (3x3 conv, aligned 2x upsample) stages from the stride-8 basis map
// to a single-channel stride-1 map, clamped to (0, 120].
Tensor depth_head(const Tensor& f, const DepthHeadParams& params);

struct LossWeights {
    double lambda_3d = 0.4;
    double dim_scale = 2.0;  // alpha
    double loc_scale = 0.5;  // beta
};

// Undefined components count as zero. The attribute loss rides inside the
// 3-D bracket with unit weight.
struct LossComponents {
    Tensor fcos, ctr, dim, ori, loc, attr, mask, pano, depth;
};

// L = fcos + lambda_3d*(ctr + alpha*dim + ori + beta*loc + attr)
//       + mask + pano + depth.
// Throws std::runtime_error naming the first non-finite component.
Tensor total_loss(const LossComponents& c, const LossWeights& w = {});

}  // namespace d2b::heads
