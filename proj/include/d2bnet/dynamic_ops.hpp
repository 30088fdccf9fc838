#pragma once

// Rank-1 dynamic linear/convolution operators and the dense-branch pyramid
// merge. A dynamic operator carries two per-position factor maps (A, B) that
// modulate channels before and after a shared static kernel, so the dynamic
// state per position is 2C scalars instead of a full C*C*J*K kernel.

#include <span>
#include <vector>

#include "d2bnet/kernels.hpp"
#include "d2bnet/tensor.hpp"

namespace d2b::dyn {

// Per-position channel factors; both share the operand's (C,H,W) shape.
struct Rank1Factors {
    Tensor a;  // pre-convolution modulation
    Tensor b;  // post-convolution modulation
};

// Static convolution of a dynamic rank-1 layer. Channel width is preserved
// (square kernel in channels); spatial extents are preserved by symmetric
// zero padding, so only odd kernel sizes are accepted.
struct Rank1ConvLayer {
    Tensor weight;  // (C, C, J, K)
    Tensor bias;    // optional (C)
    void validate() const;
};

// W o (b a^T): out[i,j] = w[i,j] * b[i] * a[j]. w: (m,d), a: (d), b: (m).
Tensor rank1_modulate(const Tensor& w, const Tensor& a, const Tensor& b);

// (W (x o a)) o b -- a forward pass of the modulated layer without ever
// materialising W o (b a^T).
Tensor rank1_linear(const Tensor& w, const Tensor& x, const Tensor& a, const Tensor& b);

// Y = Conv(X o A) o B with same-size padding. Differentiable w.r.t. X, A, B
// and the static kernel.
Tensor rank1_conv(const Tensor& x, const Rank1Factors& factors, const Rank1ConvLayer& layer);

// Conv3x3(P_l) + 2x-upsampled F_above cropped to P_l's extents. F_above may
// be undefined at the topmost level; otherwise its extents must be
// ceil(P_l/2) on both axes.
Tensor merge_pyramid_input(const Tensor& p_l, const Tensor& f_above, const Tensor& lateral_w,
                           const Tensor& lateral_b);

// One inverted-pyramid refinement: rank1_conv over merge_pyramid_input.
Tensor dense_merge_level(const Tensor& p_l, const Tensor& f_above, const Rank1Factors& factors,
                         const Tensor& lateral_w, const Tensor& lateral_b,
                         const Rank1ConvLayer& layer);

// Brute-force position-dependent convolution: kernels holds H*W tensors of
// shape (Co,Ci,J,K) in row-major position order. Verification oracle; the
// result does not participate in autodiff.
Tensor dense_dynamic_conv_reference(const Tensor& x, std::span<const Tensor> kernels, int pad);

// Benchmark form of the oracle: the per-position kernel is generated on the
// fly from the rank-1 pattern of (a, b) at the output position into
// kernel_scratch (C*C*J*K doubles), then applied. y must be zeroed.
void dense_dynamic_conv_rank1_pattern(const double* x, const double* a, const double* b,
                                      const double* w, double* y, const kernels::ConvShape& s,
                                      double* kernel_scratch);

// Parameter-economy accounting, exact integers.
int64_t dynamic_state_per_position(int64_t channels);  // 2C
int64_t unconstrained_kernel_size(int64_t channels, int kh, int kw);  // C*C*J*K

}  // namespace d2b::dyn
