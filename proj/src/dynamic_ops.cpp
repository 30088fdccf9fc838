#include "d2bnet/dynamic_ops.hpp"

namespace d2b::dyn {

void Rank1ConvLayer::validate() const {
    check_arg(weight.defined() && weight.rank() == 4,
              "rank1 conv layer: weight must be (C,C,J,K)");
    check_arg(weight.dim(0) == weight.dim(1),
              "rank1 conv layer: kernel must be square in channels, got " +
                  shape_str(weight.shape()));
    check_arg(weight.dim(2) % 2 == 1 && weight.dim(3) % 2 == 1,
              "rank1 conv layer: same-size padding requires odd kernel extents");
    if (bias.defined())
        check_arg(bias.rank() == 1 && bias.dim(0) == weight.dim(0),
                  "rank1 conv layer: bias length must match channel width");
}

Tensor rank1_modulate(const Tensor& w, const Tensor& a, const Tensor& b) {
    check_arg(w.rank() == 2, "rank1_modulate: w must be a matrix");
    check_arg(a.rank() == 1 && a.dim(0) == w.dim(1),
              "rank1_modulate: a must have length " + std::to_string(w.dim(1)));
    check_arg(b.rank() == 1 && b.dim(0) == w.dim(0),
              "rank1_modulate: b must have length " + std::to_string(w.dim(0)));
    const Tensor outer = matmul(reshape(b, {b.dim(0), 1}), reshape(a, {1, a.dim(0)}));
    return mul(w, outer);
}

Tensor rank1_linear(const Tensor& w, const Tensor& x, const Tensor& a, const Tensor& b) {
    check_arg(w.rank() == 2, "rank1_linear: w must be a matrix");
    check_arg(x.rank() == 1 && x.dim(0) == w.dim(1), "rank1_linear: x length mismatch");
    check_arg(a.rank() == 1 && a.dim(0) == w.dim(1), "rank1_linear: a length mismatch");
    check_arg(b.rank() == 1 && b.dim(0) == w.dim(0), "rank1_linear: b length mismatch");
    const Tensor pre = mul(x, a);
    const Tensor out = reshape(matmul(w, reshape(pre, {pre.dim(0), 1})), {w.dim(0)});
    return mul(out, b);
}

Tensor rank1_conv(const Tensor& x, const Rank1Factors& factors, const Rank1ConvLayer& layer) {
    layer.validate();
    check_arg(x.rank() == 3, "rank1_conv: input must be (C,H,W)");
    check_arg(factors.a.defined() && factors.b.defined() && factors.a.shape() == x.shape() &&
                  factors.b.shape() == x.shape(),
              "rank1_conv: factors must share the input shape " + shape_str(x.shape()));
    check_arg(layer.weight.dim(1) == x.dim(0), "rank1_conv: channel width mismatch");
    // conv2d takes a single pad for both axes, so the kernel must be square
    // in space as well; every use here is 1x1 or 3x3.
    check_arg(layer.weight.dim(2) == layer.weight.dim(3),
              "rank1_conv: kernel must be square in space");
    const int pad = static_cast<int>(layer.weight.dim(2) / 2);
    return mul(conv2d(mul(x, factors.a), layer.weight, 1, pad, layer.bias), factors.b);
}

Tensor merge_pyramid_input(const Tensor& p_l, const Tensor& f_above, const Tensor& lateral_w,
                           const Tensor& lateral_b) {
    check_arg(p_l.rank() == 3, "merge_pyramid_input: P_l must be (C,H,W)");
    Tensor lateral = conv2d(p_l, lateral_w, 1, 1, lateral_b);
    if (!f_above.defined()) return lateral;
    const int64_t h = p_l.dim(1), w = p_l.dim(2);
    check_arg(f_above.dim(1) == (h + 1) / 2 && f_above.dim(2) == (w + 1) / 2,
              "merge_pyramid_input: upper level must have ceil-half extents, got " +
                  shape_str(f_above.shape()) + " above " + shape_str(p_l.shape()));
    Tensor up = upsample2x_aligned(f_above);
    if (up.dim(1) != h || up.dim(2) != w) up = crop_spatial(up, h, w);
    return add(lateral, up);
}

Tensor dense_merge_level(const Tensor& p_l, const Tensor& f_above, const Rank1Factors& factors,
                         const Tensor& lateral_w, const Tensor& lateral_b,
                         const Rank1ConvLayer& layer) {
    return rank1_conv(merge_pyramid_input(p_l, f_above, lateral_w, lateral_b), factors, layer);
}

Tensor dense_dynamic_conv_reference(const Tensor& x, std::span<const Tensor> kernels, int pad) {
    check_arg(x.rank() == 3, "dense_dynamic_conv_reference: input must be (C,H,W)");
    const int64_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    check_arg(static_cast<int64_t>(kernels.size()) == h * w,
              "dense_dynamic_conv_reference: need one kernel per position");
    const Tensor& k0 = kernels[0];
    check_arg(k0.rank() == 4 && k0.dim(1) == ci,
              "dense_dynamic_conv_reference: kernel shape mismatch");
    const int64_t co = k0.dim(0), kh = k0.dim(2), kw = k0.dim(3);
    std::vector<double> out(static_cast<size_t>(co * h * w), 0.0);
    for (int64_t oh = 0; oh < h; ++oh)
        for (int64_t ow = 0; ow < w; ++ow) {
            const Tensor& k = kernels[static_cast<size_t>(oh * w + ow)];
            check_arg(k.shape() == k0.shape(),
                      "dense_dynamic_conv_reference: kernels must share one shape");
            for (int64_t o = 0; o < co; ++o) {
                double acc = 0.0;
                for (int64_t i = 0; i < ci; ++i)
                    for (int64_t j = 0; j < kh; ++j)
                        for (int64_t q = 0; q < kw; ++q) {
                            const int64_t ih = oh - pad + j;
                            const int64_t iw = ow - pad + q;
                            if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                            acc += k.data()[((o * ci + i) * kh + j) * kw + q] *
                                   x.data()[(i * h + ih) * w + iw];
                        }
                out[(o * h + oh) * w + ow] = acc;
            }
        }
    return Tensor::from({co, h, w}, std::move(out));
}

void dense_dynamic_conv_rank1_pattern(const double* x, const double* a, const double* b,
                                      const double* w, double* y, const kernels::ConvShape& s,
                                      double* kernel_scratch) {
    const size_t ktaps = static_cast<size_t>(s.kh) * s.kw;
    const size_t plane = static_cast<size_t>(s.hi) * s.wi;
    for (int oh = 0; oh < s.ho; ++oh)
        for (int ow = 0; ow < s.wo; ++ow) {
            const size_t pos = static_cast<size_t>(oh) * s.wo + ow;
            // Materialise this position's kernel: W[o,i,j,k] * b[o] * a[i].
            size_t idx = 0;
            for (int o = 0; o < s.co; ++o) {
                const double bo = b[static_cast<size_t>(o) * plane + pos];
                for (int i = 0; i < s.ci; ++i) {
                    const double f = bo * a[static_cast<size_t>(i) * plane + pos];
                    for (size_t t = 0; t < ktaps; ++t, ++idx)
                        kernel_scratch[idx] = w[idx] * f;
                }
            }
            // Apply it.
            for (int o = 0; o < s.co; ++o) {
                double acc = 0.0;
                const double* kbase = kernel_scratch + static_cast<size_t>(o) * s.ci * ktaps;
                for (int i = 0; i < s.ci; ++i)
                    for (int j = 0; j < s.kh; ++j)
                        for (int q = 0; q < s.kw; ++q) {
                            const int ih = oh - s.pad + j;
                            const int iw = ow - s.pad + q;
                            if (ih < 0 || ih >= s.hi || iw < 0 || iw >= s.wi) continue;
                            acc += kbase[(static_cast<size_t>(i) * s.kh + j) * s.kw + q] *
                                   x[(static_cast<size_t>(i) * s.hi + ih) * s.wi + iw];
                        }
                y[(static_cast<size_t>(o) * s.ho + oh) * s.wo + ow] = acc;
            }
        }
}

int64_t dynamic_state_per_position(int64_t channels) { return 2 * channels; }

int64_t unconstrained_kernel_size(int64_t channels, int kh, int kw) {
    return channels * channels * kh * kw;
}

}  // namespace d2b::dyn
