#include "d2bnet/kernels.hpp"

#include <algorithm>

namespace d2b::kernels {
namespace {

// Stride-1 convolution written as shifted row-axpy: for a fixed (co, ci, kj)
// the inner loop walks a contiguous output row against a contiguous input
// row, which is the same traversal the vector variants use. Zero padding is
// handled by clipping the output-column range instead of testing per tap.
void conv2d_fwd_s1_scalar(const double* x, const double* w, double* y,
                          const ConvShape& s) {
    for (int co = 0; co < s.co; ++co) {
        for (int ci = 0; ci < s.ci; ++ci) {
            const double* wbase = w + ((static_cast<size_t>(co) * s.ci + ci) * s.kh) * s.kw;
            for (int kj = 0; kj < s.kh; ++kj) {
                for (int oh = 0; oh < s.ho; ++oh) {
                    const int ih = oh - s.pad + kj;
                    if (ih < 0 || ih >= s.hi) continue;
                    double* yrow = y + (static_cast<size_t>(co) * s.ho + oh) * s.wo;
                    const double* xrow = x + (static_cast<size_t>(ci) * s.hi + ih) * s.wi;
                    for (int kk = 0; kk < s.kw; ++kk) {
                        const double wv = wbase[kj * s.kw + kk];
                        const int shift = kk - s.pad;
                        const int lo = std::max(0, -shift);
                        const int hi = std::min(s.wo, s.wi - shift);
                        for (int ow = lo; ow < hi; ++ow)
                            yrow[ow] += wv * xrow[ow + shift];
                    }
                }
            }
        }
    }
}

void conv2d_bwd_x_s1_scalar(const double* dy, const double* w, double* dx,
                            const ConvShape& s) {
    for (int co = 0; co < s.co; ++co) {
        for (int ci = 0; ci < s.ci; ++ci) {
            const double* wbase = w + ((static_cast<size_t>(co) * s.ci + ci) * s.kh) * s.kw;
            for (int kj = 0; kj < s.kh; ++kj) {
                for (int oh = 0; oh < s.ho; ++oh) {
                    const int ih = oh - s.pad + kj;
                    if (ih < 0 || ih >= s.hi) continue;
                    const double* dyrow = dy + (static_cast<size_t>(co) * s.ho + oh) * s.wo;
                    double* dxrow = dx + (static_cast<size_t>(ci) * s.hi + ih) * s.wi;
                    for (int kk = 0; kk < s.kw; ++kk) {
                        const double wv = wbase[kj * s.kw + kk];
                        const int shift = kk - s.pad;
                        const int lo = std::max(0, -shift);
                        const int hi = std::min(s.wo, s.wi - shift);
                        for (int ow = lo; ow < hi; ++ow)
                            dxrow[ow + shift] += wv * dyrow[ow];
                    }
                }
            }
        }
    }
}

void conv2d_bwd_w_s1_scalar(const double* dy, const double* x, double* dw,
                            const ConvShape& s) {
    for (int co = 0; co < s.co; ++co) {
        for (int ci = 0; ci < s.ci; ++ci) {
            double* dwbase = dw + ((static_cast<size_t>(co) * s.ci + ci) * s.kh) * s.kw;
            for (int kj = 0; kj < s.kh; ++kj) {
                for (int kk = 0; kk < s.kw; ++kk) {
                    const int shift = kk - s.pad;
                    const int lo = std::max(0, -shift);
                    const int hi = std::min(s.wo, s.wi - shift);
                    double sum = 0.0;
                    for (int oh = 0; oh < s.ho; ++oh) {
                        const int ih = oh - s.pad + kj;
                        if (ih < 0 || ih >= s.hi) continue;
                        const double* dyrow = dy + (static_cast<size_t>(co) * s.ho + oh) * s.wo;
                        const double* xrow = x + (static_cast<size_t>(ci) * s.hi + ih) * s.wi;
                        for (int ow = lo; ow < hi; ++ow)
                            sum += dyrow[ow] * xrow[ow + shift];
                    }
                    dwbase[kj * s.kw + kk] += sum;
                }
            }
        }
    }
}

void mul_scalar(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void add_scalar(const double* a, const double* b, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_acc_scalar(double* out, const double* a, const double* b, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] += a[i] * b[i];
}

void acc_scalar(double* out, const double* a, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] += a[i];
}

void axpy_scalar(double* out, double alpha, const double* a, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] += alpha * a[i];
}

double dot_scalar(const double* a, const double* b, size_t n) {
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) sum += a[i] * b[i];
    return sum;
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops ops = {
        "scalar",
        conv2d_fwd_s1_scalar,
        conv2d_bwd_x_s1_scalar,
        conv2d_bwd_w_s1_scalar,
        mul_scalar,
        add_scalar,
        mul_acc_scalar,
        acc_scalar,
        axpy_scalar,
        dot_scalar,
    };
    return ops;
}

}  // namespace d2b::kernels
