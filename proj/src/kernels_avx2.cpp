// AVX2/FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma on x86-64 only; nothing here may run unless
// kernels::avx2_available() returned true.

#include "d2bnet/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define D2B_HAVE_AVX2_BUILD 1
#include <immintrin.h>
#else
#define D2B_HAVE_AVX2_BUILD 0
#endif

#include <algorithm>

namespace d2b::kernels {

#if D2B_HAVE_AVX2_BUILD

namespace {

// Same shifted row-axpy formulation as the scalar reference. Vector lanes
// cover adjacent output columns, so each output element accumulates its
// (ci, kj, kk) terms in the same order as the scalar kernel; the only
// numerical difference is FMA rounding.
void conv2d_fwd_s1_avx2(const double* x, const double* w, double* y,
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
                        const __m256d wvec = _mm256_set1_pd(wv);
                        int ow = lo;
                        for (; ow + 4 <= hi; ow += 4) {
                            __m256d xv = _mm256_loadu_pd(xrow + ow + shift);
                            __m256d yv = _mm256_loadu_pd(yrow + ow);
                            yv = _mm256_fmadd_pd(wvec, xv, yv);
                            _mm256_storeu_pd(yrow + ow, yv);
                        }
                        for (; ow < hi; ++ow)
                            yrow[ow] += wv * xrow[ow + shift];
                    }
                }
            }
        }
    }
}

void conv2d_bwd_x_s1_avx2(const double* dy, const double* w, double* dx,
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
                        const __m256d wvec = _mm256_set1_pd(wv);
                        int ow = lo;
                        for (; ow + 4 <= hi; ow += 4) {
                            __m256d gv = _mm256_loadu_pd(dyrow + ow);
                            __m256d dv = _mm256_loadu_pd(dxrow + ow + shift);
                            dv = _mm256_fmadd_pd(wvec, gv, dv);
                            _mm256_storeu_pd(dxrow + ow + shift, dv);
                        }
                        for (; ow < hi; ++ow)
                            dxrow[ow + shift] += wv * dyrow[ow];
                    }
                }
            }
        }
    }
}

double dot_avx2_impl(const double* a, const double* b, size_t n) {
    __m256d accv = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d av = _mm256_loadu_pd(a + i);
        __m256d bv = _mm256_loadu_pd(b + i);
        accv = _mm256_fmadd_pd(av, bv, accv);
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, accv);
    double sum = lanes[0] + lanes[1] + lanes[2] + lanes[3];
    for (; i < n; ++i) sum += a[i] * b[i];
    return sum;
}

void conv2d_bwd_w_s1_avx2(const double* dy, const double* x, double* dw,
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
                        if (hi > lo)
                            sum += dot_avx2_impl(dyrow + lo, xrow + lo + shift,
                                                 static_cast<size_t>(hi - lo));
                    }
                    dwbase[kj * s.kw + kk] += sum;
                }
            }
        }
    }
}

void mul_avx2(const double* a, const double* b, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d av = _mm256_loadu_pd(a + i);
        __m256d bv = _mm256_loadu_pd(b + i);
        _mm256_storeu_pd(out + i, _mm256_mul_pd(av, bv));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void add_avx2(const double* a, const double* b, double* out, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d av = _mm256_loadu_pd(a + i);
        __m256d bv = _mm256_loadu_pd(b + i);
        _mm256_storeu_pd(out + i, _mm256_add_pd(av, bv));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_acc_avx2(double* out, const double* a, const double* b, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d av = _mm256_loadu_pd(a + i);
        __m256d bv = _mm256_loadu_pd(b + i);
        __m256d ov = _mm256_loadu_pd(out + i);
        _mm256_storeu_pd(out + i, _mm256_fmadd_pd(av, bv, ov));
    }
    for (; i < n; ++i) out[i] += a[i] * b[i];
}

void acc_avx2(double* out, const double* a, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d av = _mm256_loadu_pd(a + i);
        __m256d ov = _mm256_loadu_pd(out + i);
        _mm256_storeu_pd(out + i, _mm256_add_pd(av, ov));
    }
    for (; i < n; ++i) out[i] += a[i];
}

void axpy_avx2(double* out, double alpha, const double* a, size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d xv = _mm256_loadu_pd(a + i);
        __m256d ov = _mm256_loadu_pd(out + i);
        _mm256_storeu_pd(out + i, _mm256_fmadd_pd(av, xv, ov));
    }
    for (; i < n; ++i) out[i] += alpha * a[i];
}

double dot_avx2(const double* a, const double* b, size_t n) {
    return dot_avx2_impl(a, b, n);
}

}  // namespace

const Ops& avx2_ops() {
    static const Ops ops = {
        "avx2",
        conv2d_fwd_s1_avx2,
        conv2d_bwd_x_s1_avx2,
        conv2d_bwd_w_s1_avx2,
        mul_avx2,
        add_avx2,
        mul_acc_avx2,
        acc_avx2,
        axpy_avx2,
        dot_avx2,
    };
    return ops;
}

bool avx2_compiled() { return true; }

#else

const Ops& avx2_ops() { return scalar_ops(); }
bool avx2_compiled() { return false; }

#endif  // D2B_HAVE_AVX2_BUILD

}  // namespace d2b::kernels
