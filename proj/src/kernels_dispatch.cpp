#include "d2bnet/kernels.hpp"

#include <cstdlib>
#include <stdexcept>

namespace d2b::kernels {

bool avx2_compiled();  // defined in kernels_avx2.cpp

bool avx2_available() {
#if defined(__x86_64__) || defined(_M_X64)
    static const bool ok =
        avx2_compiled() && __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return ok;
#else
    return false;
#endif
}

namespace {

const Ops* resolve(std::string_view name) {
    if (name == "scalar") return &scalar_ops();
    if (name == "avx2") {
        if (!avx2_available())
            throw std::invalid_argument("avx2 kernels not available on this machine");
        return &avx2_ops();
    }
    if (name == "auto") return avx2_available() ? &avx2_ops() : &scalar_ops();
    throw std::invalid_argument("unknown kernel ISA: " + std::string(name));
}

const Ops*& active_slot() {
    static const Ops* slot = [] {
        const char* env = std::getenv("D2B_ISA");
        return resolve(env ? std::string_view(env) : std::string_view("auto"));
    }();
    return slot;
}

}  // namespace

const Ops& active() { return *active_slot(); }

void set_active(std::string_view name) { active_slot() = resolve(name); }

std::string active_name() { return active().name; }

namespace {

// Generic-stride fallbacks, direct transcription of the definition. Only the
// stride-1 case is performance relevant.
void conv2d_fwd_generic(const double* x, const double* w, double* y, const ConvShape& s) {
    for (int co = 0; co < s.co; ++co)
        for (int oh = 0; oh < s.ho; ++oh)
            for (int ow = 0; ow < s.wo; ++ow) {
                double sum = 0.0;
                for (int ci = 0; ci < s.ci; ++ci)
                    for (int kj = 0; kj < s.kh; ++kj)
                        for (int kk = 0; kk < s.kw; ++kk) {
                            const int ih = oh * s.stride - s.pad + kj;
                            const int iw = ow * s.stride - s.pad + kk;
                            if (ih < 0 || ih >= s.hi || iw < 0 || iw >= s.wi) continue;
                            sum += w[((static_cast<size_t>(co) * s.ci + ci) * s.kh + kj) * s.kw + kk] *
                                   x[(static_cast<size_t>(ci) * s.hi + ih) * s.wi + iw];
                        }
                y[(static_cast<size_t>(co) * s.ho + oh) * s.wo + ow] += sum;
            }
}

void conv2d_bwd_x_generic(const double* dy, const double* w, double* dx, const ConvShape& s) {
    for (int co = 0; co < s.co; ++co)
        for (int oh = 0; oh < s.ho; ++oh)
            for (int ow = 0; ow < s.wo; ++ow) {
                const double g = dy[(static_cast<size_t>(co) * s.ho + oh) * s.wo + ow];
                for (int ci = 0; ci < s.ci; ++ci)
                    for (int kj = 0; kj < s.kh; ++kj)
                        for (int kk = 0; kk < s.kw; ++kk) {
                            const int ih = oh * s.stride - s.pad + kj;
                            const int iw = ow * s.stride - s.pad + kk;
                            if (ih < 0 || ih >= s.hi || iw < 0 || iw >= s.wi) continue;
                            dx[(static_cast<size_t>(ci) * s.hi + ih) * s.wi + iw] +=
                                g * w[((static_cast<size_t>(co) * s.ci + ci) * s.kh + kj) * s.kw + kk];
                        }
            }
}

void conv2d_bwd_w_generic(const double* dy, const double* x, double* dw, const ConvShape& s) {
    for (int co = 0; co < s.co; ++co)
        for (int oh = 0; oh < s.ho; ++oh)
            for (int ow = 0; ow < s.wo; ++ow) {
                const double g = dy[(static_cast<size_t>(co) * s.ho + oh) * s.wo + ow];
                for (int ci = 0; ci < s.ci; ++ci)
                    for (int kj = 0; kj < s.kh; ++kj)
                        for (int kk = 0; kk < s.kw; ++kk) {
                            const int ih = oh * s.stride - s.pad + kj;
                            const int iw = ow * s.stride - s.pad + kk;
                            if (ih < 0 || ih >= s.hi || iw < 0 || iw >= s.wi) continue;
                            dw[((static_cast<size_t>(co) * s.ci + ci) * s.kh + kj) * s.kw + kk] +=
                                g * x[(static_cast<size_t>(ci) * s.hi + ih) * s.wi + iw];
                        }
            }
}

}  // namespace

void conv2d_fwd(const double* x, const double* w, double* y, const ConvShape& s) {
    if (s.stride == 1)
        active().conv2d_fwd_s1(x, w, y, s);
    else
        conv2d_fwd_generic(x, w, y, s);
}

void conv2d_bwd_x(const double* dy, const double* w, double* dx, const ConvShape& s) {
    if (s.stride == 1)
        active().conv2d_bwd_x_s1(dy, w, dx, s);
    else
        conv2d_bwd_x_generic(dy, w, dx, s);
}

void conv2d_bwd_w(const double* dy, const double* x, double* dw, const ConvShape& s) {
    if (s.stride == 1)
        active().conv2d_bwd_w_s1(dy, x, dw, s);
    else
        conv2d_bwd_w_generic(dy, x, dw, s);
}

}  // namespace d2b::kernels
