#pragma once

// Low-level numeric kernels on raw f64 buffers.
//
// Every kernel has a scalar reference implementation and, on x86-64, an
// AVX2/FMA variant. The active set is chosen once at startup from CPUID and
// can be overridden with the D2B_ISA environment variable ("scalar", "avx2",
// "auto") or kernels::set_active(). The two sets are equivalence-tested
// against each other; everything above this layer is ISA-agnostic.

#include <cstddef>
#include <string>
#include <string_view>

namespace d2b::kernels {

// Shape descriptor for the 2-D convolution kernels. Layouts: x is CHW,
// w is (co, ci, kh, kw), y is CHW, all row-major contiguous.
struct ConvShape {
    int ci = 0, hi = 0, wi = 0;
    int co = 0, ho = 0, wo = 0;
    int kh = 0, kw = 0;
    int stride = 1, pad = 0;
};

struct Ops {
    const char* name;

    // y must be zero-initialised by the caller; stride must be 1.
    void (*conv2d_fwd_s1)(const double* x, const double* w, double* y,
                          const ConvShape& s);
    // dx += dL/dx, dw += dL/dw; stride must be 1.
    void (*conv2d_bwd_x_s1)(const double* dy, const double* w, double* dx,
                            const ConvShape& s);
    void (*conv2d_bwd_w_s1)(const double* dy, const double* x, double* dw,
                            const ConvShape& s);

    // Element-wise primitives over n contiguous doubles.
    void (*mul)(const double* a, const double* b, double* out, size_t n);
    void (*add)(const double* a, const double* b, double* out, size_t n);
    void (*mul_acc)(double* out, const double* a, const double* b, size_t n);
    void (*acc)(double* out, const double* a, size_t n);
    void (*axpy)(double* out, double alpha, const double* a, size_t n);
    double (*dot)(const double* a, const double* b, size_t n);
};

const Ops& scalar_ops();

// True when AVX2+FMA kernels are compiled in and supported by this CPU.
bool avx2_available();
const Ops& avx2_ops();  // only meaningful when avx2_available()

// Active set; honours D2B_ISA on first use.
const Ops& active();
// name: "scalar", "avx2" or "auto". Throws std::invalid_argument on others
// or when the requested ISA is unavailable.
void set_active(std::string_view name);
std::string active_name();

// Generic-stride convolution paths (scalar only; stride-1 calls dispatch to
// the active ISA). y zeroed by caller for fwd; bwd variants accumulate.
void conv2d_fwd(const double* x, const double* w, double* y, const ConvShape& s);
void conv2d_bwd_x(const double* dy, const double* w, double* dx, const ConvShape& s);
void conv2d_bwd_w(const double* dy, const double* x, double* dw, const ConvShape& s);

}  // namespace d2b::kernels
