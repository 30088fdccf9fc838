#pragma once

// Reverse-mode differentiable tensor core.
//
// A Tensor is a shared handle to a dense row-major f64 buffer plus an
// optional same-shape gradient buffer. Every op below is differentiable;
// results record their parents and a backward closure, and backward() on a
// one-element tensor accumulates dL/dx additively into every reachable
// gradient buffer. Callers zero gradients between optimisation steps.
//
// Tensors are immutable once used as an op input; mutable_data() is for
// filling freshly created leaves.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace d2b {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorImpl;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor scalar(double value) { return from({1}, {value}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    int64_t dim(int axis) const;
    int64_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();  // leaves only, before first use

    Tensor& requires_grad(bool on = true);
    bool tracks_grad() const;
    std::span<const double> grad() const;  // empty until first accumulation
    void zero_grad();

    double item() const;  // numel() == 1
    void backward() const;

    // -- internal graph plumbing ---------------------------------------
    using BackwardFn =
        std::function<void(std::span<const double> grad_out, std::span<const double> out_data)>;
    // Builds a graph node; `inputs` lists every tensor the closure may
    // accumulate into (non-tracking ones are ignored for traversal).
    static Tensor make(Shape shape, std::vector<double> data,
                       std::vector<Tensor> inputs, BackwardFn backward);
    std::span<double> grad_accum() const;  // allocates the grad buffer

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------
// Element-wise and scalar ops
// ---------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor elementwise_mul(const Tensor& a, const Tensor& b);
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_mul(a, b); }
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor atan2(const Tensor& y, const Tensor& x);
Tensor abs(const Tensor& a);  // subgradient at 0 is 0
Tensor clamp(const Tensor& a, double lo, double hi);

// ---------------------------------------------------------------------
// Linear algebra / structural ops
// ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)
Tensor transpose2d(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);  // 1-d, returns {1}

// x: (C,H,W); w: (Co,Ci,J,K); optional bias (Co).
// Output spatial size: floor((H + 2 pad - J)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad,
              const Tensor& bias = {});

Tensor softmax(const Tensor& a, int axis);
Tensor global_avg_pool(const Tensor& x);       // (C,H,W) -> (C,1,1)
Tensor avg_pool(const Tensor& x, int factor);  // ceil-sized edges averaged over valid taps

Tensor concat(int axis, std::span<const Tensor> parts);
Tensor concat(int axis, std::initializer_list<Tensor> parts);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor reshape(const Tensor& a, Shape shape);
Tensor at(const Tensor& a, int64_t flat_index);  // {1} view, differentiable

// 2x upsampling aligned with stride-2 downsampling: output (i,j) samples the
// input bilinearly at (i/2, j/2) with border clamping, so an impulse at
// (h,w) peaks at (2h,2w) and even output positions copy input values.
Tensor upsample2x_aligned(const Tensor& x);  // (C,H,W) -> (C,2H,2W)

Tensor crop_spatial(const Tensor& x, int64_t h, int64_t w);  // top-left corner

// Bilinear crop of the box [y0,y1]x[x0,x1] (feature-frame units, pixel i
// spans [i,i+1) with its sample at the centre) on an out_h x out_w grid of
// sub-cell centres. Samples outside the map read 0.
Tensor bilinear_crop(const Tensor& x, double y0, double x0, double y1, double x1,
                     int out_h, int out_w);

Tensor scale_channels(const Tensor& x, const Tensor& s);  // (C,H,W) * (C)

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---------------------------------------------------------------------
// Losses (all return {1})
// ---------------------------------------------------------------------

// target entries of -1 are ignored; the mean runs over the rest.
Tensor cross_entropy_map(const Tensor& logits /* (K,H,W) */, std::span<const int> target);
Tensor cross_entropy_vec(const Tensor& logits /* (K) */, int label);
Tensor bce_with_logits_mean(const Tensor& logits, std::span<const double> target);
Tensor l1_loss(const Tensor& pred, const Tensor& target);  // mean |pred - target|
Tensor l1_loss_masked(const Tensor& pred, std::span<const double> target,
                      std::span<const uint8_t> valid);

// ---------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------

struct GradReport {
    std::string op;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
};

// Central finite differences against the analytic gradient of the scalar
// function f at x0. eps must lie in [1e-7, 1e-3]; f must return a
// one-element tensor. Relative error uses max(1, |analytic|, |fd|) as the
// denominator. When max_probes > 0 and x0 is larger, a seeded random subset
// of coordinates is probed.
GradReport grad_check(std::string op_name, const std::function<Tensor(const Tensor&)>& f,
                      const Tensor& x0, double eps, double tol, int max_probes = 0,
                      uint64_t probe_seed = 12345);

// Precondition helper used across the library; throws std::invalid_argument.
void check_arg(bool ok, const std::string& msg);

}  // namespace d2b
