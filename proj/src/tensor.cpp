#include "d2bnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <unordered_set>

#include "d2bnet/kernels.hpp"

namespace d2b {

void check_arg(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool track = false;
    std::vector<Tensor> parents;
    Tensor::BackwardFn backward;
};
}  // namespace detail

using detail::TensorImpl;

// ---------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    impl->shape = std::move(shape);
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    check_arg(static_cast<int64_t>(data.size()) == shape_numel(shape),
              "tensor data length " + std::to_string(data.size()) +
                  " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int64_t Tensor::dim(int axis) const { return impl_->shape.at(static_cast<size_t>(axis)); }
int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

Tensor& Tensor::requires_grad(bool on) {
    impl_->track = on;
    return *this;
}

bool Tensor::tracks_grad() const { return impl_ && impl_->track; }

std::span<const double> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

std::span<double> Tensor::grad_accum() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

double Tensor::item() const {
    check_arg(numel() == 1, "item() requires a one-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::make(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                    BackwardFn backward) {
    Tensor out = from(std::move(shape), std::move(data));
    std::vector<Tensor> tracked;
    for (const Tensor& t : inputs)
        if (t.defined() && t.tracks_grad()) tracked.push_back(t);
    if (!tracked.empty()) {
        out.impl_->track = true;
        out.impl_->parents = std::move(tracked);
        out.impl_->backward = std::move(backward);
    }
    return out;
}

void Tensor::backward() const {
    check_arg(numel() == 1, "backward() requires a one-element tensor");
    // Post-order DFS over tracked parents, then run closures in reverse.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    if (!impl_->track) return;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* p = node->parents[next++].impl_.get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    grad_accum()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward && !node->grad.empty())
            node->backward(node->grad, node->data);
    }
}

// ---------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check_arg(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Strides of `axis` in a row-major layout: (outer runs, axis extent, inner).
struct AxisSplit {
    int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
    AxisSplit r;
    r.n = s[static_cast<size_t>(axis)];
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

Tensor unary_op(const Tensor& a, double (*fwd)(double), double (*dfdx)(double x, double y)) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v = fwd(v);
    return Tensor::make(
        a.shape(), std::move(out), {a},
        [a, dfdx](std::span<const double> g, std::span<const double> y) {
            if (!a.tracks_grad()) return;
            auto ga = a.grad_accum();
            auto x = a.data();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
        });
}

}  // namespace

// ---------------------------------------------------------------------
// Element-wise ops
// ---------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const size_t n = a.data().size();
    std::vector<double> out(n);
    kernels::active().add(a.data().data(), b.data().data(), out.data(), n);
    return Tensor::make(a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const double> g, std::span<const double>) {
                            if (a.tracks_grad())
                                kernels::active().acc(a.grad_accum().data(), g.data(), g.size());
                            if (b.tracks_grad())
                                kernels::active().acc(b.grad_accum().data(), g.data(), g.size());
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const size_t n = a.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor::make(a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const double> g, std::span<const double>) {
                            if (a.tracks_grad())
                                kernels::active().acc(a.grad_accum().data(), g.data(), g.size());
                            if (b.tracks_grad())
                                kernels::active().axpy(b.grad_accum().data(), -1.0, g.data(), g.size());
                        });
}

Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "elementwise_mul");
    const size_t n = a.data().size();
    std::vector<double> out(n);
    kernels::active().mul(a.data().data(), b.data().data(), out.data(), n);
    return Tensor::make(
        a.shape(), std::move(out), {a, b},
        [a, b](std::span<const double> g, std::span<const double>) {
            if (a.tracks_grad())
                kernels::active().mul_acc(a.grad_accum().data(), g.data(), b.data().data(), g.size());
            if (b.tracks_grad())
                kernels::active().mul_acc(b.grad_accum().data(), g.data(), a.data().data(), g.size());
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    const size_t n = a.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] / b.data()[i];
    return Tensor::make(a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const double> g, std::span<const double> y) {
                            auto bd = b.data();
                            if (a.tracks_grad()) {
                                auto ga = a.grad_accum();
                                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bd[i];
                            }
                            if (b.tracks_grad()) {
                                auto gb = b.grad_accum();
                                for (size_t i = 0; i < g.size(); ++i)
                                    gb[i] -= g[i] * y[i] / bd[i];
                            }
                        });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v += c;
    return Tensor::make(a.shape(), std::move(out), {a},
                        [a](std::span<const double> g, std::span<const double>) {
                            if (a.tracks_grad())
                                kernels::active().acc(a.grad_accum().data(), g.data(), g.size());
                        });
}

Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= c;
    return Tensor::make(a.shape(), std::move(out), {a},
                        [a, c](std::span<const double> g, std::span<const double>) {
                            if (a.tracks_grad())
                                kernels::active().axpy(a.grad_accum().data(), c, g.data(), g.size());
                        });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Tensor sin(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Tensor abs(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor atan2(const Tensor& y, const Tensor& x) {
    check_same_shape(y, x, "atan2");
    const size_t n = y.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = std::atan2(y.data()[i], x.data()[i]);
    return Tensor::make(y.shape(), std::move(out), {y, x},
                        [y, x](std::span<const double> g, std::span<const double>) {
                            auto yd = y.data();
                            auto xd = x.data();
                            for (size_t i = 0; i < g.size(); ++i) {
                                const double r2 = yd[i] * yd[i] + xd[i] * xd[i];
                                if (y.tracks_grad()) y.grad_accum()[i] += g[i] * xd[i] / r2;
                                if (x.tracks_grad()) x.grad_accum()[i] -= g[i] * yd[i] / r2;
                            }
                        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    check_arg(lo < hi, "clamp: lo must be < hi");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v = std::min(std::max(v, lo), hi);
    return Tensor::make(a.shape(), std::move(out), {a},
                        [a, lo, hi](std::span<const double> g, std::span<const double>) {
                            if (!a.tracks_grad()) return;
                            auto ga = a.grad_accum();
                            auto x = a.data();
                            for (size_t i = 0; i < g.size(); ++i)
                                if (x[i] > lo && x[i] < hi) ga[i] += g[i];
                        });
}

// ---------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_arg(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
    check_arg(a.dim(1) == b.dim(0), "matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
            const double av = a.data()[i * k + p];
            kernels::active().axpy(out.data() + i * n, av, b.data().data() + p * n,
                                   static_cast<size_t>(n));
        }
    return Tensor::make(
        {m, n}, std::move(out), {a, b},
        [a, b, m, k, n](std::span<const double> g, std::span<const double>) {
            if (a.tracks_grad()) {
                auto ga = a.grad_accum();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p)
                        ga[i * k + p] += kernels::active().dot(
                            g.data() + i * n, b.data().data() + p * n, static_cast<size_t>(n));
            }
            if (b.tracks_grad()) {
                auto gb = b.grad_accum();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p)
                        kernels::active().axpy(gb.data() + p * n, a.data()[i * k + p],
                                               g.data() + i * n, static_cast<size_t>(n));
            }
        });
}

Tensor transpose2d(const Tensor& a) {
    check_arg(a.rank() == 2, "transpose2d: rank-2 tensor required");
    const int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return Tensor::make({n, m}, std::move(out), {a},
                        [a, m, n](std::span<const double> g, std::span<const double>) {
                            if (!a.tracks_grad()) return;
                            auto ga = a.grad_accum();
                            for (int64_t i = 0; i < m; ++i)
                                for (int64_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                        });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    check_arg(a.rank() == 1 && b.rank() == 1 && a.dim(0) == b.dim(0),
              "dot: equal-length 1-d tensors required");
    const double v = kernels::active().dot(a.data().data(), b.data().data(), a.data().size());
    return Tensor::make({1}, {v}, {a, b},
                        [a, b](std::span<const double> g, std::span<const double>) {
                            if (a.tracks_grad())
                                kernels::active().axpy(a.grad_accum().data(), g[0],
                                                       b.data().data(), b.data().size());
                            if (b.tracks_grad())
                                kernels::active().axpy(b.grad_accum().data(), g[0],
                                                       a.data().data(), a.data().size());
                        });
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad, const Tensor& bias) {
    check_arg(x.rank() == 3, "conv2d: input must be (C,H,W), got " + shape_str(x.shape()));
    check_arg(w.rank() == 4, "conv2d: weights must be (Co,Ci,J,K), got " + shape_str(w.shape()));
    check_arg(x.dim(0) == w.dim(1), "conv2d: input channels " + std::to_string(x.dim(0)) +
                                        " do not match kernel channels " + std::to_string(w.dim(1)));
    check_arg(pad >= 0, "conv2d: pad must be >= 0");
    check_arg(stride >= 1, "conv2d: stride must be >= 1");

    kernels::ConvShape s;
    s.ci = static_cast<int>(x.dim(0));
    s.hi = static_cast<int>(x.dim(1));
    s.wi = static_cast<int>(x.dim(2));
    s.co = static_cast<int>(w.dim(0));
    s.kh = static_cast<int>(w.dim(2));
    s.kw = static_cast<int>(w.dim(3));
    s.stride = stride;
    s.pad = pad;
    check_arg(s.hi + 2 * pad >= s.kh && s.wi + 2 * pad >= s.kw,
              "conv2d: padded input smaller than kernel");
    s.ho = (s.hi + 2 * pad - s.kh) / stride + 1;
    s.wo = (s.wi + 2 * pad - s.kw) / stride + 1;
    if (bias.defined())
        check_arg(bias.rank() == 1 && bias.dim(0) == s.co,
                  "conv2d: bias must be (Co), got " + shape_str(bias.shape()));

    std::vector<double> out(static_cast<size_t>(s.co) * s.ho * s.wo, 0.0);
    kernels::conv2d_fwd(x.data().data(), w.data().data(), out.data(), s);
    if (bias.defined()) {
        const size_t plane = static_cast<size_t>(s.ho) * s.wo;
        for (int c = 0; c < s.co; ++c) {
            const double bv = bias.data()[static_cast<size_t>(c)];
            for (size_t i = 0; i < plane; ++i) out[c * plane + i] += bv;
        }
    }
    return Tensor::make(
        {s.co, s.ho, s.wo}, std::move(out), {x, w, bias},
        [x, w, bias, s](std::span<const double> g, std::span<const double>) {
            if (x.tracks_grad())
                kernels::conv2d_bwd_x(g.data(), w.data().data(), x.grad_accum().data(), s);
            if (w.tracks_grad())
                kernels::conv2d_bwd_w(g.data(), x.data().data(), w.grad_accum().data(), s);
            if (bias.defined() && bias.tracks_grad()) {
                auto gb = bias.grad_accum();
                const size_t plane = static_cast<size_t>(s.ho) * s.wo;
                for (int c = 0; c < s.co; ++c) {
                    double acc = 0.0;
                    for (size_t i = 0; i < plane; ++i) acc += g[c * plane + i];
                    gb[static_cast<size_t>(c)] += acc;
                }
            }
        });
}

// ---------------------------------------------------------------------
// Shape / structure ops
// ---------------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    check_arg(axis >= 0 && axis < a.rank(),
              "softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
    const AxisSplit ax = split_axis(a.shape(), axis);
    std::vector<double> out(a.data().begin(), a.data().end());
    for (int64_t o = 0; o < ax.outer; ++o)
        for (int64_t in = 0; in < ax.inner; ++in) {
            double mx = -1e300;
            for (int64_t i = 0; i < ax.n; ++i)
                mx = std::max(mx, out[(o * ax.n + i) * ax.inner + in]);
            double z = 0.0;
            for (int64_t i = 0; i < ax.n; ++i) {
                double& v = out[(o * ax.n + i) * ax.inner + in];
                v = std::exp(v - mx);
                z += v;
            }
            for (int64_t i = 0; i < ax.n; ++i) out[(o * ax.n + i) * ax.inner + in] /= z;
        }
    return Tensor::make(a.shape(), std::move(out), {a},
                        [a, ax](std::span<const double> g, std::span<const double> y) {
                            if (!a.tracks_grad()) return;
                            auto ga = a.grad_accum();
                            for (int64_t o = 0; o < ax.outer; ++o)
                                for (int64_t in = 0; in < ax.inner; ++in) {
                                    double gy = 0.0;
                                    for (int64_t i = 0; i < ax.n; ++i) {
                                        const size_t idx = (o * ax.n + i) * ax.inner + in;
                                        gy += g[idx] * y[idx];
                                    }
                                    for (int64_t i = 0; i < ax.n; ++i) {
                                        const size_t idx = (o * ax.n + i) * ax.inner + in;
                                        ga[idx] += y[idx] * (g[idx] - gy);
                                    }
                                }
                        });
}

Tensor global_avg_pool(const Tensor& x) {
    check_arg(x.rank() == 3, "global_avg_pool: input must be (C,H,W)");
    const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> out(static_cast<size_t>(c), 0.0);
    for (int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += x.data()[ch * hw + i];
        out[static_cast<size_t>(ch)] = acc / static_cast<double>(hw);
    }
    return Tensor::make({c, 1, 1}, std::move(out), {x},
                        [x, c, hw](std::span<const double> g, std::span<const double>) {
                            if (!x.tracks_grad()) return;
                            auto gx = x.grad_accum();
                            for (int64_t ch = 0; ch < c; ++ch) {
                                const double gv = g[static_cast<size_t>(ch)] / static_cast<double>(hw);
                                for (int64_t i = 0; i < hw; ++i) gx[ch * hw + i] += gv;
                            }
                        });
}

Tensor avg_pool(const Tensor& x, int factor) {
    check_arg(x.rank() == 3, "avg_pool: input must be (C,H,W)");
    check_arg(factor >= 1, "avg_pool: factor must be >= 1");
    const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int64_t ho = (h + factor - 1) / factor, wo = (w + factor - 1) / factor;
    std::vector<double> out(static_cast<size_t>(c * ho * wo), 0.0);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oh = 0; oh < ho; ++oh)
            for (int64_t ow = 0; ow < wo; ++ow) {
                const int64_t h1 = std::min(h, (oh + 1) * static_cast<int64_t>(factor));
                const int64_t w1 = std::min(w, (ow + 1) * static_cast<int64_t>(factor));
                double acc = 0.0;
                for (int64_t ih = oh * factor; ih < h1; ++ih)
                    for (int64_t iw = ow * factor; iw < w1; ++iw)
                        acc += x.data()[(ch * h + ih) * w + iw];
                const int64_t cnt = (h1 - oh * factor) * (w1 - ow * factor);
                out[(ch * ho + oh) * wo + ow] = acc / static_cast<double>(cnt);
            }
    return Tensor::make(
        {c, ho, wo}, std::move(out), {x},
        [x, c, h, w, ho, wo, factor](std::span<const double> g, std::span<const double>) {
            if (!x.tracks_grad()) return;
            auto gx = x.grad_accum();
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t oh = 0; oh < ho; ++oh)
                    for (int64_t ow = 0; ow < wo; ++ow) {
                        const int64_t h1 = std::min(h, (oh + 1) * static_cast<int64_t>(factor));
                        const int64_t w1 = std::min(w, (ow + 1) * static_cast<int64_t>(factor));
                        const int64_t cnt = (h1 - oh * factor) * (w1 - ow * factor);
                        const double gv =
                            g[(ch * ho + oh) * wo + ow] / static_cast<double>(cnt);
                        for (int64_t ih = oh * factor; ih < h1; ++ih)
                            for (int64_t iw = ow * factor; iw < w1; ++iw)
                                gx[(ch * h + ih) * w + iw] += gv;
                    }
        });
}

Tensor concat(int axis, std::span<const Tensor> parts) {
    check_arg(!parts.empty(), "concat: no inputs");
    const int rank = parts[0].rank();
    check_arg(axis >= 0 && axis < rank,
              "concat: axis " + std::to_string(axis) + " out of range");
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& p : parts) {
        check_arg(p.rank() == rank, "concat: rank mismatch");
        for (int d = 0; d < rank; ++d)
            if (d != axis)
                check_arg(p.dim(d) == out_shape[static_cast<size_t>(d)],
                          "concat: extent mismatch on axis " + std::to_string(d));
        total += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;
    const AxisSplit ax = split_axis(out_shape, axis);
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t pn = p.dim(axis);
        for (int64_t o = 0; o < ax.outer; ++o)
            std::copy_n(p.data().data() + o * pn * ax.inner, pn * ax.inner,
                        out.data() + (o * total + off) * ax.inner);
        off += pn;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return Tensor::make(
        out_shape, std::move(out), inputs,
        [inputs, ax, total, axis](std::span<const double> g, std::span<const double>) {
            int64_t off2 = 0;
            for (const Tensor& p : inputs) {
                const int64_t pn = p.dim(axis);
                if (p.tracks_grad()) {
                    auto gp = p.grad_accum();
                    for (int64_t o = 0; o < ax.outer; ++o)
                        kernels::active().acc(gp.data() + o * pn * ax.inner,
                                              g.data() + (o * total + off2) * ax.inner,
                                              static_cast<size_t>(pn * ax.inner));
                }
                off2 += pn;
            }
        });
}

Tensor concat(int axis, std::initializer_list<Tensor> parts) {
    std::vector<Tensor> v(parts);
    return concat(axis, std::span<const Tensor>(v));
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    check_arg(axis >= 0 && axis < a.rank(), "slice: axis out of range");
    check_arg(start >= 0 && len > 0 && start + len <= a.dim(axis),
              "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                  ") out of bounds for extent " + std::to_string(a.dim(axis)));
    const AxisSplit ax = split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    for (int64_t o = 0; o < ax.outer; ++o)
        std::copy_n(a.data().data() + (o * ax.n + start) * ax.inner, len * ax.inner,
                    out.data() + o * len * ax.inner);
    return Tensor::make(out_shape, std::move(out), {a},
                        [a, ax, start, len](std::span<const double> g, std::span<const double>) {
                            if (!a.tracks_grad()) return;
                            auto ga = a.grad_accum();
                            for (int64_t o = 0; o < ax.outer; ++o)
                                kernels::active().acc(ga.data() + (o * ax.n + start) * ax.inner,
                                                      g.data() + o * len * ax.inner,
                                                      static_cast<size_t>(len * ax.inner));
                        });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_arg(shape_numel(shape) == a.numel(), "reshape: element count mismatch, " +
                                                   shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return Tensor::make(std::move(shape), std::move(out), {a},
                        [a](std::span<const double> g, std::span<const double>) {
                            if (a.tracks_grad())
                                kernels::active().acc(a.grad_accum().data(), g.data(), g.size());
                        });
}

Tensor at(const Tensor& a, int64_t flat_index) {
    check_arg(flat_index >= 0 && flat_index < a.numel(), "at: index out of range");
    return Tensor::make({1}, {a.data()[static_cast<size_t>(flat_index)]}, {a},
                        [a, flat_index](std::span<const double> g, std::span<const double>) {
                            if (a.tracks_grad())
                                a.grad_accum()[static_cast<size_t>(flat_index)] += g[0];
                        });
}

namespace {

// Taps and weights for sampling a length-n signal at position p with border
// clamping (used by the aligned upsampler).
struct Tap {
    int64_t i0, i1;
    double w0, w1;
};

Tap clamped_tap(double p, int64_t n) {
    double f = std::floor(p);
    int64_t i0 = static_cast<int64_t>(f);
    double frac = p - f;
    int64_t i1 = i0 + 1;
    i0 = std::clamp<int64_t>(i0, 0, n - 1);
    i1 = std::clamp<int64_t>(i1, 0, n - 1);
    return {i0, i1, 1.0 - frac, frac};
}

}  // namespace

Tensor upsample2x_aligned(const Tensor& x) {
    check_arg(x.rank() == 3, "upsample2x_aligned: input must be (C,H,W)");
    const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int64_t ho = 2 * h, wo = 2 * w;
    std::vector<double> out(static_cast<size_t>(c * ho * wo));
    for (int64_t ch = 0; ch < c; ++ch) {
        const double* plane = x.data().data() + ch * h * w;
        for (int64_t i = 0; i < ho; ++i) {
            const Tap ty = clamped_tap(0.5 * static_cast<double>(i), h);
            for (int64_t j = 0; j < wo; ++j) {
                const Tap tx = clamped_tap(0.5 * static_cast<double>(j), w);
                out[(ch * ho + i) * wo + j] =
                    ty.w0 * (tx.w0 * plane[ty.i0 * w + tx.i0] + tx.w1 * plane[ty.i0 * w + tx.i1]) +
                    ty.w1 * (tx.w0 * plane[ty.i1 * w + tx.i0] + tx.w1 * plane[ty.i1 * w + tx.i1]);
            }
        }
    }
    return Tensor::make(
        {c, ho, wo}, std::move(out), {x},
        [x, c, h, w, ho, wo](std::span<const double> g, std::span<const double>) {
            if (!x.tracks_grad()) return;
            auto gx = x.grad_accum();
            for (int64_t ch = 0; ch < c; ++ch) {
                double* plane = gx.data() + ch * h * w;
                for (int64_t i = 0; i < ho; ++i) {
                    const Tap ty = clamped_tap(0.5 * static_cast<double>(i), h);
                    for (int64_t j = 0; j < wo; ++j) {
                        const Tap tx = clamped_tap(0.5 * static_cast<double>(j), w);
                        const double gv = g[(ch * ho + i) * wo + j];
                        plane[ty.i0 * w + tx.i0] += gv * ty.w0 * tx.w0;
                        plane[ty.i0 * w + tx.i1] += gv * ty.w0 * tx.w1;
                        plane[ty.i1 * w + tx.i0] += gv * ty.w1 * tx.w0;
                        plane[ty.i1 * w + tx.i1] += gv * ty.w1 * tx.w1;
                    }
                }
            }
        });
}

Tensor crop_spatial(const Tensor& x, int64_t h, int64_t w) {
    check_arg(x.rank() == 3, "crop_spatial: input must be (C,H,W)");
    check_arg(h >= 1 && h <= x.dim(1) && w >= 1 && w <= x.dim(2),
              "crop_spatial: target larger than input");
    const int64_t c = x.dim(0), hi = x.dim(1), wi = x.dim(2);
    std::vector<double> out(static_cast<size_t>(c * h * w));
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < h; ++i)
            std::copy_n(x.data().data() + (ch * hi + i) * wi, w, out.data() + (ch * h + i) * w);
    return Tensor::make({c, h, w}, std::move(out), {x},
                        [x, c, h, w, hi, wi](std::span<const double> g, std::span<const double>) {
                            if (!x.tracks_grad()) return;
                            auto gx = x.grad_accum();
                            for (int64_t ch = 0; ch < c; ++ch)
                                for (int64_t i = 0; i < h; ++i)
                                    kernels::active().acc(gx.data() + (ch * hi + i) * wi,
                                                          g.data() + (ch * h + i) * w,
                                                          static_cast<size_t>(w));
                        });
}

Tensor bilinear_crop(const Tensor& x, double y0, double x0, double y1, double x1, int out_h,
                     int out_w) {
    check_arg(x.rank() == 3, "bilinear_crop: input must be (C,H,W)");
    check_arg(y1 > y0 && x1 > x0, "bilinear_crop: degenerate box");
    check_arg(out_h > 0 && out_w > 0, "bilinear_crop: output size must be positive");
    const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const double sy = (y1 - y0) / static_cast<double>(out_h);
    const double sx = (x1 - x0) / static_cast<double>(out_w);

    // Per-sample taps; indices outside the map read 0.
    struct Tap4 {
        int64_t iy0, iy1, ix0, ix1;
        double wy, wx;
    };
    std::vector<Tap4> taps(static_cast<size_t>(out_h) * out_w);
    for (int i = 0; i < out_h; ++i) {
        const double gy = y0 + (static_cast<double>(i) + 0.5) * sy - 0.5;
        const double fy = std::floor(gy);
        for (int j = 0; j < out_w; ++j) {
            const double gx = x0 + (static_cast<double>(j) + 0.5) * sx - 0.5;
            const double fx = std::floor(gx);
            taps[static_cast<size_t>(i) * out_w + j] = {
                static_cast<int64_t>(fy), static_cast<int64_t>(fy) + 1,
                static_cast<int64_t>(fx), static_cast<int64_t>(fx) + 1, gy - fy, gx - fx};
        }
    }
    auto read = [&](const double* plane, int64_t iy, int64_t ix) -> double {
        if (iy < 0 || iy >= h || ix < 0 || ix >= w) return 0.0;
        return plane[iy * w + ix];
    };

    std::vector<double> out(static_cast<size_t>(c) * out_h * out_w);
    for (int64_t ch = 0; ch < c; ++ch) {
        const double* plane = x.data().data() + ch * h * w;
        for (size_t p = 0; p < taps.size(); ++p) {
            const Tap4& t = taps[p];
            out[static_cast<size_t>(ch) * taps.size() + p] =
                (1.0 - t.wy) * ((1.0 - t.wx) * read(plane, t.iy0, t.ix0) +
                                t.wx * read(plane, t.iy0, t.ix1)) +
                t.wy * ((1.0 - t.wx) * read(plane, t.iy1, t.ix0) +
                        t.wx * read(plane, t.iy1, t.ix1));
        }
    }
    return Tensor::make(
        {c, out_h, out_w}, std::move(out), {x},
        [x, c, h, w, taps](std::span<const double> g, std::span<const double>) {
            if (!x.tracks_grad()) return;
            auto gx = x.grad_accum();
            auto scatter = [&](double* plane, int64_t iy, int64_t ix, double v) {
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) return;
                plane[iy * w + ix] += v;
            };
            for (int64_t ch = 0; ch < c; ++ch) {
                double* plane = gx.data() + ch * h * w;
                for (size_t p = 0; p < taps.size(); ++p) {
                    const Tap4& t = taps[p];
                    const double gv = g[static_cast<size_t>(ch) * taps.size() + p];
                    scatter(plane, t.iy0, t.ix0, gv * (1.0 - t.wy) * (1.0 - t.wx));
                    scatter(plane, t.iy0, t.ix1, gv * (1.0 - t.wy) * t.wx);
                    scatter(plane, t.iy1, t.ix0, gv * t.wy * (1.0 - t.wx));
                    scatter(plane, t.iy1, t.ix1, gv * t.wy * t.wx);
                }
            }
        });
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
    check_arg(x.rank() == 3, "scale_channels: input must be (C,H,W)");
    check_arg(s.rank() == 1 && s.dim(0) == x.dim(0),
              "scale_channels: scale must have one weight per channel");
    const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> out(static_cast<size_t>(c * hw));
    for (int64_t ch = 0; ch < c; ++ch) {
        const double sv = s.data()[static_cast<size_t>(ch)];
        for (int64_t i = 0; i < hw; ++i) out[ch * hw + i] = sv * x.data()[ch * hw + i];
    }
    return Tensor::make(
        x.shape(), std::move(out), {x, s},
        [x, s, c, hw](std::span<const double> g, std::span<const double>) {
            if (x.tracks_grad()) {
                auto gx = x.grad_accum();
                for (int64_t ch = 0; ch < c; ++ch)
                    kernels::active().axpy(gx.data() + ch * hw, s.data()[static_cast<size_t>(ch)],
                                           g.data() + ch * hw, static_cast<size_t>(hw));
            }
            if (s.tracks_grad()) {
                auto gs = s.grad_accum();
                for (int64_t ch = 0; ch < c; ++ch)
                    gs[static_cast<size_t>(ch)] += kernels::active().dot(
                        g.data() + ch * hw, x.data().data() + ch * hw, static_cast<size_t>(hw));
            }
        });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return Tensor::make({1}, {acc}, {a},
                        [a](std::span<const double> g, std::span<const double>) {
                            if (!a.tracks_grad()) return;
                            auto ga = a.grad_accum();
                            for (double& v : ga) v += g[0];
                        });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------

namespace {

// Mean cross-entropy over positions; a target of -1 excludes the position.
Tensor cross_entropy_impl(const Tensor& logits, std::span<const int> target, int64_t k,
                          int64_t npix) {
    // probs are kept for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(logits.data().begin(), logits.data().end());
    double loss = 0.0;
    int64_t valid = 0;
    for (int64_t p = 0; p < npix; ++p) {
        const int t = target[static_cast<size_t>(p)];
        check_arg(t >= -1 && t < k, "cross_entropy: target class out of range");
        double mx = -1e300;
        for (int64_t c = 0; c < k; ++c) mx = std::max(mx, (*probs)[c * npix + p]);
        double z = 0.0;
        for (int64_t c = 0; c < k; ++c) {
            double& v = (*probs)[c * npix + p];
            v = std::exp(v - mx);
            z += v;
        }
        for (int64_t c = 0; c < k; ++c) (*probs)[c * npix + p] /= z;
        if (t < 0) continue;
        loss -= std::log((*probs)[t * npix + p]);
        ++valid;
    }
    check_arg(valid > 0, "cross_entropy: every position is ignored");
    loss /= static_cast<double>(valid);
    std::vector<int> tcopy(target.begin(), target.end());
    return Tensor::make({1}, {loss}, {logits},
                        [logits, probs, tcopy, k, npix, valid](std::span<const double> g,
                                                               std::span<const double>) {
                            if (!logits.tracks_grad()) return;
                            auto gl = logits.grad_accum();
                            const double scale = g[0] / static_cast<double>(valid);
                            for (int64_t p = 0; p < npix; ++p) {
                                const int t = tcopy[static_cast<size_t>(p)];
                                if (t < 0) continue;
                                for (int64_t c = 0; c < k; ++c) {
                                    double d = (*probs)[c * npix + p];
                                    if (c == t) d -= 1.0;
                                    gl[c * npix + p] += scale * d;
                                }
                            }
                        });
}

}  // namespace

Tensor cross_entropy_map(const Tensor& logits, std::span<const int> target) {
    check_arg(logits.rank() == 3, "cross_entropy_map: logits must be (K,H,W)");
    const int64_t npix = logits.dim(1) * logits.dim(2);
    check_arg(static_cast<int64_t>(target.size()) == npix,
              "cross_entropy_map: target size does not match spatial extent");
    return cross_entropy_impl(logits, target, logits.dim(0), npix);
}

Tensor cross_entropy_vec(const Tensor& logits, int label) {
    check_arg(logits.rank() == 1, "cross_entropy_vec: logits must be 1-d");
    const int t[1] = {label};
    return cross_entropy_impl(logits, std::span<const int>(t, 1), logits.dim(0), 1);
}

Tensor bce_with_logits_mean(const Tensor& logits, std::span<const double> target) {
    check_arg(static_cast<int64_t>(target.size()) == logits.numel(),
              "bce_with_logits_mean: target size mismatch");
    const size_t n = target.size();
    double loss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double z = logits.data()[i];
        loss += std::max(z, 0.0) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<double>(n);
    std::vector<double> tcopy(target.begin(), target.end());
    return Tensor::make({1}, {loss}, {logits},
                        [logits, tcopy, n](std::span<const double> g, std::span<const double>) {
                            if (!logits.tracks_grad()) return;
                            auto gl = logits.grad_accum();
                            const double scale = g[0] / static_cast<double>(n);
                            for (size_t i = 0; i < n; ++i) {
                                const double s = 1.0 / (1.0 + std::exp(-logits.data()[i]));
                                gl[i] += scale * (s - tcopy[i]);
                            }
                        });
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "l1_loss");
    const size_t n = pred.data().size();
    double loss = 0.0;
    for (size_t i = 0; i < n; ++i) loss += std::abs(pred.data()[i] - target.data()[i]);
    loss /= static_cast<double>(n);
    return Tensor::make(
        {1}, {loss}, {pred, target},
        [pred, target, n](std::span<const double> g, std::span<const double>) {
            const double scale = g[0] / static_cast<double>(n);
            for (size_t i = 0; i < n; ++i) {
                const double d = pred.data()[i] - target.data()[i];
                const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (pred.tracks_grad()) pred.grad_accum()[i] += scale * s;
                if (target.tracks_grad()) target.grad_accum()[i] -= scale * s;
            }
        });
}

Tensor l1_loss_masked(const Tensor& pred, std::span<const double> target,
                      std::span<const uint8_t> valid) {
    check_arg(static_cast<int64_t>(target.size()) == pred.numel() &&
                  valid.size() == target.size(),
              "l1_loss_masked: size mismatch");
    size_t count = 0;
    double loss = 0.0;
    for (size_t i = 0; i < target.size(); ++i)
        if (valid[i]) {
            loss += std::abs(pred.data()[i] - target[i]);
            ++count;
        }
    check_arg(count > 0, "l1_loss_masked: empty valid mask");
    loss /= static_cast<double>(count);
    std::vector<double> tcopy(target.begin(), target.end());
    std::vector<uint8_t> vcopy(valid.begin(), valid.end());
    return Tensor::make({1}, {loss}, {pred},
                        [pred, tcopy, vcopy, count](std::span<const double> g,
                                                    std::span<const double>) {
                            if (!pred.tracks_grad()) return;
                            auto gp = pred.grad_accum();
                            const double scale = g[0] / static_cast<double>(count);
                            for (size_t i = 0; i < tcopy.size(); ++i) {
                                if (!vcopy[i]) continue;
                                const double d = pred.data()[i] - tcopy[i];
                                gp[i] += scale * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
                            }
                        });
}

// ---------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------

GradReport grad_check(std::string op_name, const std::function<Tensor(const Tensor&)>& f,
                      const Tensor& x0, double eps, double tol, int max_probes,
                      uint64_t probe_seed) {
    check_arg(eps >= 1e-7 && eps <= 1e-3, "grad_check: eps must lie in [1e-7, 1e-3]");

    Tensor x = Tensor::from(x0.shape(), {x0.data().begin(), x0.data().end()});
    x.requires_grad();
    Tensor y = f(x);
    check_arg(y.numel() == 1, "grad_check: f must return a scalar, got " + shape_str(y.shape()));
    y.backward();

    std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
    if (!x.grad().empty()) analytic.assign(x.grad().begin(), x.grad().end());

    const int64_t n = x.numel();
    std::vector<int64_t> probes;
    if (max_probes > 0 && n > max_probes) {
        std::mt19937_64 rng(probe_seed);
        std::uniform_int_distribution<int64_t> dist(0, n - 1);
        std::unordered_set<int64_t> chosen;
        while (static_cast<int>(chosen.size()) < max_probes) chosen.insert(dist(rng));
        probes.assign(chosen.begin(), chosen.end());
        std::sort(probes.begin(), probes.end());
    } else {
        probes.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) probes[static_cast<size_t>(i)] = i;
    }

    GradReport report;
    report.op = std::move(op_name);
    report.tol = tol;
    std::vector<double> base(x0.data().begin(), x0.data().end());
    for (int64_t i : probes) {
        std::vector<double> dp = base;
        dp[static_cast<size_t>(i)] += eps;
        const double fp = f(Tensor::from(x0.shape(), std::move(dp))).item();
        std::vector<double> dm = base;
        dm[static_cast<size_t>(i)] -= eps;
        const double fm = f(Tensor::from(x0.shape(), std::move(dm))).item();
        const double fd = (fp - fm) / (2.0 * eps);
        const double a = analytic[static_cast<size_t>(i)];
        const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
        report.max_rel_err = std::max(report.max_rel_err, rel);
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

}  // namespace d2b
