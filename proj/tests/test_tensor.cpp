#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "d2bnet/dynamic_ops.hpp"
#include "d2bnet/rng.hpp"
#include "d2bnet/tensor.hpp"
#include "d2bnet/tensor_io.hpp"

using namespace d2b;

namespace {

Tensor rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(static_cast<size_t>(shape_numel(s)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::from(std::move(s), std::move(d));
}

}  // namespace

TEST_CASE("conv2d: ones reduce, identity kernel, loop oracle") {
    // 1x3x3 ones against a 1x1x3x3 ones kernel collapses to the patch sum.
    const Tensor x = Tensor::ones({1, 3, 3});
    const Tensor w = Tensor::ones({1, 1, 3, 3});
    const Tensor y = conv2d(x, w, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y.item() == 9.0);

    // Identity 1x1 kernel passes the input through.
    Rng rng(1);
    const Tensor x2 = rand_t({2, 4, 5}, rng);
    Tensor id = Tensor::zeros({2, 2, 1, 1});
    id.mutable_data()[0] = 1.0;
    id.mutable_data()[3] = 1.0;
    const Tensor y2 = conv2d(x2, id, 1, 0);
    for (int64_t i = 0; i < x2.numel(); ++i)
        CHECK(y2.data()[static_cast<size_t>(i)] == x2.data()[static_cast<size_t>(i)]);

    // Random 2x5x5 input against a 3x2x3x3 kernel, six-nested-loop oracle.
    const Tensor x3 = rand_t({2, 5, 5}, rng);
    const Tensor w3 = rand_t({3, 2, 3, 3}, rng);
    const Tensor y3 = conv2d(x3, w3, 1, 0);
    CHECK(y3.shape() == Shape{3, 3, 3});
    for (int64_t co = 0; co < 3; ++co)
        for (int64_t oh = 0; oh < 3; ++oh)
            for (int64_t ow = 0; ow < 3; ++ow) {
                double acc = 0.0;
                for (int64_t ci = 0; ci < 2; ++ci)
                    for (int64_t kj = 0; kj < 3; ++kj)
                        for (int64_t kk = 0; kk < 3; ++kk)
                            acc += w3.data()[static_cast<size_t>(((co * 2 + ci) * 3 + kj) * 3 +
                                                                 kk)] *
                                   x3.data()[static_cast<size_t>((ci * 5 + oh + kj) * 5 + ow +
                                                                 kk)];
                CHECK(std::abs(acc - y3.data()[static_cast<size_t>((co * 3 + oh) * 3 + ow)]) <
                      1e-12);
            }
}

TEST_CASE("conv2d rejects bad shapes") {
    Rng rng(2);
    const Tensor x = rand_t({2, 4, 4}, rng);
    CHECK_THROWS(conv2d(x, rand_t({3, 3, 3, 3}, rng), 1, 1));   // channel mismatch
    CHECK_THROWS(conv2d(x, rand_t({3, 2, 3, 3}, rng), 1, -1));  // negative pad
    CHECK_THROWS(conv2d(x, rand_t({3, 2, 7, 7}, rng), 1, 0));   // kernel larger than input
}

TEST_CASE("softmax and sigmoid behave") {
    const Tensor z = softmax(Tensor::zeros({3}), 0);
    for (double v : z.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(sigmoid(Tensor::zeros({1})).item() == 0.5);
    CHECK_THROWS(softmax(Tensor::zeros({3}), 1));  // axis out of range

    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(10 + seed);
        // +-30 keeps sigmoid away from the point where f64 rounds it to 1.
        const Tensor x = rand_t({4, 6}, rng, -30.0, 30.0);
        const Tensor sm = softmax(x, 1);
        for (int64_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (int64_t c = 0; c < 6; ++c) s += sm.data()[static_cast<size_t>(r * 6 + c)];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
        const Tensor sg = sigmoid(x);
        for (double v : sg.data()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("global_avg_pool equals the per-channel mean") {
    Rng rng(3);
    const Tensor x = rand_t({3, 4, 7}, rng);
    const Tensor g = global_avg_pool(x);
    CHECK(g.shape() == Shape{3, 1, 1});
    for (int64_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int64_t i = 0; i < 28; ++i) acc += x.data()[static_cast<size_t>(c * 28 + i)];
        CHECK(g.data()[static_cast<size_t>(c)] == doctest::Approx(acc / 28.0).epsilon(1e-14));
    }
}

TEST_CASE("upsample2x_aligned: constant extension, impulse peak, sampled-grid identity") {
    const Tensor one = upsample2x_aligned(Tensor::full({1, 1, 1}, 3.25));
    CHECK(one.shape() == Shape{1, 2, 2});
    for (double v : one.data()) CHECK(v == 3.25);

    Tensor imp = Tensor::zeros({1, 4, 4});
    imp.mutable_data()[static_cast<size_t>(1 * 4 + 1)] = 1.0;
    const Tensor up = upsample2x_aligned(imp);
    int64_t argmax = 0;
    for (int64_t i = 0; i < up.numel(); ++i)
        if (up.data()[static_cast<size_t>(i)] > up.data()[static_cast<size_t>(argmax)]) argmax = i;
    CHECK(argmax == 2 * 8 + 2);

    // Smooth ramp: strided subsampling of the upsampled map reproduces it.
    std::vector<double> ramp(6 * 8);
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 8; ++j) ramp[static_cast<size_t>(i * 8 + j)] = 0.4 * i - 0.9 * j;
    const Tensor x = Tensor::from({1, 6, 8}, ramp);
    const Tensor u = upsample2x_aligned(x);
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 8; ++j)
            CHECK(std::abs(u.data()[static_cast<size_t>(2 * i * 16 + 2 * j)] -
                           x.data()[static_cast<size_t>(i * 8 + j)]) < 1e-6);
}

TEST_CASE("grad_check oracle examples") {
    Rng rng(4);
    const Tensor x = rand_t({10}, rng);
    const auto sq = [](const Tensor& t) { return sum(mul(t, t)); };
    const GradReport r1 = grad_check("sum_sq", sq, x, 1e-5, 1e-6);
    CHECK(r1.pass);

    // L1 at a non-kink point.
    const Tensor target = Tensor::full({10}, 5.0);
    const auto l1 = [&](const Tensor& t) { return l1_loss(t, target); };
    CHECK(grad_check("l1", l1, x, 1e-5, 1e-6).pass);

    // The full rank-1 dynamic convolution pipeline.
    const Tensor xc = rand_t({3, 6, 6}, rng);
    dyn::Rank1Factors f{rand_t({3, 6, 6}, rng), rand_t({3, 6, 6}, rng)};
    dyn::Rank1ConvLayer layer;
    layer.weight = rand_t({3, 3, 3, 3}, rng);
    const auto pipeline = [&](const Tensor& t) {
        return sum(mul(dyn::rank1_conv(t, f, layer), dyn::rank1_conv(t, f, layer)));
    };
    CHECK(grad_check("rank1_conv pipeline", pipeline, xc, 1e-5, 1e-4, 24).pass);

    CHECK_THROWS(grad_check("bad eps", sq, x, 1e-2, 1e-6));
    const auto vector_valued = [](const Tensor& t) { return add(t, t); };
    CHECK_THROWS(grad_check("non-scalar", vector_valued, x, 1e-5, 1e-6));
}

TEST_CASE("gradients accumulate additively until zeroed") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    x.requires_grad();
    sum(mul(x, x)).backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    sum(mul(x, x)).backward();
    CHECK(x.grad()[0] == doctest::Approx(4.0));  // second pass adds on top
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("matmul agrees with a loop oracle and validates shapes") {
    Rng rng(5);
    const Tensor a = rand_t({3, 4}, rng);
    const Tensor b = rand_t({4, 5}, rng);
    const Tensor c = matmul(a, b);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 5; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < 4; ++k)
                acc += a.data()[static_cast<size_t>(i * 4 + k)] *
                       b.data()[static_cast<size_t>(k * 5 + j)];
            CHECK(c.data()[static_cast<size_t>(i * 5 + j)] == doctest::Approx(acc).epsilon(1e-14));
        }
    CHECK_THROWS(matmul(a, rand_t({3, 2}, rng)));
}

TEST_CASE("losses: uniform cross-entropy and bce reference values") {
    const Tensor logits = Tensor::zeros({5, 2, 2});
    std::vector<int> target(4, 3);
    CHECK(cross_entropy_map(logits, target).item() ==
          doctest::Approx(std::log(5.0)).epsilon(1e-15));
    target[2] = -1;  // ignored position
    CHECK(cross_entropy_map(logits, target).item() ==
          doctest::Approx(std::log(5.0)).epsilon(1e-15));

    std::vector<double> t(3, 0.5);
    CHECK(bce_with_logits_mean(Tensor::zeros({3}), t).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    CHECK_THROWS(l1_loss_masked(Tensor::zeros({3}), std::vector<double>(3, 1.0),
                                std::vector<uint8_t>(3, 0)));
}

TEST_CASE("slice/concat round-trip and at() indexing") {
    Rng rng(6);
    const Tensor x = rand_t({6, 3, 4}, rng);
    const Tensor lo = slice(x, 0, 0, 3);
    const Tensor hi = slice(x, 0, 3, 3);
    const Tensor back = concat(0, {lo, hi});
    CHECK(back.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(back.data()[static_cast<size_t>(i)] == x.data()[static_cast<size_t>(i)]);
    CHECK(at(x, 17).item() == x.data()[17]);
    CHECK_THROWS(slice(x, 0, 4, 3));
    CHECK_THROWS(concat(3, {x, x}));
}

TEST_CASE("tensor serialization round-trips bit-exactly") {
    Rng rng(7);
    const Tensor t = rand_t({2, 3, 5}, rng);
    std::stringstream ss;
    save_tensor(ss, t);
    const Tensor back = load_tensor(ss);
    CHECK(back.shape() == t.shape());
    for (int64_t i = 0; i < t.numel(); ++i)
        CHECK(back.data()[static_cast<size_t>(i)] == t.data()[static_cast<size_t>(i)]);

    std::stringstream named;
    save_named_tensor(named, "weights.w", t);
    const auto [name, t2] = load_named_tensor(named);
    CHECK(name == "weights.w");
    CHECK(t2.numel() == t.numel());
}

TEST_CASE("clamp passes gradients only in the interior") {
    Tensor x = Tensor::from({3}, {-2.0, 0.5, 2.0});
    x.requires_grad();
    sum(clamp(x, -1.0, 1.0)).backward();
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 0.0);
}
