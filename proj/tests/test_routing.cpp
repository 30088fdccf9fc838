#include <doctest.h>

#include <cmath>
#include <vector>

#include "d2bnet/routing.hpp"
#include "d2bnet/rng.hpp"

using namespace d2b;
using namespace d2b::routing;

namespace {

Tensor rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(static_cast<size_t>(shape_numel(s)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::from(std::move(s), std::move(d));
}

}  // namespace

TEST_CASE("channel_router: neutral state at zero parameters") {
    Rng rng(40);
    const int64_t c = 8;
    const Tensor x = rand_t({c, 5, 6}, rng);
    RouterParams rp{Tensor::zeros({2 * c, c}), Tensor::zeros({2 * c})};
    const RoutingScores s = channel_router(x, rp);
    for (double v : s.primary.data()) CHECK(v == 0.5);
    for (double v : s.secondary.data()) CHECK(v == doctest::Approx(1.0 / c).epsilon(1e-15));
}

TEST_CASE("channel_router: softmax head sums to one and matches the composition oracle") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(41 + seed);
        const int64_t c = 8;
        const Tensor x = rand_t({c, 3, 4}, rng, -5.0, 5.0);
        RouterParams rp{rand_t({2 * c, c}, rng), rand_t({2 * c}, rng)};
        const RoutingScores s = channel_router(x, rp);

        double sum = 0.0;
        for (double v : s.secondary.data()) sum += v;
        CHECK(std::abs(sum - 1.0) < 1e-12);

        // Hand-composed GAP -> matmul -> activations.
        std::vector<double> pooled(static_cast<size_t>(c), 0.0);
        for (int64_t ch = 0; ch < c; ++ch) {
            for (int64_t i = 0; i < 12; ++i)
                pooled[static_cast<size_t>(ch)] += x.data()[static_cast<size_t>(ch * 12 + i)];
            pooled[static_cast<size_t>(ch)] /= 12.0;
        }
        std::vector<double> pre(static_cast<size_t>(2 * c), 0.0);
        for (int64_t r = 0; r < 2 * c; ++r) {
            double acc = rp.bias.data()[static_cast<size_t>(r)];
            for (int64_t k = 0; k < c; ++k)
                acc += rp.weight.data()[static_cast<size_t>(r * c + k)] *
                       pooled[static_cast<size_t>(k)];
            pre[static_cast<size_t>(r)] = acc;
        }
        double z = 0.0, mx = -1e300;
        for (int64_t k = 0; k < c; ++k) mx = std::max(mx, pre[static_cast<size_t>(c + k)]);
        for (int64_t k = 0; k < c; ++k) z += std::exp(pre[static_cast<size_t>(c + k)] - mx);
        for (int64_t k = 0; k < c; ++k) {
            const double sig = 1.0 / (1.0 + std::exp(-pre[static_cast<size_t>(k)]));
            CHECK(std::abs(s.primary.data()[static_cast<size_t>(k)] - sig) < 1e-12);
            const double sm = std::exp(pre[static_cast<size_t>(c + k)] - mx) / z;
            CHECK(std::abs(s.secondary.data()[static_cast<size_t>(k)] - sm) < 1e-12);
        }
    }
}

TEST_CASE("task_router: degenerate embeddings, neutral state, distinct ids differ") {
    Rng rng(42);
    const int64_t c = 8, e = 1;
    const Tensor x = rand_t({c, 4, 4}, rng);

    // Zero parameters stay at the neutral 0.5 / uniform state.
    RouterParams zero{Tensor::zeros({2 * c, c + 2 * e}), Tensor::zeros({2 * c})};
    const Tensor emb_w = rand_t({e, 3}, rng);
    TaskEmbedding t0{0, task_embedding_lookup(emb_w, 0)};
    TaskEmbedding t1{1, task_embedding_lookup(emb_w, 1)};
    const RoutingScores s0 = task_router(x, t0, t1, zero);
    for (double v : s0.primary.data()) CHECK(v == 0.5);
    for (double v : s0.secondary.data()) CHECK(v == doctest::Approx(1.0 / c).epsilon(1e-15));

    // Identical embeddings reduce to a channel router over the widened input.
    RouterParams rp{rand_t({2 * c, c + 2 * e}, rng), rand_t({2 * c}, rng)};
    const RoutingScores same = task_router(x, t0, t0, rp);
    const Tensor widened = concat(0, {reshape(global_avg_pool(x), {c}), t0.emb, t0.emb});
    const Tensor pre = add(reshape(matmul(rp.weight, reshape(widened, {c + 2 * e, 1})), {2 * c}),
                           rp.bias);
    const Tensor prim = sigmoid(slice(pre, 0, 0, c));
    for (int64_t k = 0; k < c; ++k)
        CHECK(std::abs(same.primary.data()[static_cast<size_t>(k)] -
                       prim.data()[static_cast<size_t>(k)]) < 1e-13);

    // Distinct one-hot ids produce different scores for random parameters.
    int differing = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng r2(4300 + seed);
        RouterParams rp2{rand_t({2 * c, c + 2 * e}, r2), rand_t({2 * c}, r2)};
        const Tensor ew = rand_t({e, 2}, r2);
        TaskEmbedding a{0, task_embedding_lookup(ew, 0)};
        TaskEmbedding b{1, task_embedding_lookup(ew, 1)};
        const RoutingScores sa = task_router(x, a, b, rp2);
        const RoutingScores sb = task_router(x, b, a, rp2);
        bool diff = false;
        for (int64_t k = 0; k < c; ++k)
            if (sa.primary.data()[static_cast<size_t>(k)] !=
                sb.primary.data()[static_cast<size_t>(k)])
                diff = true;
        if (diff) ++differing;
    }
    CHECK(differing == 20);

    CHECK_THROWS(task_router(x, TaskEmbedding{0, rand_t({e + 2}, rng)}, t1, rp));
}

TEST_CASE("route_features: pass-through, zero secondary, loop oracle") {
    Rng rng(44);
    const int64_t c = 6;
    const Tensor fm = rand_t({c, 3, 5}, rng);
    const Tensor fa = rand_t({c, 3, 5}, rng);

    const RoutingScores pass{Tensor::ones({c}), Tensor::zeros({c})};
    const Tensor routed = route_features(fm, fa, pass);
    for (int64_t i = 0; i < fm.numel(); ++i)
        CHECK(routed.data()[static_cast<size_t>(i)] == fm.data()[static_cast<size_t>(i)]);

    const RoutingScores s{rand_t({c}, rng, 0.1, 0.9), rand_t({c}, rng, 0.0, 1.0)};
    const Tensor routed_zero = route_features(fm, Tensor::zeros({c, 3, 5}), s);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < 15; ++i)
            CHECK(std::abs(routed_zero.data()[static_cast<size_t>(ch * 15 + i)] -
                           s.primary.data()[static_cast<size_t>(ch)] *
                               fm.data()[static_cast<size_t>(ch * 15 + i)]) < 1e-15);

    const Tensor full = route_features(fm, fa, s);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < 15; ++i) {
            const size_t idx = static_cast<size_t>(ch * 15 + i);
            CHECK(std::abs(full.data()[idx] -
                           (s.primary.data()[static_cast<size_t>(ch)] * fm.data()[idx] +
                            s.secondary.data()[static_cast<size_t>(ch)] * fa.data()[idx])) <
                  1e-15);
        }

    CHECK_THROWS(route_features(fm, rand_t({c, 3, 4}, rng), s));
}

TEST_CASE("split_context: halves, round-trip, slice oracle") {
    Rng rng(45);
    const Tensor two = rand_t({2, 3, 3}, rng);
    const auto [a2, b2] = split_context(two);
    CHECK(a2.shape() == Shape{1, 3, 3});
    for (int64_t i = 0; i < 9; ++i) {
        CHECK(a2.data()[static_cast<size_t>(i)] == two.data()[static_cast<size_t>(i)]);
        CHECK(b2.data()[static_cast<size_t>(i)] == two.data()[static_cast<size_t>(9 + i)]);
    }

    const Tensor m = rand_t({8, 4, 5}, rng);
    const auto [lo, hi] = split_context(m);
    const Tensor back = concat(0, {lo, hi});
    for (int64_t i = 0; i < m.numel(); ++i)
        CHECK(back.data()[static_cast<size_t>(i)] == m.data()[static_cast<size_t>(i)]);

    CHECK_THROWS(split_context(rand_t({3, 2, 2}, rng)));
}

TEST_CASE("routing is differentiable end to end") {
    Rng rng(46);
    const int64_t c = 8;
    const Tensor fm = rand_t({c, 3, 4}, rng);
    const Tensor fa = rand_t({c, 3, 4}, rng);
    RouterParams rp{rand_t({2 * c, c}, rng), rand_t({2 * c}, rng)};
    const Tensor x0 = rand_t({c, 3, 4}, rng);
    const auto f = [&](const Tensor& x) {
        const RoutingScores s = channel_router(x, rp);
        return sum(mul(route_features(fm, fa, s), route_features(fm, fa, s)));
    };
    CHECK(grad_check("router+route_features", f, x0, 1e-5, 1e-4, 24).pass);
}
