#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "d2bnet/heads.hpp"
#include "d2bnet/rng.hpp"

using namespace d2b;
using namespace d2b::heads;

namespace {

Tensor rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(static_cast<size_t>(shape_numel(s)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::from(std::move(s), std::move(d));
}

// Aligned 2x bilinear upsample of a square map, plain doubles.
std::vector<double> up2_oracle(const std::vector<double>& in, int64_t n) {
    std::vector<double> out(static_cast<size_t>(4 * n * n));
    for (int64_t i = 0; i < 2 * n; ++i)
        for (int64_t j = 0; j < 2 * n; ++j) {
            const double py = 0.5 * static_cast<double>(i), px = 0.5 * static_cast<double>(j);
            const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(py), n - 1);
            const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(px), n - 1);
            const int64_t y1 = std::min<int64_t>(y0 + 1, n - 1);
            const int64_t x1 = std::min<int64_t>(x0 + 1, n - 1);
            const double wy = py - std::floor(py), wx = px - std::floor(px);
            out[static_cast<size_t>(i * 2 * n + j)] =
                (1 - wy) * ((1 - wx) * in[static_cast<size_t>(y0 * n + x0)] +
                            wx * in[static_cast<size_t>(y0 * n + x1)]) +
                wy * ((1 - wx) * in[static_cast<size_t>(y1 * n + x0)] +
                      wx * in[static_cast<size_t>(y1 * n + x1)]);
        }
    return out;
}

}  // namespace

TEST_CASE("factored attention: zero factors, one-hot component, materialised oracle") {
    Rng rng(80);
    const int64_t dprime = 6;
    AttentionBasis basis{rand_t({4, 4, 14}, rng), rand_t({4, 4, 14}, rng)};
    const Tensor crop = rand_t({dprime, 56, 56}, rng);

    // s = 0 kills every attention map.
    const Tensor zero_mask =
        factored_attention_mask(crop, {rand_t({dprime * 4}, rng), Tensor::zeros({16})}, basis);
    for (double v : zero_mask.data()) CHECK(v == 0.0);

    // One-hot s selecting (k, d): Q_k is the outer product of the d-th rows.
    const int64_t sel_k = 2, sel_d = 1;
    Tensor s_onehot = Tensor::zeros({16});
    s_onehot.mutable_data()[static_cast<size_t>(sel_k * 4 + sel_d)] = 1.0;
    const Tensor tvec = rand_t({dprime * 4}, rng);
    const Tensor got = factored_attention_mask(crop, {tvec, s_onehot}, basis);

    std::vector<double> q(14 * 14);
    for (int64_t i = 0; i < 14; ++i)
        for (int64_t j = 0; j < 14; ++j)
            q[static_cast<size_t>(i * 14 + j)] =
                basis.u.data()[static_cast<size_t>((sel_k * 4 + sel_d) * 14 + i)] *
                basis.v.data()[static_cast<size_t>((sel_k * 4 + sel_d) * 14 + j)];
    const auto q56 = up2_oracle(up2_oracle(q, 14), 28);
    for (int64_t p = 0; p < 56 * 56; ++p) {
        double rp = 0.0;
        for (int64_t d = 0; d < dprime; ++d)
            rp += tvec.data()[static_cast<size_t>(sel_k * dprime + d)] *
                  crop.data()[static_cast<size_t>(d * 56 * 56 + p)];
        CHECK(std::abs(got.data()[static_cast<size_t>(p)] -
                       rp * q56[static_cast<size_t>(p)]) < 1e-12);
    }

    // Full materialised oracle over random instances.
    for (int inst = 0; inst < 10; ++inst) {
        const Tensor t2 = rand_t({dprime * 4}, rng);
        const Tensor s2 = rand_t({16}, rng);
        const Tensor m = factored_attention_mask(crop, {t2, s2}, basis);
        std::vector<double> expect(56 * 56, 0.0);
        for (int64_t k = 0; k < 4; ++k) {
            std::vector<double> qk(14 * 14, 0.0);
            for (int64_t i = 0; i < 14; ++i)
                for (int64_t j = 0; j < 14; ++j) {
                    double acc = 0.0;
                    for (int64_t d = 0; d < 4; ++d)
                        acc += basis.u.data()[static_cast<size_t>((k * 4 + d) * 14 + i)] *
                               s2.data()[static_cast<size_t>(k * 4 + d)] *
                               basis.v.data()[static_cast<size_t>((k * 4 + d) * 14 + j)];
                    qk[static_cast<size_t>(i * 14 + j)] = acc;
                }
            const auto qk56 = up2_oracle(up2_oracle(qk, 14), 28);
            for (int64_t p = 0; p < 56 * 56; ++p) {
                double rp = 0.0;
                for (int64_t d = 0; d < dprime; ++d)
                    rp += t2.data()[static_cast<size_t>(k * dprime + d)] *
                          crop.data()[static_cast<size_t>(d * 56 * 56 + p)];
                expect[static_cast<size_t>(p)] += rp * qk56[static_cast<size_t>(p)];
            }
        }
        for (int64_t p = 0; p < 56 * 56; ++p)
            CHECK(std::abs(m.data()[static_cast<size_t>(p)] - expect[static_cast<size_t>(p)]) <
                  1e-12);
    }

    branches::BranchConfig cfg;
    CHECK(per_instance_attention_params(cfg) == 16);
    CHECK(full_attention_params(cfg) == 784);
}

TEST_CASE("aggregate_instance_embeddings") {
    Rng rng(81);
    const Tensor e = rand_t({5}, rng);
    const Tensor one[] = {e};
    const Tensor same = aggregate_instance_embeddings(one);
    for (int64_t i = 0; i < 5; ++i)
        CHECK(same.data()[static_cast<size_t>(i)] == e.data()[static_cast<size_t>(i)]);

    const Tensor pair[] = {e, neg(e)};
    const Tensor cancelled = aggregate_instance_embeddings(pair);
    for (double v : cancelled.data()) CHECK(std::abs(v) < 1e-15);

    std::vector<Tensor> five;
    for (int i = 0; i < 5; ++i) five.push_back(rand_t({7}, rng));
    const Tensor m = aggregate_instance_embeddings(five);
    for (int64_t j = 0; j < 7; ++j) {
        double acc = 0.0;
        for (const Tensor& t : five) acc += t.data()[static_cast<size_t>(j)];
        CHECK(m.data()[static_cast<size_t>(j)] == doctest::Approx(acc / 5.0).epsilon(1e-14));
    }
    CHECK_THROWS(aggregate_instance_embeddings({}));
}

TEST_CASE("panoptic logits: uniform entropy, one-hot selection, matmul oracle, permutation") {
    Rng rng(82);
    const int64_t dprime = 5, s = 3, hw = 4;
    const Tensor f = rand_t({dprime, 2, 2}, rng);

    // Zero weights: uniform logits, cross-entropy ln(classes) per pixel.
    const Tensor cols0[] = {Tensor::zeros({dprime})};
    const Tensor logits0 = panoptic_logits(f, Tensor::zeros({dprime, s}), cols0);
    std::vector<int> target(static_cast<size_t>(hw), 2);
    CHECK(cross_entropy_map(logits0, target).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // One-hot stuff column with a delta basis map selects a channel of F.
    Tensor w_stuff = Tensor::zeros({dprime, s});
    w_stuff.mutable_data()[static_cast<size_t>(3 * s + 1)] = 1.0;  // column 1 reads channel 3
    const Tensor logits1 = panoptic_logits(f, w_stuff, {});
    for (int64_t p = 0; p < hw; ++p)
        CHECK(logits1.data()[static_cast<size_t>(1 * hw + p)] ==
              doctest::Approx(f.data()[static_cast<size_t>(3 * hw + p)]).epsilon(1e-15));

    // Random case: plain matrix-multiply oracle.
    const Tensor ws = rand_t({dprime, s}, rng);
    const Tensor c0 = rand_t({dprime}, rng);
    const Tensor c1 = rand_t({dprime}, rng);
    const Tensor cols[] = {c0, c1};
    const Tensor logits = panoptic_logits(f, ws, cols);
    CHECK(logits.shape() == Shape{s + 2, 2, 2});
    for (int64_t cls = 0; cls < s + 2; ++cls)
        for (int64_t p = 0; p < hw; ++p) {
            double acc = 0.0;
            for (int64_t d = 0; d < dprime; ++d) {
                const double wcol = cls < s ? ws.data()[static_cast<size_t>(d * s + cls)]
                                   : cls == s ? c0.data()[static_cast<size_t>(d)]
                                              : c1.data()[static_cast<size_t>(d)];
                acc += wcol * f.data()[static_cast<size_t>(d * hw + p)];
            }
            CHECK(std::abs(logits.data()[static_cast<size_t>(cls * hw + p)] - acc) < 1e-12);
        }

    // Permuting instance order permutes the thing channels identically.
    const Tensor swapped_cols[] = {c1, c0};
    const Tensor logits_sw = panoptic_logits(f, ws, swapped_cols);
    for (int64_t p = 0; p < hw; ++p) {
        CHECK(logits_sw.data()[static_cast<size_t>(s * hw + p)] ==
              logits.data()[static_cast<size_t>((s + 1) * hw + p)]);
        CHECK(logits_sw.data()[static_cast<size_t>((s + 1) * hw + p)] ==
              logits.data()[static_cast<size_t>(s * hw + p)]);
    }
}

TEST_CASE("decode_3d: zero dense weight, identity orientation, transcription oracle") {
    Rng rng(83);
    const geom::CameraIntrinsics k{150.0, 140.0, 64.0, 32.0};
    const int64_t dprime = 4;
    const Tensor crop = rand_t({dprime, 6, 6}, rng);

    std::vector<double> e(10, 0.0);
    e[2] = 18.0;  // z_inst
    e[7] = 1.0;   // cos
    const auto d0 = decode_3d(Tensor::from({10}, e), 40.0, 24.0, 8, k, crop,
                              Tensor::zeros({dprime}));
    REQUIRE(d0.has_value());
    CHECK(d0->box.center.z == 18.0);  // w_z = 0 leaves z = z_inst
    CHECK(d0->alpha.item() == 0.0);   // (sin, cos) = (0, 1)

    // Full transcription oracle.
    for (int i = 0; i < 20; ++i) {
        std::vector<double> ev(10);
        for (double& v : ev) v = rng.uniform(-0.5, 0.5);
        ev[2] = rng.uniform(10.0, 30.0);
        ev[7] += 1.5;
        const Tensor e3d = Tensor::from({10}, ev);
        const Tensor w_z = rand_t({dprime}, rng, -0.1, 0.1);
        const double lu = rng.uniform(10.0, 100.0), lv = rng.uniform(10.0, 50.0);
        const auto d = decode_3d(e3d, lu, lv, 8, k, crop, w_z);
        REQUIRE(d.has_value());

        double pooled_dot = 0.0;
        for (int64_t ch = 0; ch < dprime; ++ch) {
            double m = 0.0;
            for (int64_t p = 0; p < 36; ++p) m += crop.data()[static_cast<size_t>(ch * 36 + p)];
            pooled_dot += (m / 36.0) * w_z.data()[static_cast<size_t>(ch)];
        }
        const double z = ev[2] + pooled_dot;
        const double u = lu + ev[0] * 8.0, v = lv + ev[1] * 8.0;
        const double x = (u - k.u0) * z / k.fx, y = (v - k.v0) * z / k.fy;
        CHECK(std::abs(d->box.center.x - x) < 1e-10);
        CHECK(std::abs(d->box.center.y - y) < 1e-10);
        CHECK(std::abs(d->box.center.z - z) < 1e-10);
        CHECK(std::abs(d->box.h - std::exp(ev[3])) < 1e-10);
        CHECK(std::abs(d->box.w - std::exp(ev[4])) < 1e-10);
        CHECK(std::abs(d->box.l - std::exp(ev[5])) < 1e-10);
        const double alpha = std::atan2(ev[6], ev[7]);
        CHECK(std::abs(d->alpha.item() - alpha) < 1e-12);
        CHECK(std::abs(d->box.yaw - (alpha + std::atan2(x, z))) < 1e-10);
        CHECK(d->attr_logits.dim(0) == 2);
    }

    // Non-positive composed depth is rejected with a diagnostic.
    std::vector<double> bad(10, 0.0);
    bad[2] = -3.0;
    bad[7] = 1.0;
    std::string reason;
    CHECK(!decode_3d(Tensor::from({10}, bad), 40.0, 24.0, 8, k, crop, Tensor::zeros({dprime}),
                     &reason)
               .has_value());
    CHECK(reason == "non-positive instance depth");
}

TEST_CASE("corners_from_params mirrors the plain-double corner template") {
    Rng rng(84);
    for (int i = 0; i < 30; ++i) {
        geom::Box3D b;
        b.center = {rng.uniform(-8.0, 8.0), rng.uniform(-2.0, 2.0), rng.uniform(3.0, 50.0)};
        b.h = rng.uniform(0.5, 3.0);
        b.w = rng.uniform(0.5, 3.0);
        b.l = rng.uniform(0.5, 5.0);
        b.yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
        const double alpha = geom::yaw_to_alpha(b.yaw, b.center);
        const Tensor corners = corners_from_params(
            Tensor::from({3}, {b.center.x, b.center.y, b.center.z}),
            Tensor::from({3}, {b.h, b.w, b.l}), Tensor::scalar(alpha));
        const auto expect = geom::box_corners(b);
        for (size_t ci = 0; ci < 8; ++ci) {
            CHECK(std::abs(corners.data()[ci * 3 + 0] - expect[ci].x) < 1e-12);
            CHECK(std::abs(corners.data()[ci * 3 + 1] - expect[ci].y) < 1e-12);
            CHECK(std::abs(corners.data()[ci * 3 + 2] - expect[ci].z) < 1e-12);
        }
    }
}

TEST_CASE("corner loss: exact zero at the truth, disentangled groups, corner oracle") {
    Rng rng(85);
    geom::Box3D gt;
    gt.center = {2.0, 0.5, 20.0};
    gt.h = 1.6;
    gt.w = 1.8;
    gt.l = 4.2;
    gt.yaw = 0.6;
    gt.attribute = 1;
    const double gt_alpha = geom::yaw_to_alpha(gt.yaw, gt.center);

    Decoded3D pred;
    pred.loc = Tensor::from({3}, {gt.center.x, gt.center.y, gt.center.z});
    pred.dims = Tensor::from({3}, {gt.h, gt.w, gt.l});
    pred.alpha = Tensor::scalar(gt_alpha);
    const auto zero_terms = corner_loss_terms(pred, gt);
    CHECK(zero_terms.loc.item() == 0.0);
    CHECK(zero_terms.dim.item() == 0.0);
    CHECK(zero_terms.ori.item() == 0.0);

    // Only the dims perturbed: loc and orientation terms stay exactly zero.
    Decoded3D pred_dim = pred;
    pred_dim.dims = Tensor::from({3}, {gt.h + 0.4, gt.w, gt.l});
    const auto dim_terms = corner_loss_terms(pred_dim, gt);
    CHECK(dim_terms.loc.item() == 0.0);
    CHECK(dim_terms.ori.item() == 0.0);
    CHECK(dim_terms.dim.item() > 0.0);
    // The height moves each corner's y by 0.4/2, so the L1 sum is 8 * 0.2.
    CHECK(dim_terms.dim.item() == doctest::Approx(8 * 0.2).epsilon(1e-12));

    // Random perturbation against a brute-force corner enumeration.
    for (int i = 0; i < 20; ++i) {
        Decoded3D p2;
        const double dx = rng.uniform(-1.0, 1.0), dz = rng.uniform(-1.0, 1.0);
        const double dh = rng.uniform(-0.3, 0.5), dalpha = rng.uniform(-0.5, 0.5);
        p2.loc = Tensor::from({3}, {gt.center.x + dx, gt.center.y, gt.center.z + dz});
        p2.dims = Tensor::from({3}, {gt.h + dh, gt.w, gt.l});
        p2.alpha = Tensor::scalar(gt_alpha + dalpha);
        const auto terms = corner_loss_terms(p2, gt);

        const auto corner_l1 = [&](const geom::Vec3& loc, double h, double w, double l,
                                   double alpha) {
            geom::Box3D bb;
            bb.center = loc;
            bb.h = h;
            bb.w = w;
            bb.l = l;
            bb.yaw = alpha + std::atan2(loc.x, loc.z);
            geom::Box3D ref = gt;
            ref.yaw = gt_alpha + std::atan2(gt.center.x, gt.center.z);
            const auto ca = geom::box_corners(bb);
            const auto cb = geom::box_corners(ref);
            double acc = 0.0;
            for (size_t ci = 0; ci < 8; ++ci)
                acc += std::abs(ca[ci].x - cb[ci].x) + std::abs(ca[ci].y - cb[ci].y) +
                       std::abs(ca[ci].z - cb[ci].z);
            return acc;
        };
        const geom::Vec3 ploc{gt.center.x + dx, gt.center.y, gt.center.z + dz};
        CHECK(std::abs(terms.loc.item() -
                       corner_l1(ploc, gt.h, gt.w, gt.l, gt_alpha)) < 1e-10);
        CHECK(std::abs(terms.dim.item() -
                       corner_l1(gt.center, gt.h + dh, gt.w, gt.l, gt_alpha)) < 1e-10);
        CHECK(std::abs(terms.ori.item() -
                       corner_l1(gt.center, gt.h, gt.w, gt.l, gt_alpha + dalpha)) < 1e-10);
    }

    // Attribute cross-entropy joins the combined loss when present.
    Decoded3D with_attr = pred;
    with_attr.attr_logits = Tensor::zeros({4});
    CHECK(corner_loss(with_attr, gt).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("depth head: constant-bias clamp, three-doubling shape, transcription oracle") {
    Rng rng(86);
    const int64_t c = 4;
    DepthHeadParams zero;
    zero.conv0 = {Tensor::zeros({c, c, 3, 3}), Tensor::zeros({c})};
    zero.conv1 = {Tensor::zeros({c, c, 3, 3}), Tensor::zeros({c})};
    zero.conv2 = {Tensor::zeros({1, c, 3, 3}), Tensor::from({1}, {5.0})};
    const Tensor f = rand_t({c, 4, 8}, rng);
    const Tensor d5 = depth_head(f, zero);
    CHECK(d5.shape() == Shape{1, 32, 64});
    for (double v : d5.data()) CHECK(v == 5.0);

    zero.conv2.b = Tensor::from({1}, {500.0});
    const Tensor ceiling = depth_head(f, zero);
    for (double v : ceiling.data()) CHECK(v == kDepthCeil);
    zero.conv2.b = Tensor::from({1}, {-2.0});
    const Tensor floored = depth_head(f, zero);
    for (double v : floored.data()) CHECK(v == kDepthFloor);

    DepthHeadParams p;
    p.conv0 = {rand_t({c, c, 3, 3}, rng), rand_t({c}, rng)};
    p.conv1 = {rand_t({c, c, 3, 3}, rng), rand_t({c}, rng)};
    p.conv2 = {rand_t({1, c, 3, 3}, rng), Tensor::from({1}, {20.0})};
    const Tensor got = depth_head(f, p);
    Tensor t = upsample2x_aligned(conv2d(f, p.conv0.w, 1, 1, p.conv0.b));
    t = upsample2x_aligned(conv2d(t, p.conv1.w, 1, 1, p.conv1.b));
    t = clamp(upsample2x_aligned(conv2d(t, p.conv2.w, 1, 1, p.conv2.b)), kDepthFloor, kDepthCeil);
    for (int64_t i = 0; i < got.numel(); ++i)
        CHECK(std::abs(got.data()[static_cast<size_t>(i)] -
                       t.data()[static_cast<size_t>(i)]) < 1e-9);
}

TEST_CASE("total loss: zeros, stated weights, weighted-sum oracle, NaN rejection") {
    LossComponents none;
    CHECK(total_loss(none).item() == 0.0);

    LossComponents dim_only;
    dim_only.dim = Tensor::scalar(1.0);
    CHECK(total_loss(dim_only).item() == 0.8);  // 0.4 * 2 * 1

    Rng rng(87);
    for (int i = 0; i < 20; ++i) {
        LossComponents lc;
        const double ctr = rng.uniform(0.0, 3.0), dim = rng.uniform(0.0, 3.0);
        const double ori = rng.uniform(0.0, 3.0), loc = rng.uniform(0.0, 3.0);
        const double mask = rng.uniform(0.0, 3.0), pano = rng.uniform(0.0, 3.0);
        const double depth = rng.uniform(0.0, 3.0);
        lc.ctr = Tensor::scalar(ctr);
        lc.dim = Tensor::scalar(dim);
        lc.ori = Tensor::scalar(ori);
        lc.loc = Tensor::scalar(loc);
        lc.mask = Tensor::scalar(mask);
        lc.pano = Tensor::scalar(pano);
        lc.depth = Tensor::scalar(depth);
        const double expect = 0.4 * (ctr + 2.0 * dim + ori + 0.5 * loc) + mask + pano + depth;
        CHECK(total_loss(lc).item() == doctest::Approx(expect).epsilon(1e-15));
    }

    LossComponents bad;
    bad.mask = Tensor::scalar(std::nan(""));
    CHECK_THROWS_WITH_AS(total_loss(bad), "total_loss: non-finite component: mask",
                         std::runtime_error);
}
