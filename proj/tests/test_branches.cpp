#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "d2bnet/branches.hpp"
#include "d2bnet/rng.hpp"

using namespace d2b;
using namespace d2b::branches;

namespace {

Tensor rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(static_cast<size_t>(shape_numel(s)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::from(std::move(s), std::move(d));
}

FeaturePyramid make_pyramid(int level_min, std::vector<Tensor> levels) {
    FeaturePyramid pyr;
    pyr.level_min = level_min;
    pyr.levels = std::move(levels);
    return pyr;
}

}  // namespace

TEST_CASE("branch config validation") {
    BranchConfig ok;
    ok.validate();
    BranchConfig bad = ok;
    bad.channels = 20;  // not a multiple of 8
    CHECK_THROWS(bad.validate());
    bad = ok;
    bad.dense_width = 2;  // below the attention basis count
    CHECK_THROWS(bad.validate());
    CHECK(ok.embed_dim() == 64 * 4 + 16 + 64 + 8 + 2);
}

TEST_CASE("instance branch: zero weights give bias constants; shape arithmetic") {
    Rng rng(70);
    const int c = 64, e = 16;
    InstanceBranchParams p;
    p.tower.push_back({Tensor::zeros({c, c, 3, 3}), Tensor::zeros({c})});
    p.tower.push_back({Tensor::zeros({c, c, 3, 3}), Tensor::zeros({c})});
    p.top_embed = {Tensor::zeros({e, c, 3, 3}), Tensor::full({e}, 0.25)};
    p.top_context.push_back({Tensor::zeros({2 * c, c, 3, 3}), Tensor::full({2 * c}, -1.5)});

    const auto pyr = make_pyramid(3, {rand_t({c, 32, 64}, rng)});
    const auto out = instance_branch_forward(pyr, p);
    REQUIRE(out.size() == 1);
    CHECK(out[0].context[0].shape() == Shape{128, 32, 64});
    CHECK(out[0].embed_map.shape() == Shape{16, 32, 64});
    for (double v : out[0].embed_map.data()) CHECK(v == 0.25);
    for (double v : out[0].context[0].data()) CHECK(v == -1.5);
}

TEST_CASE("instance branch matches a layer-by-layer transcription") {
    Rng rng(71);
    const int c = 4, e = 3;
    InstanceBranchParams p;
    p.tower.push_back({rand_t({c, c, 3, 3}, rng), rand_t({c}, rng)});
    p.tower.push_back({rand_t({c, c, 3, 3}, rng), rand_t({c}, rng)});
    p.top_embed = {rand_t({e, c, 3, 3}, rng), rand_t({e}, rng)};
    p.top_context.push_back({rand_t({2 * c, c, 3, 3}, rng), rand_t({2 * c}, rng)});

    const Tensor p3 = rand_t({c, 6, 9}, rng);
    const auto out = instance_branch_forward(make_pyramid(3, {p3}), p);

    Tensor t = tanh(conv2d(p3, p.tower[0].w, 1, 1, p.tower[0].b));
    t = tanh(conv2d(t, p.tower[1].w, 1, 1, p.tower[1].b));
    const Tensor e_map = conv2d(t, p.top_embed.w, 1, 1, p.top_embed.b);
    const Tensor m_map = conv2d(t, p.top_context[0].w, 1, 1, p.top_context[0].b);
    for (int64_t i = 0; i < e_map.numel(); ++i)
        CHECK(std::abs(out[0].embed_map.data()[static_cast<size_t>(i)] -
                       e_map.data()[static_cast<size_t>(i)]) < 1e-12);
    for (int64_t i = 0; i < m_map.numel(); ++i)
        CHECK(std::abs(out[0].context[0].data()[static_cast<size_t>(i)] -
                       m_map.data()[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("split_dynamic_tensors halves along channels") {
    Rng rng(72);
    const Tensor m = rand_t({8, 3, 4}, rng);
    const auto f = split_dynamic_tensors(m);
    CHECK(f.a.shape() == Shape{4, 3, 4});
    for (int64_t i = 0; i < 48; ++i) {
        CHECK(f.a.data()[static_cast<size_t>(i)] == m.data()[static_cast<size_t>(i)]);
        CHECK(f.b.data()[static_cast<size_t>(i)] == m.data()[static_cast<size_t>(48 + i)]);
    }
    CHECK_THROWS(split_dynamic_tensors(rand_t({7, 3, 4}, rng)));
}

TEST_CASE("assign_level covers the side-length ranges, ties to the lower level") {
    CHECK(assign_level(64.0, 3, 7) == 3);
    CHECK(assign_level(64.0001, 3, 7) == 4);
    CHECK(assign_level(10.0, 3, 7) == 3);
    CHECK(assign_level(128.0, 3, 7) == 4);
    CHECK(assign_level(300.0, 3, 7) == 6);
    CHECK(assign_level(600.0, 3, 7) == 7);
    CHECK(assign_level(600.0, 3, 5) == 5);  // clamped to the top level
}

TEST_CASE("assign_locations: central half plus the centre cell") {
    // Box covering a whole 64-px image at stride 8: central half spans
    // [16,48] so exactly the 4x4 inner cells qualify.
    const Box2D full{0.0, 0.0, 64.0, 64.0};
    const auto locs = assign_locations(full, 8, 8, 8);
    CHECK(locs.size() == 16);
    for (const auto& [h, w] : locs) {
        CHECK(h >= 2);
        CHECK(h <= 5);
        CHECK(w >= 2);
        CHECK(w <= 5);
    }

    // A sliver whose central half contains no cell centre still yields the
    // cell containing the box centre.
    const Box2D sliver{33.0, 10.0, 35.0, 11.0};
    const auto locs2 = assign_locations(sliver, 8, 8, 8);
    REQUIRE(locs2.size() == 1);
    CHECK(locs2[0].first == 1);   // floor(10.5 / 8)
    CHECK(locs2[0].second == 4);  // floor(34 / 8)
}

TEST_CASE("assign_and_filter agrees with an exhaustive-rule oracle") {
    Rng rng(73);
    const int level_min = 3;
    std::vector<Tensor> embed_maps;
    std::vector<std::pair<int64_t, int64_t>> grids;
    int64_t h0 = 40, w0 = 52;
    for (int l = 0; l < 3; ++l) {
        embed_maps.push_back(rand_t({5, h0, w0}, rng));
        grids.emplace_back(h0, w0);
        h0 = (h0 + 1) / 2;
        w0 = (w0 + 1) / 2;
    }
    std::vector<GtObject2D> gts;
    for (int i = 0; i < 5; ++i) {
        const double x1 = rng.uniform(0.0, 200.0), y1 = rng.uniform(0.0, 150.0);
        gts.push_back({{x1, y1, x1 + rng.uniform(4.0, 150.0), y1 + rng.uniform(4.0, 150.0)},
                       i % 3});
    }

    const auto proposals = assign_and_filter(embed_maps, level_min, gts);

    // Exhaustive re-derivation of the assignment rule.
    size_t count = 0;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
        const Box2D& box = gts[gi].box;
        const double longest = std::max(box.width(), box.height());
        const int level = assign_level(longest, level_min, level_min + 2);
        const int stride = 1 << level;
        const auto& [gh, gw] = grids[static_cast<size_t>(level - level_min)];
        const double cx = 0.5 * (box.x1 + box.x2), cy = 0.5 * (box.y1 + box.y2);
        std::vector<std::pair<int, int>> expect;
        for (int hh = 0; hh < gh; ++hh)
            for (int ww = 0; ww < gw; ++ww) {
                const double px = (ww + 0.5) * stride, py = (hh + 0.5) * stride;
                if (std::abs(px - cx) <= 0.25 * box.width() &&
                    std::abs(py - cy) <= 0.25 * box.height())
                    expect.emplace_back(hh, ww);
            }
        const int ch = std::clamp<int>(static_cast<int>(std::floor(cy / stride)), 0,
                                       static_cast<int>(gh) - 1);
        const int cw = std::clamp<int>(static_cast<int>(std::floor(cx / stride)), 0,
                                       static_cast<int>(gw) - 1);
        if (std::find(expect.begin(), expect.end(), std::make_pair(ch, cw)) == expect.end())
            expect.emplace_back(ch, cw);
        std::sort(expect.begin(), expect.end());

        std::vector<std::pair<int, int>> got;
        for (const auto& p : proposals)
            if (p.instance_index == static_cast<int>(gi)) {
                CHECK(p.level == level);
                CHECK(p.class_id == gts[gi].class_id);
                got.emplace_back(p.grid_h, p.grid_w);
                // The carried embedding is the map column at the location.
                const Tensor& emap = embed_maps[static_cast<size_t>(level - level_min)];
                for (int64_t ch2 = 0; ch2 < 5; ++ch2)
                    CHECK(p.embedding.data()[static_cast<size_t>(ch2)] ==
                          emap.data()[static_cast<size_t>((ch2 * emap.dim(1) + p.grid_h) *
                                                              emap.dim(2) +
                                                          p.grid_w)]);
            }
        std::sort(got.begin(), got.end());
        CHECK(got == expect);
        count += got.size();
    }
    CHECK(count == proposals.size());
}

TEST_CASE("dense branch: single level, plain-FPN degeneracy, transcription oracle") {
    Rng rng(74);
    const int64_t c = 4;

    // Single level: one merge call.
    {
        const Tensor p5 = rand_t({c, 4, 6}, rng);
        DenseTaskParams dp;
        dp.lateral.push_back({rand_t({c, c, 3, 3}, rng), rand_t({c}, rng)});
        dyn::Rank1ConvLayer layer;
        layer.weight = rand_t({c, c, 3, 3}, rng);
        dp.refine.push_back(layer);
        dyn::Rank1Factors f{rand_t({c, 4, 6}, rng), rand_t({c, 4, 6}, rng)};
        const dyn::Rank1Factors fs[] = {f};
        const Tensor out = dense_branch_forward(make_pyramid(5, {p5}), fs, dp);
        const Tensor expect =
            dyn::dense_merge_level(p5, Tensor(), f, dp.lateral[0].w, dp.lateral[0].b, layer);
        for (int64_t i = 0; i < out.numel(); ++i)
            CHECK(out.data()[static_cast<size_t>(i)] == expect.data()[static_cast<size_t>(i)]);
    }

    // Unit factors everywhere: a plain top-down pathway with 3x3 laterals.
    {
        std::vector<Tensor> levels = {rand_t({c, 8, 12}, rng), rand_t({c, 4, 6}, rng)};
        DenseTaskParams dp;
        std::vector<dyn::Rank1Factors> fs;
        for (const Tensor& lvl : levels) {
            dp.lateral.push_back({rand_t({c, c, 3, 3}, rng), rand_t({c}, rng)});
            dyn::Rank1ConvLayer layer;
            layer.weight = rand_t({c, c, 3, 3}, rng);
            layer.bias = rand_t({c}, rng);
            dp.refine.push_back(layer);
            fs.push_back({Tensor::ones(lvl.shape()), Tensor::ones(lvl.shape())});
        }
        const Tensor out = dense_branch_forward(make_pyramid(3, levels), fs, dp);
        const Tensor f_top = conv2d(conv2d(levels[1], dp.lateral[1].w, 1, 1, dp.lateral[1].b),
                                    dp.refine[1].weight, 1, 1, dp.refine[1].bias);
        const Tensor x_bot =
            add(conv2d(levels[0], dp.lateral[0].w, 1, 1, dp.lateral[0].b),
                upsample2x_aligned(f_top));
        const Tensor expect = conv2d(x_bot, dp.refine[0].weight, 1, 1, dp.refine[0].bias);
        for (int64_t i = 0; i < out.numel(); ++i)
            CHECK(std::abs(out.data()[static_cast<size_t>(i)] -
                           expect.data()[static_cast<size_t>(i)]) < 1e-12);
    }

    // Five random levels against a straight-line transcription of the fold.
    {
        std::vector<Tensor> levels;
        int64_t h = 33, w = 49;  // odd extents exercise the ceil halving
        for (int l = 0; l < 5; ++l) {
            levels.push_back(rand_t({c, h, w}, rng));
            h = (h + 1) / 2;
            w = (w + 1) / 2;
        }
        DenseTaskParams dp;
        std::vector<dyn::Rank1Factors> fs;
        for (const Tensor& lvl : levels) {
            dp.lateral.push_back({rand_t({c, c, 3, 3}, rng), rand_t({c}, rng)});
            dyn::Rank1ConvLayer layer;
            layer.weight = rand_t({c, c, 3, 3}, rng);
            layer.bias = rand_t({c}, rng);
            dp.refine.push_back(layer);
            fs.push_back({rand_t(lvl.shape(), rng), rand_t(lvl.shape(), rng)});
        }
        const Tensor out = dense_branch_forward(make_pyramid(3, levels), fs, dp);

        Tensor f;
        for (size_t i = levels.size(); i-- > 0;) {
            Tensor x = conv2d(levels[i], dp.lateral[i].w, 1, 1, dp.lateral[i].b);
            if (f.defined()) {
                Tensor up = upsample2x_aligned(f);
                if (up.dim(1) != x.dim(1) || up.dim(2) != x.dim(2))
                    up = crop_spatial(up, x.dim(1), x.dim(2));
                x = add(x, up);
            }
            f = mul(conv2d(mul(x, fs[i].a), dp.refine[i].weight, 1, 1, dp.refine[i].bias),
                    fs[i].b);
        }
        CHECK(out.shape() == f.shape());
        CHECK(out.dim(1) == levels[0].dim(1));  // output stride equals 2^level_min
        for (int64_t i = 0; i < out.numel(); ++i)
            CHECK(std::abs(out.data()[static_cast<size_t>(i)] -
                           f.data()[static_cast<size_t>(i)]) < 1e-9);
    }
}

TEST_CASE("crop_roi: constant map, resize oracle, one-pixel box") {
    Rng rng(75);
    const Tensor flat = Tensor::full({3, 8, 8}, 1.75);
    const Tensor crop = crop_roi(flat, {5.0, 9.0, 40.0, 30.0}, 8, 16);
    for (double v : crop.data()) CHECK(v == doctest::Approx(1.75).epsilon(1e-15));

    // Box equal to the full feature extent on a bilinear ramp: equals the
    // direct align-corners=false bilinear resize.
    const int64_t h = 6, w = 9, out = 12;
    std::vector<double> ramp(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
            ramp[static_cast<size_t>(i * w + j)] = 1.3 * static_cast<double>(i) - 0.4 * static_cast<double>(j) + 2.0;
    const Tensor f = Tensor::from({1, h, w}, ramp);
    const Tensor rc = crop_roi(f, {0.0, 0.0, static_cast<double>(w * 8), static_cast<double>(h * 8)}, 8, out);
    for (int64_t i = 0; i < out; ++i)
        for (int64_t j = 0; j < out; ++j) {
            const double gy = (static_cast<double>(i) + 0.5) * static_cast<double>(h) / out - 0.5;
            const double gx = (static_cast<double>(j) + 0.5) * static_cast<double>(w) / out - 0.5;
            const int64_t y0 = static_cast<int64_t>(std::floor(gy));
            const int64_t x0 = static_cast<int64_t>(std::floor(gx));
            const double wy = gy - static_cast<double>(y0), wx = gx - static_cast<double>(x0);
            const auto read = [&](int64_t yy, int64_t xx) {
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
                return ramp[static_cast<size_t>(yy * w + xx)];
            };
            const double expect = (1 - wy) * ((1 - wx) * read(y0, x0) + wx * read(y0, x0 + 1)) +
                                  wy * ((1 - wx) * read(y0 + 1, x0) + wx * read(y0 + 1, x0 + 1));
            CHECK(std::abs(rc.data()[static_cast<size_t>(i * out + j)] - expect) < 1e-9);
        }

    // One-pixel box: every sample interpolates the same 4-neighbourhood.
    const Tensor small = crop_roi(rand_t({2, 8, 8}, rng), {24.0, 24.0, 25.0, 25.0}, 8, 56);
    for (int64_t ch = 0; ch < 2; ++ch) {
        double lo = 1e30, hi = -1e30;
        for (int64_t i = 0; i < 56 * 56; ++i) {
            const double v = small.data()[static_cast<size_t>(ch * 56 * 56 + i)];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(hi - lo < 0.3);  // interpolation within a single cell
    }

    CHECK_THROWS(crop_roi(flat, {10.0, 10.0, 10.0, 20.0}));
}

TEST_CASE("pyramid validation and end-to-end gradients on a two-level toy pyramid") {
    Rng rng(76);
    const int64_t c = 4;
    FeaturePyramid bad = make_pyramid(3, {rand_t({c, 8, 8}, rng), rand_t({c, 5, 4}, rng)});
    CHECK_THROWS(bad.validate());

    std::vector<Tensor> levels = {rand_t({c, 6, 8}, rng), rand_t({c, 3, 4}, rng)};
    DenseTaskParams dp;
    std::vector<dyn::Rank1Factors> fs;
    for (const Tensor& lvl : levels) {
        dp.lateral.push_back({rand_t({c, c, 3, 3}, rng), rand_t({c}, rng)});
        dyn::Rank1ConvLayer layer;
        layer.weight = rand_t({c, c, 3, 3}, rng);
        dp.refine.push_back(layer);
        fs.push_back({rand_t(lvl.shape(), rng), rand_t(lvl.shape(), rng)});
    }
    // Scalar loss on F back to each pyramid level and a tower weight.
    for (int which = 0; which < 2; ++which) {
        const auto f = [&](const Tensor& x) {
            std::vector<Tensor> lv = levels;
            lv[static_cast<size_t>(which)] = x;
            const Tensor out = dense_branch_forward(make_pyramid(3, lv), fs, dp);
            return sum(mul(out, out));
        };
        CHECK(grad_check("dense_branch wrt P", f, levels[static_cast<size_t>(which)], 1e-5, 1e-4,
                         16)
                  .pass);
    }
    const auto fw = [&](const Tensor& x) {
        DenseTaskParams dp2 = dp;
        dp2.lateral[0].w = x;
        const Tensor out = dense_branch_forward(make_pyramid(3, levels), fs, dp2);
        return sum(mul(out, out));
    };
    CHECK(grad_check("dense_branch wrt lateral", fw, dp.lateral[0].w, 1e-5, 1e-4, 16).pass);
}
