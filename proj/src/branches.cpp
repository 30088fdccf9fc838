#include "d2bnet/branches.hpp"

#include <algorithm>
#include <cmath>

namespace d2b::branches {

void BranchConfig::validate() const {
    check_arg(channels > 0 && channels % 8 == 0,
              "branch config: channel width must be a positive multiple of 8");
    check_arg(tower_depth >= 1, "branch config: tower depth must be >= 1");
    check_arg(level_min >= 1 && level_max >= level_min, "branch config: bad level range");
    check_arg(dense_width >= attention_bases,
              "branch config: dense width must be >= the attention basis count");
    check_arg(dense_width == channels,
              "branch config: the basis-map width equals the branch width here");
    check_arg(pad_divisibility >= 1, "branch config: bad padding divisibility");
    check_arg(num_attributes >= 0, "branch config: attribute count must be >= 0");
}

const Tensor& FeaturePyramid::at_level(int level) const {
    check_arg(level >= level_min && level <= level_max(), "pyramid: level out of range");
    return levels[static_cast<size_t>(level - level_min)];
}

void FeaturePyramid::validate() const {
    check_arg(!levels.empty(), "pyramid: no levels");
    for (size_t i = 0; i < levels.size(); ++i) {
        check_arg(levels[i].defined() && levels[i].rank() == 3, "pyramid: levels must be (C,H,W)");
        check_arg(levels[i].dim(0) == levels[0].dim(0), "pyramid: channel width must be uniform");
        if (i > 0) {
            check_arg(levels[i].dim(1) == (levels[i - 1].dim(1) + 1) / 2 &&
                          levels[i].dim(2) == (levels[i - 1].dim(2) + 1) / 2,
                      "pyramid: consecutive levels must halve extents (rounding up)");
        }
    }
}

std::vector<InstanceLevelOutput> instance_branch_forward(const FeaturePyramid& pyr,
                                                         const InstanceBranchParams& params) {
    pyr.validate();
    check_arg(!params.tower.empty(), "instance branch: empty tower");
    std::vector<InstanceLevelOutput> out;
    out.reserve(pyr.levels.size());
    for (const Tensor& p : pyr.levels) {
        InstanceLevelOutput lvl;
        Tensor t = p;
        for (const ConvParam& cp : params.tower) t = tanh(conv2d(t, cp.w, 1, 1, cp.b));
        lvl.tower_feat = t;
        lvl.embed_map = conv2d(t, params.top_embed.w, 1, 1, params.top_embed.b);
        for (const ConvParam& cp : params.top_context)
            lvl.context.push_back(conv2d(t, cp.w, 1, 1, cp.b));
        out.push_back(std::move(lvl));
    }
    return out;
}

dyn::Rank1Factors split_dynamic_tensors(const Tensor& m) {
    check_arg(m.rank() == 3 && m.dim(0) % 2 == 0,
              "split_dynamic_tensors: context must have an even channel count");
    const int64_t half = m.dim(0) / 2;
    return {slice(m, 0, 0, half), slice(m, 0, half, half)};
}

int assign_level(double longest_side, int level_min, int level_max) {
    static constexpr double kThresholds[] = {64.0, 128.0, 256.0, 512.0};
    int level = 3;
    for (double t : kThresholds)
        if (longest_side > t) ++level;
    return std::clamp(level, level_min, level_max);
}

std::vector<std::pair<int, int>> assign_locations(const Box2D& box, int stride, int64_t grid_h,
                                                  int64_t grid_w) {
    check_arg(box.x2 > box.x1 && box.y2 > box.y1, "assign_locations: degenerate box");
    const double cx = 0.5 * (box.x1 + box.x2);
    const double cy = 0.5 * (box.y1 + box.y2);
    const double rx = 0.25 * box.width();
    const double ry = 0.25 * box.height();

    std::vector<std::pair<int, int>> out;
    const auto cell_of = [&](double px) { return static_cast<int>(std::floor(px / stride)); };
    const int h0 = std::clamp<int>(cell_of(cy - ry), 0, static_cast<int>(grid_h) - 1);
    const int h1 = std::clamp<int>(cell_of(cy + ry), 0, static_cast<int>(grid_h) - 1);
    const int w0 = std::clamp<int>(cell_of(cx - rx), 0, static_cast<int>(grid_w) - 1);
    const int w1 = std::clamp<int>(cell_of(cx + rx), 0, static_cast<int>(grid_w) - 1);
    for (int gh = h0; gh <= h1; ++gh)
        for (int gw = w0; gw <= w1; ++gw) {
            const double py = (gh + 0.5) * stride;
            const double px = (gw + 0.5) * stride;
            if (std::abs(px - cx) <= rx && std::abs(py - cy) <= ry) out.emplace_back(gh, gw);
        }

    const int ch = std::clamp<int>(cell_of(cy), 0, static_cast<int>(grid_h) - 1);
    const int cw = std::clamp<int>(cell_of(cx), 0, static_cast<int>(grid_w) - 1);
    if (std::find(out.begin(), out.end(), std::make_pair(ch, cw)) == out.end())
        out.emplace_back(ch, cw);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<InstanceProposal> assign_and_filter(std::span<const Tensor> embed_maps,
                                                int level_min, std::span<const GtObject2D> gts) {
    check_arg(!embed_maps.empty(), "assign_and_filter: no embedding maps");
    const int level_max = level_min + static_cast<int>(embed_maps.size()) - 1;
    std::vector<InstanceProposal> proposals;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
        const GtObject2D& gt = gts[gi];
        const double longest = std::max(gt.box.width(), gt.box.height());
        const int level = assign_level(longest, level_min, level_max);
        const Tensor& emap = embed_maps[static_cast<size_t>(level - level_min)];
        const int stride = FeaturePyramid::stride(level);
        const auto locs = assign_locations(gt.box, stride, emap.dim(1), emap.dim(2));
        for (const auto& [gh, gw] : locs) {
            InstanceProposal p;
            // Differentiable read of the embedding column at (gh, gw).
            p.embedding = reshape(slice(slice(emap, 1, gh, 1), 2, gw, 1), {emap.dim(0)});
            p.box2d = gt.box;
            p.class_id = gt.class_id;
            p.level = level;
            p.grid_h = gh;
            p.grid_w = gw;
            p.instance_index = static_cast<int>(gi);
            proposals.push_back(std::move(p));
        }
    }
    return proposals;
}

Tensor dense_branch_forward(const FeaturePyramid& pyr,
                            std::span<const dyn::Rank1Factors> factors,
                            const DenseTaskParams& params) {
    pyr.validate();
    const size_t n = pyr.levels.size();
    check_arg(factors.size() == n, "dense branch: one factor pair per level required");
    check_arg(params.lateral.size() == n && params.refine.size() == n,
              "dense branch: one lateral and refine layer per level required");
    Tensor f;  // undefined at the topmost level
    for (size_t i = n; i-- > 0;) {
        f = dyn::dense_merge_level(pyr.levels[i], f, factors[i], params.lateral[i].w,
                                   params.lateral[i].b, params.refine[i]);
    }
    return f;
}

Tensor crop_roi(const Tensor& f, const Box2D& box_pixels, int stride, int out_size) {
    check_arg(box_pixels.x2 > box_pixels.x1 && box_pixels.y2 > box_pixels.y1,
              "crop_roi: box must have positive area");
    const double inv = 1.0 / static_cast<double>(stride);
    return bilinear_crop(f, box_pixels.y1 * inv, box_pixels.x1 * inv, box_pixels.y2 * inv,
                         box_pixels.x2 * inv, out_size, out_size);
}

}  // namespace d2b::branches
