#include "d2bnet/network.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "d2bnet/rng.hpp"
#include "d2bnet/tensor_io.hpp"

namespace d2b::harness {

const char* task_name(Task t) {
    switch (t) {
        case Task::seg: return "seg";
        case Task::det3d: return "det3d";
        case Task::depth: return "depth";
    }
    return "?";
}

Task task_from_name(const std::string& name) {
    if (name == "seg") return Task::seg;
    if (name == "det3d") return Task::det3d;
    if (name == "depth") return Task::depth;
    throw std::invalid_argument("unknown task: " + name);
}

const char* routing_mode_name(RoutingMode m) {
    switch (m) {
        case RoutingMode::none: return "none";
        case RoutingMode::frozen: return "frozen";
        case RoutingMode::cdr: return "cdr";
        case RoutingMode::tdr: return "tdr";
    }
    return "?";
}

RoutingMode routing_mode_from_name(const std::string& name) {
    if (name == "none") return RoutingMode::none;
    if (name == "frozen") return RoutingMode::frozen;
    if (name == "cdr") return RoutingMode::cdr;
    if (name == "tdr") return RoutingMode::tdr;
    throw std::invalid_argument("unknown routing mode: " + name);
}

void NetworkConfig::validate() const {
    branch.validate();
    check_arg(!tasks.empty(), "network config: at least one task required");
    for (size_t i = 0; i < tasks.size(); ++i)
        for (size_t j = i + 1; j < tasks.size(); ++j)
            check_arg(tasks[i] != tasks[j], "network config: duplicate task");
    check_arg(num_stuff >= 1 && num_thing_classes >= 1, "network config: bad taxonomy");
}

namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace

// Parameter initialisation is keyed by (seed, name) so that adding or
// removing unrelated parameters (e.g. routers) leaves every other tensor's
// initial values untouched.
Tensor Network::make_param(const std::string& name, Shape shape, double fan_in_scale) {
    Rng rng(seed_ ^ fnv1a(name));
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    const double bound = fan_in_scale;
    for (double& v : data) v = rng.uniform(-bound, bound);
    Tensor t = Tensor::from(std::move(shape), std::move(data));
    t.requires_grad();
    params_.emplace_back(name, t);
    return t;
}

Tensor Network::make_zero_param(const std::string& name, Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    t.requires_grad();
    params_.emplace_back(name, t);
    return t;
}

Network::Network(NetworkConfig cfg, uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    const branches::BranchConfig& b = cfg_.branch;
    const int c = b.channels;
    const int64_t e = b.embed_dim();
    const int levels = b.num_levels();
    const int n_tasks = task_count();

    const auto conv_scale = [](int ci, int k) { return 1.0 / std::sqrt(double(ci) * k * k); };

    for (int l = 0; l < levels; ++l) {
        const std::string p = "stem.l" + std::to_string(b.level_min + l);
        stem_.push_back({make_param(p + ".w", {c, 3, 3, 3}, conv_scale(3, 3)),
                         make_zero_param(p + ".b", {c})});
    }
    for (int d = 0; d < b.tower_depth; ++d) {
        const std::string p = "tower." + std::to_string(d);
        instance_.tower.push_back({make_param(p + ".w", {c, c, 3, 3}, conv_scale(c, 3)),
                                   make_zero_param(p + ".b", {c})});
    }
    instance_.top_embed = {make_param("top.embed.w", {e, c, 3, 3}, conv_scale(c, 3)),
                           make_zero_param("top.embed.b", {e})};
    {
        // Start 3-D decodes valid: depth channel biased into the scene range
        // and the orientation vector at (sin,cos) = (0,1).
        auto bias = instance_.top_embed.b.mutable_data();
        bias[static_cast<size_t>(b.e3d_off() + 2)] = 20.0;
        bias[static_cast<size_t>(b.e3d_off() + 7)] = 1.0;
    }
    for (int t = 0; t < n_tasks; ++t) {
        const std::string p = std::string("top.ctx.") + task_name(cfg_.tasks[t]);
        instance_.top_context.push_back({make_param(p + ".w", {2 * c, c, 3, 3}, conv_scale(c, 3)),
                                         make_zero_param(p + ".b", {2 * c})});
    }

    dense_.resize(static_cast<size_t>(n_tasks));
    for (int t = 0; t < n_tasks; ++t) {
        for (int l = 0; l < levels; ++l) {
            const std::string p = std::string("dense.") + task_name(cfg_.tasks[t]) + ".l" +
                                  std::to_string(b.level_min + l);
            dense_[t].lateral.push_back({make_param(p + ".lat.w", {c, c, 3, 3}, conv_scale(c, 3)),
                                         make_zero_param(p + ".lat.b", {c})});
            dyn::Rank1ConvLayer layer;
            layer.weight = make_param(p + ".dr1.w", {c, c, 3, 3}, conv_scale(c, 3));
            layer.bias = make_zero_param(p + ".dr1.b", {c});
            dense_[t].refine.push_back(std::move(layer));
        }
    }

    const bool learned_routing =
        n_tasks >= 2 && (cfg_.routing == RoutingMode::cdr || cfg_.routing == RoutingMode::tdr);
    if (learned_routing) {
        const int64_t in_dim = cfg_.routing == RoutingMode::tdr ? c + 2 * (c / 8) : c;
        for (int l = 0; l < levels; ++l) {
            const std::string lvl = std::to_string(b.level_min + l);
            // Routers start at the neutral 0.5/uniform state.
            inst_routers_.push_back({make_zero_param("router.inst.l" + lvl + ".w", {2 * c, in_dim}),
                                     make_zero_param("router.inst.l" + lvl + ".b", {2 * c})});
            dense_routers_.push_back(
                {make_zero_param("router.dense.l" + lvl + ".w", {2 * c, in_dim}),
                 make_zero_param("router.dense.l" + lvl + ".b", {2 * c})});
        }
        if (cfg_.routing == RoutingMode::tdr)
            task_embed_ = make_param("router.task_embed.w", {c / 8, n_tasks},
                                     1.0 / std::sqrt(double(n_tasks)));
    }

    attention_ = {make_param("heads.attn.u", {b.attention_bases, b.attention_factors, 14}, 0.5),
                  make_param("heads.attn.v", {b.attention_bases, b.attention_factors, 14}, 0.5)};
    pano_stuff_ = make_param("heads.pano.stuff", {b.dense_width, cfg_.num_stuff},
                             1.0 / std::sqrt(double(b.dense_width)));
    w_z_ = make_zero_param("heads.wz", {b.dense_width});
    depth_.conv0 = {make_param("heads.depth.0.w", {c, c, 3, 3}, conv_scale(c, 3)),
                    make_zero_param("heads.depth.0.b", {c})};
    depth_.conv1 = {make_param("heads.depth.1.w", {c, c, 3, 3}, conv_scale(c, 3)),
                    make_zero_param("heads.depth.1.b", {c})};
    depth_.conv2 = {make_param("heads.depth.2.w", {1, c, 3, 3}, conv_scale(c, 3)),
                    make_zero_param("heads.depth.2.b", {1})};
    depth_.conv2.b.mutable_data()[0] = 20.0;  // mid-range start
}

std::optional<int> Network::task_index(Task t) const {
    for (size_t i = 0; i < cfg_.tasks.size(); ++i)
        if (cfg_.tasks[i] == t) return static_cast<int>(i);
    return std::nullopt;
}

Tensor Network::parameter(const std::string& name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return t;
    throw std::invalid_argument("no parameter named " + name);
}

void Network::zero_grads() {
    for (auto& [n, t] : params_) t.zero_grad();
}

void Network::sgd_step(double lr) {
    for (auto& [n, t] : params_) {
        auto g = t.grad();
        if (g.empty()) continue;
        auto d = t.mutable_data();
        for (size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
    }
}

int64_t Network::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
}

branches::FeaturePyramid Network::build_pyramid(const Tensor& image) const {
    check_arg(image.rank() == 3 && image.dim(0) == 3, "network: image must be (3,H,W)");
    check_arg(image.dim(1) % cfg_.branch.pad_divisibility == 0 &&
                  image.dim(2) % cfg_.branch.pad_divisibility == 0,
              "network: image extents must be divisible by " +
                  std::to_string(cfg_.branch.pad_divisibility));
    branches::FeaturePyramid pyr;
    pyr.level_min = cfg_.branch.level_min;
    for (int l = 0; l < cfg_.branch.num_levels(); ++l) {
        const int factor = 1 << (cfg_.branch.level_min + l);
        pyr.levels.push_back(
            conv2d(avg_pool(image, factor), stem_[l].w, 1, 1, stem_[l].b));
    }
    return pyr;
}

routing::RoutingScores Network::router_scores(const routing::RouterParams& rp,
                                              const Tensor& input, int primary,
                                              int secondary) const {
    if (cfg_.routing == RoutingMode::tdr) {
        routing::TaskEmbedding em{primary, routing::task_embedding_lookup(task_embed_, primary)};
        routing::TaskEmbedding ea{secondary,
                                  routing::task_embedding_lookup(task_embed_, secondary)};
        return routing::task_router(input, em, ea, rp);
    }
    return routing::channel_router(input, rp);
}

Tensor Network::route_for_task(const std::vector<Tensor>& feats, int m,
                               const std::vector<routing::RoutingScores>& pair_scores,
                               std::vector<double>* log) const {
    const int n_tasks = static_cast<int>(feats.size());
    std::vector<int> secondaries;
    for (int a = 0; a < n_tasks; ++a)
        if (a != m) secondaries.push_back(a);

    if (secondaries.size() == 1) {
        const routing::RoutingScores& s = pair_scores[0];
        if (log) log->assign(s.primary.data().begin(), s.primary.data().end());
        return routing::route_features(feats[static_cast<size_t>(m)],
                                       feats[static_cast<size_t>(secondaries[0])], s);
    }
    // Several secondaries: the primary weight is the mean over the pair
    // applications, secondary contributions are summed.
    Tensor mean_primary = pair_scores[0].primary;
    for (size_t i = 1; i < pair_scores.size(); ++i)
        mean_primary = add(mean_primary, pair_scores[i].primary);
    mean_primary = mul_scalar(mean_primary, 1.0 / static_cast<double>(pair_scores.size()));
    if (log) log->assign(mean_primary.data().begin(), mean_primary.data().end());
    Tensor out = scale_channels(feats[static_cast<size_t>(m)], mean_primary);
    for (size_t i = 0; i < secondaries.size(); ++i)
        out = add(out, scale_channels(feats[static_cast<size_t>(secondaries[i])],
                                      pair_scores[i].secondary));
    return out;
}

Network::Forward Network::forward(const Tensor& image) const {
    Forward fwd;
    fwd.pyramid = build_pyramid(image);
    fwd.instance = branches::instance_branch_forward(fwd.pyramid, instance_);

    const int n_tasks = task_count();
    const int levels = cfg_.branch.num_levels();
    const bool routed = n_tasks >= 2 && cfg_.routing != RoutingMode::none;
    const bool frozen = cfg_.routing == RoutingMode::frozen;
    const int c = cfg_.branch.channels;

    if (routed) {
        fwd.routing_instance.assign(n_tasks, std::vector<std::vector<double>>(levels));
        fwd.routing_dense.assign(n_tasks, std::vector<std::vector<double>>(levels));
    }

    const routing::RoutingScores pass_through{Tensor::ones({c}), Tensor::zeros({c})};

    // Instance-branch routing of the per-task dynamic tensors. The A and B
    // halves are routed with the same per-channel scores.
    std::vector<std::vector<dyn::Rank1Factors>> factors(
        static_cast<size_t>(n_tasks), std::vector<dyn::Rank1Factors>(levels));
    for (int l = 0; l < levels; ++l) {
        std::vector<dyn::Rank1Factors> raw(static_cast<size_t>(n_tasks));
        for (int t = 0; t < n_tasks; ++t)
            raw[t] = branches::split_dynamic_tensors(fwd.instance[l].context[t]);
        if (!routed) {
            for (int t = 0; t < n_tasks; ++t) factors[t][l] = raw[t];
            continue;
        }
        std::vector<Tensor> a_feats(static_cast<size_t>(n_tasks)),
            b_feats(static_cast<size_t>(n_tasks));
        for (int t = 0; t < n_tasks; ++t) {
            a_feats[t] = raw[t].a;
            b_feats[t] = raw[t].b;
        }
        for (int m = 0; m < n_tasks; ++m) {
            std::vector<routing::RoutingScores> pair_scores;
            for (int a = 0; a < n_tasks; ++a) {
                if (a == m) continue;
                pair_scores.push_back(frozen ? pass_through
                                             : router_scores(inst_routers_[l],
                                                             fwd.instance[l].tower_feat, m, a));
            }
            factors[m][l].a =
                route_for_task(a_feats, m, pair_scores, &fwd.routing_instance[m][l]);
            factors[m][l].b = route_for_task(b_feats, m, pair_scores, nullptr);
        }
    }

    // Dense branch, all tasks folded level by level so routing can mix them.
    std::vector<Tensor> f(static_cast<size_t>(n_tasks));
    for (int l = levels; l-- > 0;) {
        std::vector<Tensor> merged(static_cast<size_t>(n_tasks));
        for (int t = 0; t < n_tasks; ++t)
            merged[t] = dyn::merge_pyramid_input(fwd.pyramid.levels[l], f[t],
                                                 dense_[t].lateral[l].w, dense_[t].lateral[l].b);
        for (int m = 0; m < n_tasks; ++m) {
            Tensor input = merged[m];
            if (routed) {
                std::vector<routing::RoutingScores> pair_scores;
                for (int a = 0; a < n_tasks; ++a) {
                    if (a == m) continue;
                    pair_scores.push_back(
                        frozen ? pass_through
                               : router_scores(dense_routers_[l], merged[m], m, a));
                }
                input = route_for_task(merged, m, pair_scores, &fwd.routing_dense[m][l]);
            }
            f[m] = dyn::rank1_conv(input, factors[m][l], dense_[m].refine[l]);
        }
    }
    fwd.basis = std::move(f);
    return fwd;
}

namespace {

// Nearest-pixel sample of one instance's binary mask over the RoI grid.
std::vector<double> sample_gt_mask(const metrics::PanopticMap& pano, int32_t instance_id,
                                   const branches::Box2D& box, int out) {
    std::vector<double> target(static_cast<size_t>(out) * out, 0.0);
    const double sy = box.height() / out, sx = box.width() / out;
    for (int i = 0; i < out; ++i)
        for (int j = 0; j < out; ++j) {
            const double py = box.y1 + (i + 0.5) * sy;
            const double px = box.x1 + (j + 0.5) * sx;
            const int64_t iy = std::clamp<int64_t>(static_cast<int64_t>(std::floor(py)), 0,
                                                   pano.h - 1);
            const int64_t ix = std::clamp<int64_t>(static_cast<int64_t>(std::floor(px)), 0,
                                                   pano.w - 1);
            if (pano.instance_id[static_cast<size_t>(iy * pano.w + ix)] == instance_id)
                target[static_cast<size_t>(i) * out + j] = 1.0;
        }
    return target;
}

Tensor average(const std::vector<Tensor>& xs) {
    Tensor acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return mul_scalar(acc, 1.0 / static_cast<double>(xs.size()));
}

}  // namespace

Network::SceneLosses Network::compute_losses(const SyntheticScene& scene, const Forward& fwd,
                                             const heads::LossWeights& weights) const {
    const branches::BranchConfig& b = cfg_.branch;
    SceneLosses out;

    std::vector<branches::GtObject2D> gts;
    for (const GtInstance& gi : scene.objects) gts.push_back({gi.box2d, gi.class_id});
    std::vector<Tensor> embed_maps;
    for (const auto& lvl : fwd.instance) embed_maps.push_back(lvl.embed_map);
    const auto proposals = branches::assign_and_filter(embed_maps, b.level_min, gts);
    out.num_proposals = static_cast<int>(proposals.size());

    std::vector<std::vector<const branches::InstanceProposal*>> by_instance(scene.objects.size());
    for (const auto& p : proposals)
        by_instance[static_cast<size_t>(p.instance_index)].push_back(&p);
    std::vector<int> included;  // instances with at least one proposal
    for (size_t i = 0; i < by_instance.size(); ++i) {
        if (!by_instance[i].empty())
            included.push_back(static_cast<int>(i));
        else
            out.diagnostics.push_back("instance " + std::to_string(i) +
                                      " has no proposals; excluded from the dynamic heads");
    }

    const int stride_out = branches::FeaturePyramid::stride(b.level_min);

    if (auto seg = task_index(Task::seg); seg.has_value()) {
        const Tensor& f = fwd.basis[static_cast<size_t>(*seg)];
        std::vector<Tensor> thing_cols;
        std::vector<Tensor> mask_losses;
        for (int ii : included) {
            std::vector<Tensor> embs;
            for (const auto* p : by_instance[static_cast<size_t>(ii)]) embs.push_back(p->embedding);
            const Tensor mean_emb = heads::aggregate_instance_embeddings(embs);
            thing_cols.push_back(reshape(slice(mean_emb, 0, b.pano_off(), b.pano_len()),
                                         {b.pano_len()}));
            const GtInstance& gi = scene.objects[static_cast<size_t>(ii)];
            const Tensor crop = branches::crop_roi(f, gi.box2d, stride_out);
            heads::SegEmbedding se{slice(mean_emb, 0, b.t_off(), b.t_len()),
                                   slice(mean_emb, 0, b.s_off(), b.s_len())};
            const Tensor logits = heads::factored_attention_mask(crop, se, attention_);
            const auto target = sample_gt_mask(scene.pano, ii + 1, gi.box2d, 56);
            mask_losses.push_back(bce_with_logits_mean(logits, target));
        }
        if (!mask_losses.empty()) out.components.mask = average(mask_losses);

        Tensor logits = heads::panoptic_logits(f, pano_stuff_, thing_cols);
        for (int l = 0; l < b.level_min; ++l) logits = upsample2x_aligned(logits);
        if (logits.dim(1) != scene.height || logits.dim(2) != scene.width)
            logits = crop_spatial(logits, scene.height, scene.width);
        std::vector<int> target(static_cast<size_t>(scene.height) * scene.width, -1);
        std::vector<int> chan_of_instance(scene.objects.size() + 1, -1);
        for (size_t j = 0; j < included.size(); ++j)
            chan_of_instance[static_cast<size_t>(included[j]) + 1] =
                cfg_.num_stuff + static_cast<int>(j);
        for (size_t p = 0; p < target.size(); ++p) {
            const int32_t inst = scene.pano.instance_id[p];
            target[p] = inst == 0 ? scene.pano.class_id[p]
                                  : chan_of_instance[static_cast<size_t>(inst)];
        }
        out.components.pano = cross_entropy_map(logits, target);
    }

    if (auto det = task_index(Task::det3d); det.has_value()) {
        const Tensor& f = fwd.basis[static_cast<size_t>(*det)];
        std::vector<Tensor> ctr_losses, loc_terms, dim_terms, ori_terms, attr_losses;
        for (int ii : included) {
            const GtInstance& gi = scene.objects[static_cast<size_t>(ii)];
            const Tensor crop = branches::crop_roi(f, gi.box2d, stride_out);
            const geom::Vec2 gt_uv = geom::project(scene.intrinsics, gi.box3d.center);
            for (const auto* p : by_instance[static_cast<size_t>(ii)]) {
                const int stride = branches::FeaturePyramid::stride(p->level);
                const double loc_u = (p->grid_w + 0.5) * stride;
                const double loc_v = (p->grid_h + 0.5) * stride;
                const Tensor e3d = slice(p->embedding, 0, b.e3d_off(), b.e3d_len());
                std::string reason;
                auto decoded = heads::decode_3d(e3d, loc_u, loc_v, stride, scene.intrinsics,
                                                crop, w_z_, &reason);
                if (!decoded.has_value()) {
                    ++out.num_rejected_decodes;
                    out.diagnostics.push_back("decode rejected (" + reason + ") for instance " +
                                              std::to_string(ii));
                    continue;
                }
                const Tensor gt_off = Tensor::from(
                    {2}, {(gt_uv.u - loc_u) / stride, (gt_uv.v - loc_v) / stride});
                ctr_losses.push_back(l1_loss(slice(e3d, 0, 0, 2), gt_off));
                const auto terms = heads::corner_loss_terms(*decoded, gi.box3d);
                loc_terms.push_back(terms.loc);
                dim_terms.push_back(terms.dim);
                ori_terms.push_back(terms.ori);
                if (decoded->attr_logits.defined())
                    attr_losses.push_back(
                        cross_entropy_vec(decoded->attr_logits, gi.attribute));
            }
        }
        if (!ctr_losses.empty()) out.components.ctr = average(ctr_losses);
        if (!loc_terms.empty()) out.components.loc = average(loc_terms);
        if (!dim_terms.empty()) out.components.dim = average(dim_terms);
        if (!ori_terms.empty()) out.components.ori = average(ori_terms);
        if (!attr_losses.empty()) out.components.attr = average(attr_losses);
    }

    if (auto dep = task_index(Task::depth); dep.has_value()) {
        Tensor pred = heads::depth_head(fwd.basis[static_cast<size_t>(*dep)], depth_);
        if (pred.dim(1) != scene.height || pred.dim(2) != scene.width)
            pred = crop_spatial(pred, scene.height, scene.width);
        out.components.depth = l1_loss_masked(pred, scene.depth, scene.depth_valid);
    }

    out.total = heads::total_loss(out.components, weights);
    return out;
}

metrics::PanopticMap Network::predict_panoptic(const SyntheticScene& scene,
                                               const Forward& fwd) const {
    const branches::BranchConfig& b = cfg_.branch;
    const auto seg = task_index(Task::seg);
    check_arg(seg.has_value(), "predict_panoptic: segmentation task not enabled");
    const Tensor& f = fwd.basis[static_cast<size_t>(*seg)];

    std::vector<branches::GtObject2D> gts;
    for (const GtInstance& gi : scene.objects) gts.push_back({gi.box2d, gi.class_id});
    std::vector<Tensor> embed_maps;
    for (const auto& lvl : fwd.instance) embed_maps.push_back(lvl.embed_map);
    const auto proposals = branches::assign_and_filter(embed_maps, b.level_min, gts);
    std::vector<std::vector<Tensor>> pano_embs(scene.objects.size());
    for (const auto& p : proposals)
        pano_embs[static_cast<size_t>(p.instance_index)].push_back(
            reshape(slice(p.embedding, 0, b.pano_off(), b.pano_len()), {b.pano_len()}));
    std::vector<Tensor> thing_cols;
    std::vector<int> included;
    for (size_t i = 0; i < pano_embs.size(); ++i) {
        if (pano_embs[i].empty()) continue;
        thing_cols.push_back(heads::aggregate_instance_embeddings(pano_embs[i]));
        included.push_back(static_cast<int>(i));
    }

    Tensor logits = heads::panoptic_logits(f, pano_stuff_, thing_cols);
    for (int l = 0; l < b.level_min; ++l) logits = upsample2x_aligned(logits);
    if (logits.dim(1) != scene.height || logits.dim(2) != scene.width)
        logits = crop_spatial(logits, scene.height, scene.width);

    metrics::PanopticMap out;
    out.h = scene.height;
    out.w = scene.width;
    const int64_t npix = out.h * out.w;
    out.class_id.assign(static_cast<size_t>(npix), 0);
    out.instance_id.assign(static_cast<size_t>(npix), 0);
    const int64_t classes = logits.dim(0);
    for (int64_t p = 0; p < npix; ++p) {
        int best = 0;
        double best_v = logits.data()[static_cast<size_t>(p)];
        for (int64_t ch = 1; ch < classes; ++ch) {
            const double v = logits.data()[static_cast<size_t>(ch * npix + p)];
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(ch);
            }
        }
        if (best < cfg_.num_stuff) {
            out.class_id[static_cast<size_t>(p)] = best;
        } else {
            const int inst = included[static_cast<size_t>(best - cfg_.num_stuff)];
            out.class_id[static_cast<size_t>(p)] = scene.objects[static_cast<size_t>(inst)].class_id;
            out.instance_id[static_cast<size_t>(p)] = inst + 1;
        }
    }
    return out;
}

std::vector<metrics::DetectionResult> Network::predict_boxes(const SyntheticScene& scene,
                                                             const Forward& fwd) const {
    const branches::BranchConfig& b = cfg_.branch;
    const auto det = task_index(Task::det3d);
    check_arg(det.has_value(), "predict_boxes: 3-D task not enabled");
    const Tensor& f = fwd.basis[static_cast<size_t>(*det)];

    std::vector<branches::GtObject2D> gts;
    for (const GtInstance& gi : scene.objects) gts.push_back({gi.box2d, gi.class_id});
    std::vector<Tensor> embed_maps;
    for (const auto& lvl : fwd.instance) embed_maps.push_back(lvl.embed_map);
    const auto proposals = branches::assign_and_filter(embed_maps, b.level_min, gts);
    std::vector<std::vector<const branches::InstanceProposal*>> by_instance(scene.objects.size());
    for (const auto& p : proposals)
        by_instance[static_cast<size_t>(p.instance_index)].push_back(&p);

    std::vector<metrics::DetectionResult> results;
    const int stride_out = branches::FeaturePyramid::stride(b.level_min);
    for (size_t ii = 0; ii < by_instance.size(); ++ii) {
        if (by_instance[ii].empty()) continue;
        const GtInstance& gi = scene.objects[ii];
        const Tensor crop = branches::crop_roi(f, gi.box2d, stride_out);
        geom::Vec3 c{};
        double h = 0, w = 0, l = 0, sin_sum = 0, cos_sum = 0;
        std::vector<double> attr_sum(static_cast<size_t>(std::max<int64_t>(b.e3d_len() - 8, 0)),
                                     0.0);
        int n = 0;
        for (const auto* p : by_instance[ii]) {
            const int stride = branches::FeaturePyramid::stride(p->level);
            const Tensor e3d = slice(p->embedding, 0, b.e3d_off(), b.e3d_len());
            auto decoded = heads::decode_3d(e3d, (p->grid_w + 0.5) * stride,
                                            (p->grid_h + 0.5) * stride, stride,
                                            scene.intrinsics, crop, w_z_);
            if (!decoded.has_value()) continue;
            c.x += decoded->box.center.x;
            c.y += decoded->box.center.y;
            c.z += decoded->box.center.z;
            h += decoded->box.h;
            w += decoded->box.w;
            l += decoded->box.l;
            sin_sum += std::sin(decoded->box.yaw);
            cos_sum += std::cos(decoded->box.yaw);
            for (size_t ai = 0; ai < attr_sum.size(); ++ai)
                attr_sum[ai] += decoded->attr_logits.data()[ai];
            ++n;
        }
        if (n == 0) continue;
        metrics::DetectionResult r;
        const double inv = 1.0 / n;
        r.box.center = {c.x * inv, c.y * inv, c.z * inv};
        r.box.h = h * inv;
        r.box.w = w * inv;
        r.box.l = l * inv;
        r.box.yaw = std::atan2(sin_sum, cos_sum);
        if (!attr_sum.empty())
            r.box.attribute = static_cast<int>(
                std::max_element(attr_sum.begin(), attr_sum.end()) - attr_sum.begin());
        r.score = 1.0;
        r.class_id = gi.class_id;
        results.push_back(r);
    }
    return results;
}

Tensor Network::predict_depth(const Forward& fwd) const {
    const auto dep = task_index(Task::depth);
    check_arg(dep.has_value(), "predict_depth: depth task not enabled");
    return heads::depth_head(fwd.basis[static_cast<size_t>(*dep)], depth_);
}

// ---------------------------------------------------------------------
// Config and checkpoint serialisation
// ---------------------------------------------------------------------

namespace {

nlohmann::json config_json(const NetworkConfig& cfg) {
    nlohmann::json j;
    j["channels"] = cfg.branch.channels;
    j["tower_depth"] = cfg.branch.tower_depth;
    j["level_min"] = cfg.branch.level_min;
    j["level_max"] = cfg.branch.level_max;
    j["dense_width"] = cfg.branch.dense_width;
    j["pad_divisibility"] = cfg.branch.pad_divisibility;
    j["attention_bases"] = cfg.branch.attention_bases;
    j["attention_factors"] = cfg.branch.attention_factors;
    j["num_attributes"] = cfg.branch.num_attributes;
    j["num_stuff"] = cfg.num_stuff;
    j["num_thing_classes"] = cfg.num_thing_classes;
    j["routing"] = routing_mode_name(cfg.routing);
    std::vector<std::string> names;
    for (Task t : cfg.tasks) names.emplace_back(task_name(t));
    j["tasks"] = names;
    return j;
}

NetworkConfig config_from_json_obj(const nlohmann::json& j) {
    NetworkConfig cfg;
    cfg.branch.channels = j.at("channels");
    cfg.branch.tower_depth = j.at("tower_depth");
    cfg.branch.level_min = j.at("level_min");
    cfg.branch.level_max = j.at("level_max");
    cfg.branch.dense_width = j.at("dense_width");
    cfg.branch.pad_divisibility = j.at("pad_divisibility");
    cfg.branch.attention_bases = j.at("attention_bases");
    cfg.branch.attention_factors = j.at("attention_factors");
    cfg.branch.num_attributes = j.at("num_attributes");
    cfg.num_stuff = j.at("num_stuff");
    cfg.num_thing_classes = j.at("num_thing_classes");
    cfg.routing = routing_mode_from_name(j.at("routing"));
    cfg.tasks.clear();
    for (const auto& n : j.at("tasks")) cfg.tasks.push_back(task_from_name(n));
    return cfg;
}

}  // namespace

std::string network_config_to_json(const NetworkConfig& cfg) { return config_json(cfg).dump(); }

NetworkConfig network_config_from_json(const std::string& text) {
    return config_from_json_obj(nlohmann::json::parse(text));
}

void Network::save(std::ostream& os) const {
    nlohmann::json meta;
    meta["format"] = "d2bnet-checkpoint";
    meta["version"] = 1;
    meta["config"] = config_json(cfg_);
    meta["tensors"] = params_.size();
    os << meta.dump() << '\n';
    for (const auto& [name, t] : params_) save_named_tensor(os, name, t);
}

void Network::load(std::istream& is) {
    std::string line;
    check_arg(static_cast<bool>(std::getline(is, line)), "checkpoint: missing meta line");
    const nlohmann::json meta = nlohmann::json::parse(line);
    check_arg(meta.at("format") == "d2bnet-checkpoint", "checkpoint: bad format marker");
    const size_t n = meta.at("tensors");
    check_arg(n == params_.size(), "checkpoint: parameter count mismatch");
    for (size_t i = 0; i < n; ++i) {
        auto [name, t] = load_named_tensor(is);
        check_arg(name == params_[i].first, "checkpoint: unexpected tensor " + name);
        check_arg(t.shape() == params_[i].second.shape(),
                  "checkpoint: shape mismatch for " + name);
        std::copy(t.data().begin(), t.data().end(),
                  params_[i].second.mutable_data().begin());
    }
}

std::unique_ptr<Network> Network::from_stream(std::istream& is) {
    std::string line;
    check_arg(static_cast<bool>(std::getline(is, line)), "checkpoint: missing meta line");
    const nlohmann::json meta = nlohmann::json::parse(line);
    check_arg(meta.at("format") == "d2bnet-checkpoint", "checkpoint: bad format marker");
    auto net = std::make_unique<Network>(config_from_json_obj(meta.at("config")), 0);
    const size_t n = meta.at("tensors");
    check_arg(n == net->params_.size(), "checkpoint: parameter count mismatch");
    for (size_t i = 0; i < n; ++i) {
        auto [name, t] = load_named_tensor(is);
        check_arg(name == net->params_[i].first, "checkpoint: unexpected tensor " + name);
        check_arg(t.shape() == net->params_[i].second.shape(),
                  "checkpoint: shape mismatch for " + name);
        std::copy(t.data().begin(), t.data().end(),
                  net->params_[i].second.mutable_data().begin());
    }
    return net;
}

}  // namespace d2b::harness
