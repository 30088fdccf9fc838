#include "d2bnet/heads.hpp"

#include <cmath>
#include <stdexcept>

namespace d2b::heads {

Tensor factored_attention_mask(const Tensor& crop, const SegEmbedding& e,
                               const AttentionBasis& basis) {
    check_arg(crop.rank() == 3, "factored_attention_mask: crop must be (D',H,W)");
    check_arg(basis.u.defined() && basis.u.rank() == 3 && basis.v.shape() == basis.u.shape(),
              "factored_attention_mask: basis U and V must be (K,4,N) with one shape");
    const int64_t k = basis.u.dim(0);
    const int64_t rows = basis.u.dim(1);
    const int64_t n = basis.u.dim(2);
    const int64_t dprime = crop.dim(0);
    check_arg(crop.dim(1) == 4 * n && crop.dim(2) == 4 * n,
              "factored_attention_mask: crop extent must be 4x the attention size");
    check_arg(e.t.defined() && e.t.rank() == 1 && e.t.dim(0) == dprime * k,
              "factored_attention_mask: t must have length D'*K");
    check_arg(e.s.defined() && e.s.rank() == 1 && e.s.dim(0) == k * rows,
              "factored_attention_mask: s must have length K*4");

    // Project the cropped bases to K channels with t as a 1x1 kernel.
    const Tensor proj = conv2d(crop, reshape(e.t, {k, dprime, 1, 1}), 1, 0);

    Tensor logits;
    for (int64_t ki = 0; ki < k; ++ki) {
        const Tensor u_k = reshape(slice(basis.u, 0, ki, 1), {rows, n});
        const Tensor v_k = reshape(slice(basis.v, 0, ki, 1), {rows, n});
        const Tensor s_k = slice(e.s, 0, ki * rows, rows);
        // U_k^T S_k V_k with S_k diagonal: scale U_k's rows by s, transpose,
        // multiply.
        const Tensor u_scaled =
            reshape(scale_channels(reshape(u_k, {rows, n, 1}), s_k), {rows, n});
        Tensor q = matmul(transpose2d(u_scaled), v_k);  // (N,N)
        q = upsample2x_aligned(upsample2x_aligned(reshape(q, {1, n, n})));
        const Tensor r_k = slice(proj, 0, ki, 1);
        const Tensor term = mul(r_k, q);
        logits = logits.defined() ? add(logits, term) : term;
    }
    return reshape(logits, {crop.dim(1), crop.dim(2)});
}

int64_t per_instance_attention_params(const branches::BranchConfig& cfg) {
    return static_cast<int64_t>(cfg.attention_bases) * cfg.attention_factors;
}

int64_t full_attention_params(const branches::BranchConfig& cfg, int attn_size) {
    return static_cast<int64_t>(attn_size) * attn_size * cfg.attention_bases;
}

Tensor aggregate_instance_embeddings(std::span<const Tensor> embeddings) {
    check_arg(!embeddings.empty(), "aggregate_instance_embeddings: no embeddings");
    Tensor acc = embeddings[0];
    for (size_t i = 1; i < embeddings.size(); ++i) {
        check_arg(embeddings[i].shape() == acc.shape(),
                  "aggregate_instance_embeddings: shape mismatch");
        acc = add(acc, embeddings[i]);
    }
    return mul_scalar(acc, 1.0 / static_cast<double>(embeddings.size()));
}

Tensor panoptic_logits(const Tensor& f, const Tensor& w_stuff,
                       std::span<const Tensor> thing_embeddings) {
    check_arg(f.rank() == 3, "panoptic_logits: basis map must be (D',H,W)");
    const int64_t dprime = f.dim(0);
    check_arg(w_stuff.defined() && w_stuff.rank() == 2 && w_stuff.dim(0) == dprime,
              "panoptic_logits: W_stuff must be (D', C_stuff)");
    std::vector<Tensor> cols;
    cols.push_back(w_stuff);
    for (const Tensor& e : thing_embeddings) {
        check_arg(e.rank() == 1 && e.dim(0) == dprime,
                  "panoptic_logits: thing embeddings must have length D'");
        cols.push_back(reshape(e, {dprime, 1}));
    }
    const Tensor w_pano = cols.size() == 1 ? w_stuff : concat(1, cols);
    const int64_t classes = w_pano.dim(1);
    const Tensor flat = matmul(transpose2d(w_pano), reshape(f, {dprime, f.dim(1) * f.dim(2)}));
    return reshape(flat, {classes, f.dim(1), f.dim(2)});
}

std::optional<Decoded3D> decode_3d(const Tensor& e3d, double loc_u, double loc_v, int stride,
                                   const geom::CameraIntrinsics& k, const Tensor& crop,
                                   const Tensor& w_z, std::string* reject_reason) {
    k.validate();
    check_arg(e3d.rank() == 1 && e3d.dim(0) >= 8, "decode_3d: embedding must be (8+A)");
    check_arg(crop.rank() == 3 && w_z.rank() == 1 && w_z.dim(0) == crop.dim(0),
              "decode_3d: w_z length must match the crop width");
    const int64_t attrs = e3d.dim(0) - 8;

    // Offsets are regressed in grid units of the proposal's level.
    const Tensor u = add_scalar(mul_scalar(at(e3d, 0), stride), loc_u);
    const Tensor v = add_scalar(mul_scalar(at(e3d, 1), stride), loc_v);
    const Tensor pooled = reshape(global_avg_pool(crop), {crop.dim(0)});
    const Tensor z = add(at(e3d, 2), dot(pooled, w_z));
    if (!(z.item() > 0.0)) {
        if (reject_reason) *reject_reason = "non-positive instance depth";
        return std::nullopt;
    }
    const Tensor sin_a = at(e3d, 6);
    const Tensor cos_a = at(e3d, 7);
    const double norm2 =
        sin_a.item() * sin_a.item() + cos_a.item() * cos_a.item();
    if (norm2 < 1e-12) {
        if (reject_reason) *reject_reason = "degenerate orientation vector";
        return std::nullopt;
    }

    Decoded3D d;
    const Tensor x = mul_scalar(mul(add_scalar(u, -k.u0), z), 1.0 / k.fx);
    const Tensor y = mul_scalar(mul(add_scalar(v, -k.v0), z), 1.0 / k.fy);
    d.loc = concat(0, {x, y, z});
    d.dims = exp(slice(e3d, 0, 3, 3));
    d.alpha = atan2(sin_a, cos_a);  // atan2 normalises (sin,cos) implicitly
    if (attrs > 0) d.attr_logits = slice(e3d, 0, 8, attrs);

    d.box.center = {x.item(), y.item(), z.item()};
    d.box.h = d.dims.data()[0];
    d.box.w = d.dims.data()[1];
    d.box.l = d.dims.data()[2];
    d.box.yaw = geom::alpha_to_yaw(d.alpha.item(), d.box.center);
    return d;
}

Tensor corners_from_params(const Tensor& loc, const Tensor& dims, const Tensor& alpha) {
    check_arg(loc.rank() == 1 && loc.dim(0) == 3, "corners_from_params: loc must be (3)");
    check_arg(dims.rank() == 1 && dims.dim(0) == 3, "corners_from_params: dims must be (3)");
    check_arg(alpha.numel() == 1, "corners_from_params: alpha must be a scalar");
    const Tensor x = at(loc, 0), y = at(loc, 1), z = at(loc, 2);
    const Tensor yaw = add(alpha, atan2(x, z));
    const Tensor c = cos(yaw), s = sin(yaw);
    std::vector<Tensor> coords;
    coords.reserve(24);
    for (const auto& signs : geom::kCornerSigns) {
        const Tensor dl = mul_scalar(at(dims, 2), 0.5 * signs[0]);
        const Tensor dh = mul_scalar(at(dims, 0), 0.5 * signs[1]);
        const Tensor dw = mul_scalar(at(dims, 1), 0.5 * signs[2]);
        coords.push_back(add(x, add(mul(c, dl), mul(s, dw))));
        coords.push_back(add(y, dh));
        coords.push_back(add(z, sub(mul(c, dw), mul(s, dl))));
    }
    return reshape(concat(0, coords), {8, 3});
}

CornerLossTerms corner_loss_terms(const Decoded3D& pred, const geom::Box3D& gt) {
    check_arg(gt.center.z > 0.0 && gt.h > 0.0 && gt.w > 0.0 && gt.l > 0.0,
              "corner_loss_terms: invalid ground-truth box");
    const Tensor gt_loc = Tensor::from({3}, {gt.center.x, gt.center.y, gt.center.z});
    const Tensor gt_dims = Tensor::from({3}, {gt.h, gt.w, gt.l});
    const Tensor gt_alpha = Tensor::scalar(geom::yaw_to_alpha(gt.yaw, gt.center));
    // The reference corners go through the same construction so that an
    // unperturbed parameter group cancels exactly.
    const Tensor ref = corners_from_params(gt_loc, gt_dims, gt_alpha);
    CornerLossTerms terms;
    terms.loc = sum(abs(sub(corners_from_params(pred.loc, gt_dims, gt_alpha), ref)));
    terms.dim = sum(abs(sub(corners_from_params(gt_loc, pred.dims, gt_alpha), ref)));
    terms.ori = sum(abs(sub(corners_from_params(gt_loc, gt_dims, pred.alpha), ref)));
    return terms;
}

Tensor corner_loss(const Decoded3D& pred, const geom::Box3D& gt) {
    const CornerLossTerms t = corner_loss_terms(pred, gt);
    Tensor loss = add(add(t.loc, t.dim), t.ori);
    if (pred.attr_logits.defined() && gt.attribute.has_value())
        loss = add(loss, cross_entropy_vec(pred.attr_logits, *gt.attribute));
    return loss;
}

Tensor depth_head(const Tensor& f, const DepthHeadParams& params) {
    check_arg(f.rank() == 3, "depth_head: basis map must be (D',H,W)");
    Tensor t = upsample2x_aligned(conv2d(f, params.conv0.w, 1, 1, params.conv0.b));
    t = upsample2x_aligned(conv2d(t, params.conv1.w, 1, 1, params.conv1.b));
    t = upsample2x_aligned(conv2d(t, params.conv2.w, 1, 1, params.conv2.b));
    check_arg(t.dim(0) == 1, "depth_head: final stage must emit one channel");
    return clamp(t, kDepthFloor, kDepthCeil);
}

Tensor total_loss(const LossComponents& c, const LossWeights& w) {
    const auto ensure_finite = [](const Tensor& t, const char* name) {
        if (t.defined() && !std::isfinite(t.item()))
            throw std::runtime_error(std::string("total_loss: non-finite component: ") + name);
    };
    ensure_finite(c.fcos, "fcos");
    ensure_finite(c.ctr, "ctr");
    ensure_finite(c.dim, "dim");
    ensure_finite(c.ori, "ori");
    ensure_finite(c.loc, "loc");
    ensure_finite(c.attr, "attr");
    ensure_finite(c.mask, "mask");
    ensure_finite(c.pano, "pano");
    ensure_finite(c.depth, "depth");

    const auto acc = [](Tensor& into, const Tensor& term) {
        if (!term.defined()) return;
        into = into.defined() ? add(into, term) : term;
    };

    Tensor bracket;
    acc(bracket, c.ctr);
    if (c.dim.defined()) acc(bracket, mul_scalar(c.dim, w.dim_scale));
    acc(bracket, c.ori);
    if (c.loc.defined()) acc(bracket, mul_scalar(c.loc, w.loc_scale));
    acc(bracket, c.attr);

    Tensor total;
    acc(total, c.fcos);
    if (bracket.defined()) acc(total, mul_scalar(bracket, w.lambda_3d));
    acc(total, c.mask);
    acc(total, c.pano);
    acc(total, c.depth);
    return total.defined() ? total : Tensor::scalar(0.0);
}

}  // namespace d2b::heads
