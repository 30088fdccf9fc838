#include "d2bnet/routing.hpp"

namespace d2b::routing {

void RouterParams::validate(int64_t channels, int64_t in_dim) const {
    check_arg(weight.defined() && weight.rank() == 2 && weight.dim(0) == 2 * channels &&
                  weight.dim(1) == in_dim,
              "router: weight must be (2C, in) = (" + std::to_string(2 * channels) + "," +
                  std::to_string(in_dim) + "), got " + shape_str(weight.shape()));
    check_arg(bias.defined() && bias.rank() == 1 && bias.dim(0) == 2 * channels,
              "router: bias must have length 2C");
}

Tensor task_embedding_lookup(const Tensor& embed_weight, int task_id) {
    check_arg(embed_weight.rank() == 2, "task embedding: weight must be (C/8, n_tasks)");
    check_arg(task_id >= 0 && task_id < embed_weight.dim(1),
              "task embedding: task id out of range");
    return reshape(slice(embed_weight, 1, task_id, 1), {embed_weight.dim(0)});
}

namespace {

RoutingScores scores_from(const Tensor& input_vec, const RouterParams& params, int64_t c) {
    Tensor pre = reshape(matmul(params.weight, reshape(input_vec, {input_vec.dim(0), 1})),
                         {params.weight.dim(0)});
    pre = add(pre, params.bias);
    RoutingScores s;
    s.primary = sigmoid(slice(pre, 0, 0, c));
    s.secondary = softmax(slice(pre, 0, c, c), 0);
    return s;
}

}  // namespace

RoutingScores channel_router(const Tensor& x, const RouterParams& params) {
    check_arg(x.rank() == 3, "channel_router: input must be (C,H,W)");
    const int64_t c = x.dim(0);
    params.validate(c, c);
    return scores_from(reshape(global_avg_pool(x), {c}), params, c);
}

RoutingScores task_router(const Tensor& x, const TaskEmbedding& emb_primary,
                          const TaskEmbedding& emb_secondary, const RouterParams& params) {
    check_arg(x.rank() == 3, "task_router: input must be (C,H,W)");
    const int64_t c = x.dim(0);
    const int64_t e = c / 8;
    check_arg(emb_primary.emb.defined() && emb_primary.emb.rank() == 1 &&
                  emb_primary.emb.dim(0) == e,
              "task_router: primary embedding must have length C/8 = " + std::to_string(e));
    check_arg(emb_secondary.emb.defined() && emb_secondary.emb.rank() == 1 &&
                  emb_secondary.emb.dim(0) == e,
              "task_router: secondary embedding must have length C/8 = " + std::to_string(e));
    params.validate(c, c + 2 * e);
    const Tensor pooled = reshape(global_avg_pool(x), {c});
    const Tensor input = concat(0, {pooled, emb_primary.emb, emb_secondary.emb});
    return scores_from(input, params, c);
}

Tensor route_features(const Tensor& f_primary, const Tensor& f_secondary,
                      const RoutingScores& scores) {
    check_arg(f_primary.rank() == 3, "route_features: features must be (C,H,W)");
    check_arg(f_primary.shape() == f_secondary.shape(),
              "route_features: feature shape mismatch, " + shape_str(f_primary.shape()) +
                  " vs " + shape_str(f_secondary.shape()));
    check_arg(scores.primary.defined() && scores.primary.dim(0) == f_primary.dim(0) &&
                  scores.secondary.defined() && scores.secondary.dim(0) == f_primary.dim(0),
              "route_features: score length must equal the channel count");
    return add(scale_channels(f_primary, scores.primary),
               scale_channels(f_secondary, scores.secondary));
}

std::pair<Tensor, Tensor> split_context(const Tensor& m) {
    check_arg(m.rank() == 3, "split_context: input must be (C,H,W)");
    check_arg(m.dim(0) % 2 == 0,
              "split_context: channel count must be even, got " + std::to_string(m.dim(0)));
    const int64_t half = m.dim(0) / 2;
    return {slice(m, 0, 0, half), slice(m, 0, half, half)};
}

}  // namespace d2b::routing
