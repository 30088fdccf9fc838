#pragma once

// Channel-wise and task-aware dynamic routers. A router pools its input,
// projects it through a single 1x1 convolution to 2C scores, and splits them
// into a sigmoid head weighting the primary task's channels and a softmax
// head (normalised across channels) weighting the secondary task's.

#include <utility>

#include "d2bnet/tensor.hpp"

namespace d2b::routing {

struct RoutingScores {
    Tensor primary;    // (C), each element in (0,1)
    Tensor secondary;  // (C), nonnegative, sums to 1
};

struct TaskEmbedding {
    int task_id = 0;
    Tensor emb;  // (C/8)
};

// The router's only learnable layer: a (2C x in) projection plus bias. in is
// C for channel-aware routing and C + 2*(C/8) when task embeddings are
// appended.
struct RouterParams {
    Tensor weight;  // (2C, in)
    Tensor bias;    // (2C)
    void validate(int64_t channels, int64_t in_dim) const;
};

// Shared projection of one-hot task ids: column task_id of a (C/8, n_tasks)
// matrix.
Tensor task_embedding_lookup(const Tensor& embed_weight, int task_id);

// {sigma, softmax}(Conv1x1(GAP(x))).
RoutingScores channel_router(const Tensor& x, const RouterParams& params);

// {sigma, softmax}(Conv1x1(GAP(x) ++ emb_primary ++ emb_secondary)).
RoutingScores task_router(const Tensor& x, const TaskEmbedding& emb_primary,
                          const TaskEmbedding& emb_secondary, const RouterParams& params);

// g_primary (x) f_primary + g_secondary (x) f_secondary, broadcasting each
// channel weight over the spatial plane.
Tensor route_features(const Tensor& f_primary, const Tensor& f_secondary,
                      const RoutingScores& scores);

// First half / second half along the channel axis; even channel count only.
std::pair<Tensor, Tensor> split_context(const Tensor& m);

}  // namespace d2b::routing
