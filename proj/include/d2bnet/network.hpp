#pragma once

// The assembled toy multi-task network: per-level stem, shared box tower,
// per-task context projections and dense-branch refinement, dynamic routers
// between tasks, and the task heads.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "d2bnet/branches.hpp"
#include "d2bnet/heads.hpp"
#include "d2bnet/metrics.hpp"
#include "d2bnet/routing.hpp"
#include "d2bnet/scene.hpp"

namespace d2b::harness {

enum class Task { seg, det3d, depth };
const char* task_name(Task t);
Task task_from_name(const std::string& name);

enum class RoutingMode { none, frozen, cdr, tdr };
const char* routing_mode_name(RoutingMode m);
RoutingMode routing_mode_from_name(const std::string& name);

struct NetworkConfig {
    branches::BranchConfig branch;
    std::vector<Task> tasks = {Task::seg};
    RoutingMode routing = RoutingMode::tdr;
    int num_stuff = 2;
    int num_thing_classes = 3;
    void validate() const;
};

// Per-level routing score logs: scores[task][level] is the applied primary
// (sigmoid) score vector, one entry per channel.
using RoutingLog = std::vector<std::vector<std::vector<double>>>;

class Network {
public:
    Network(NetworkConfig cfg, uint64_t seed);

    const NetworkConfig& config() const { return cfg_; }
    int task_count() const { return static_cast<int>(cfg_.tasks.size()); }
    std::optional<int> task_index(Task t) const;

    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
    Tensor parameter(const std::string& name) const;
    void zero_grads();
    void sgd_step(double lr);
    int64_t parameter_count() const;

    struct Forward {
        branches::FeaturePyramid pyramid;
        std::vector<branches::InstanceLevelOutput> instance;  // per level
        std::vector<Tensor> basis;                            // per task
        RoutingLog routing_instance;  // empty unless routers ran
        RoutingLog routing_dense;
    };
    Forward forward(const Tensor& image) const;

    // Routing disabled and a single parameter set: used by the pass-through
    // reduction check.
    branches::FeaturePyramid build_pyramid(const Tensor& image) const;

    struct SceneLosses {
        heads::LossComponents components;
        Tensor total;
        int num_proposals = 0;
        int num_rejected_decodes = 0;
        std::vector<std::string> diagnostics;
    };
    SceneLosses compute_losses(const SyntheticScene& scene, const Forward& fwd,
                               const heads::LossWeights& weights = {}) const;

    // Evaluation products (ground-truth-driven assignment; the simplified
    // assigner stands in for the detector).
    metrics::PanopticMap predict_panoptic(const SyntheticScene& scene, const Forward& fwd) const;
    std::vector<metrics::DetectionResult> predict_boxes(const SyntheticScene& scene,
                                                        const Forward& fwd) const;
    Tensor predict_depth(const Forward& fwd) const;  // (1,H,W)

    void save(std::ostream& os) const;
    void load(std::istream& is);  // shapes must match this configuration
    static std::unique_ptr<Network> from_stream(std::istream& is);

private:
    Tensor make_param(const std::string& name, Shape shape, double fan_in_scale);
    Tensor make_zero_param(const std::string& name, Shape shape);

    struct TaskDenseParams {
        std::vector<branches::ConvParam> lateral;
        std::vector<dyn::Rank1ConvLayer> refine;
    };

    routing::RoutingScores router_scores(const routing::RouterParams& rp, const Tensor& input,
                                         int primary, int secondary) const;
    // Applies all (primary, secondary) routing applications for task m over
    // per-task features; records the applied primary score when log != null.
    Tensor route_for_task(const std::vector<Tensor>& feats, int m,
                          const std::vector<routing::RoutingScores>& pair_scores,
                          std::vector<double>* log) const;

    NetworkConfig cfg_;
    uint64_t seed_ = 0;
    std::vector<std::pair<std::string, Tensor>> params_;

    std::vector<branches::ConvParam> stem_;  // per level, 3 -> C
    branches::InstanceBranchParams instance_;
    std::vector<TaskDenseParams> dense_;                 // per task
    std::vector<routing::RouterParams> inst_routers_;    // per level
    std::vector<routing::RouterParams> dense_routers_;   // per level
    Tensor task_embed_;                                  // (C/8, n_tasks)
    heads::AttentionBasis attention_;
    Tensor pano_stuff_;  // (D', num_stuff)
    Tensor w_z_;         // (D')
    heads::DepthHeadParams depth_;
};

std::string network_config_to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const std::string& text);

}  // namespace d2b::harness
