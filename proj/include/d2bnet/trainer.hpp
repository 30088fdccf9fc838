#pragma once

// Toy multi-task trainer: deterministic SGD over generated scenes, loss
// traces, checkpointing, and metric evaluation with optional renderings.

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "d2bnet/metrics.hpp"
#include "d2bnet/network.hpp"
#include "d2bnet/scene.hpp"

namespace d2b::harness {

struct TrainConfig {
    NetworkConfig net;
    SceneConfig scene;
    int steps = 500;
    double lr = 0.02;
    uint64_t seed = 1;
    int scene_count = 1;  // scenes cycled through; 1 = single-scene overfit
    heads::LossWeights weights;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

// Per-step loss record; absent components are NaN.
struct StepRecord {
    int step = 0;
    double total = 0.0;
    double fcos, ctr, dim, ori, loc, attr, mask, pano, depth;
};

struct TrainResult {
    std::vector<StepRecord> trace;
    bool aborted = false;
    std::string abort_reason;
    RoutingLog routing_instance;  // from the last executed step
    RoutingLog routing_dense;
};

struct TrainOutput {
    TrainResult result;
    std::unique_ptr<Network> network;
};

// Gradient-descent loop over generated scenes. A non-finite loss aborts the
// run before applying the offending update, so the network keeps the last
// good parameters.
TrainOutput train_toy(const TrainConfig& cfg);

void write_trace_csv(const std::string& path, const std::vector<StepRecord>& trace);
std::string train_result_to_json(const TrainConfig& cfg, const TrainResult& result);

void save_checkpoint(const std::string& path, const Network& net);
std::unique_ptr<Network> load_checkpoint(const std::string& path);

struct EvalReport {
    int scenes = 0;
    bool has_seg = false, has_det3d = false, has_depth = false;
    metrics::PQResult pq;                  // averaged over scenes
    double map = 0.0;                      // averaged over {0.5,1,2,4} m
    std::array<double, 5> mtp = {1, 1, 1, 1, 1};  // ATE, ASE, AOE, AVE, AAE
    double nds = 0.0;
    metrics::DepthMetrics depth;
};

// Runs the network on freshly generated scenes. The velocity error has no
// temporal signal here and is pinned to 1 (fully penalised) as an input to
// the composite score. When render_dir is nonempty, the first few scenes are
// written as PPM/PGM images.
EvalReport evaluate(const Network& net, const SceneConfig& scfg, int num_scenes, uint64_t seed0,
                    const std::string& render_dir = "");

std::string eval_report_to_json(const EvalReport& report);
void write_eval_csv(const std::string& path, const EvalReport& report);

}  // namespace d2b::harness
