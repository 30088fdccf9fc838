#pragma once

// Evaluation metrics: panoptic quality with IoU>0.5 segment matching,
// distance-based average precision, the composite detection score, and
// depth-error statistics.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "d2bnet/geometry.hpp"

namespace d2b::metrics {

// Class ids [0, num_stuff) are stuff, [num_stuff, num_stuff+num_thing) are
// things.
struct Taxonomy {
    int num_stuff = 0;
    int num_thing = 0;
    bool is_thing(int class_id) const {
        return class_id >= num_stuff && class_id < num_stuff + num_thing;
    }
    bool valid(int class_id) const {
        return class_id >= 0 && class_id < num_stuff + num_thing;
    }
};

struct PanopticMap {
    int64_t h = 0, w = 0;
    std::vector<int32_t> class_id;     // h*w, row-major
    std::vector<int32_t> instance_id;  // 0 on stuff pixels, > 0 on things
};

struct PQResult {
    double pq = 0.0, sq = 0.0, rq = 0.0;
    double pq_things = 0.0, pq_stuff = 0.0;
    int64_t tp = 0, fp = 0, fn = 0;
};

// Segments are matched within a class at IoU > 0.5 (unique by construction);
// PQ = sum of matched IoU / (TP + FP/2 + FN/2), averaged over classes that
// appear in either map. Rejects maps whose labels fall outside the taxonomy.
PQResult panoptic_quality(const PanopticMap& pred, const PanopticMap& gt, const Taxonomy& tax);

struct DetectionResult {
    geom::Box3D box;
    double score = 0.0;  // in [0,1]
    int class_id = 0;
    bool matched = false;  // set by distance_ap
};

struct GtDetection {
    geom::Box3D box;
    int class_id = 0;
};

// Greedy score-ordered matching by ground-plane (x,z) centre distance within
// the threshold and the same class; AP is the 101-point interpolated area
// under precision-recall. Returns 0 when gts is empty.
double distance_ap(std::span<DetectionResult> preds, std::span<const GtDetection> gts,
                   double threshold_m);

// NDS = (1/10) * [5*mAP + sum_i (1 - min(1, mTP_i))].
double nds(double map, const std::array<double, 5>& mtp);

struct DepthMetrics {
    double abs_rel = 0.0;
    double delta1 = 0.0, delta2 = 0.0, delta3 = 0.0;  // delta < 1.25^{1,2,3}
    double rmse = 0.0;
};

// Statistics over valid pixels only; requires a nonempty mask and positive
// ground truth on it.
DepthMetrics depth_metrics(std::span<const double> pred, std::span<const double> gt,
                           std::span<const uint8_t> valid);

}  // namespace d2b::metrics
