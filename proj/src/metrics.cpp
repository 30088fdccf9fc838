#include "d2bnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "d2bnet/tensor.hpp"  // check_arg

namespace d2b::metrics {

namespace {

using SegmentKey = std::pair<int32_t, int32_t>;  // (class, instance)

void validate_map(const PanopticMap& m, const Taxonomy& tax, const char* which) {
    check_arg(static_cast<int64_t>(m.class_id.size()) == m.h * m.w &&
                  m.instance_id.size() == m.class_id.size(),
              std::string(which) + " panoptic map: buffer sizes do not match extents");
    for (size_t i = 0; i < m.class_id.size(); ++i) {
        check_arg(tax.valid(m.class_id[i]),
                  std::string(which) + " panoptic map: class id outside the taxonomy");
        if (tax.is_thing(m.class_id[i]))
            check_arg(m.instance_id[i] > 0,
                      std::string(which) + " panoptic map: thing pixel without instance id");
        else
            check_arg(m.instance_id[i] == 0,
                      std::string(which) + " panoptic map: stuff pixel with instance id");
    }
}

}  // namespace

PQResult panoptic_quality(const PanopticMap& pred, const PanopticMap& gt, const Taxonomy& tax) {
    check_arg(pred.h == gt.h && pred.w == gt.w, "panoptic_quality: extent mismatch");
    validate_map(pred, tax, "predicted");
    validate_map(gt, tax, "ground-truth");

    std::map<SegmentKey, int64_t> pred_area, gt_area;
    std::map<std::pair<SegmentKey, SegmentKey>, int64_t> inter;
    for (size_t i = 0; i < pred.class_id.size(); ++i) {
        const SegmentKey pk{pred.class_id[i], pred.instance_id[i]};
        const SegmentKey gk{gt.class_id[i], gt.instance_id[i]};
        ++pred_area[pk];
        ++gt_area[gk];
        ++inter[{pk, gk}];
    }

    struct ClassStats {
        int64_t tp = 0, fp = 0, fn = 0;
        double iou_sum = 0.0;
    };
    std::map<int32_t, ClassStats> per_class;
    for (const auto& [k, a] : pred_area) per_class[k.first].fp++;
    for (const auto& [k, a] : gt_area) per_class[k.first].fn++;

    for (const auto& [keys, in] : inter) {
        const auto& [pk, gk] = keys;
        if (pk.first != gk.first) continue;
        const double iou = static_cast<double>(in) /
                           static_cast<double>(pred_area[pk] + gt_area[gk] - in);
        if (iou > 0.5) {
            ClassStats& cs = per_class[pk.first];
            cs.tp++;
            cs.fp--;  // matched prediction is no longer a false positive
            cs.fn--;
            cs.iou_sum += iou;
        }
    }

    PQResult r;
    double pq_sum = 0.0, sq_sum = 0.0, rq_sum = 0.0;
    double pq_th = 0.0, pq_st = 0.0;
    int n_classes = 0, n_th = 0, n_st = 0;
    for (const auto& [cls, cs] : per_class) {
        const double denom = static_cast<double>(cs.tp) + 0.5 * cs.fp + 0.5 * cs.fn;
        if (denom == 0.0) continue;
        const double pq_c = cs.iou_sum / denom;
        const double sq_c = cs.tp > 0 ? cs.iou_sum / static_cast<double>(cs.tp) : 0.0;
        const double rq_c = static_cast<double>(cs.tp) / denom;
        pq_sum += pq_c;
        sq_sum += sq_c;
        rq_sum += rq_c;
        ++n_classes;
        if (tax.is_thing(cls)) {
            pq_th += pq_c;
            ++n_th;
        } else {
            pq_st += pq_c;
            ++n_st;
        }
        r.tp += cs.tp;
        r.fp += cs.fp;
        r.fn += cs.fn;
    }
    if (n_classes > 0) {
        r.pq = pq_sum / n_classes;
        r.sq = sq_sum / n_classes;
        r.rq = rq_sum / n_classes;
    }
    if (n_th > 0) r.pq_things = pq_th / n_th;
    if (n_st > 0) r.pq_stuff = pq_st / n_st;
    return r;
}

double distance_ap(std::span<DetectionResult> preds, std::span<const GtDetection> gts,
                   double threshold_m) {
    for (DetectionResult& p : preds) {
        check_arg(p.score >= 0.0 && p.score <= 1.0, "distance_ap: scores must lie in [0,1]");
        p.matched = false;
    }
    if (gts.empty()) return 0.0;

    std::vector<size_t> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return preds[a].score > preds[b].score; });

    std::vector<uint8_t> gt_taken(gts.size(), 0);
    std::vector<uint8_t> is_tp(preds.size(), 0);
    for (size_t oi : order) {
        const DetectionResult& p = preds[oi];
        double best = threshold_m;
        int best_gt = -1;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_taken[gi] || gts[gi].class_id != p.class_id) continue;
            const double dx = p.box.center.x - gts[gi].box.center.x;
            const double dz = p.box.center.z - gts[gi].box.center.z;
            const double dist = std::hypot(dx, dz);
            if (dist <= best) {
                best = dist;
                best_gt = static_cast<int>(gi);
            }
        }
        if (best_gt >= 0) {
            gt_taken[static_cast<size_t>(best_gt)] = 1;
            is_tp[oi] = 1;
            preds[oi].matched = true;
        }
    }

    // Precision-recall in score order, then 101-point interpolation.
    std::vector<double> precision, recall;
    int64_t tp = 0, fp = 0;
    for (size_t oi : order) {
        if (is_tp[oi])
            ++tp;
        else
            ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    }
    double ap = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const double r = static_cast<double>(i) / 100.0;
        double best_p = 0.0;
        for (size_t j = 0; j < precision.size(); ++j)
            if (recall[j] >= r) best_p = std::max(best_p, precision[j]);
        ap += best_p;
    }
    return ap / 101.0;
}

double nds(double map, const std::array<double, 5>& mtp) {
    check_arg(map >= 0.0 && map <= 1.0, "nds: mAP must lie in [0,1]");
    double acc = 5.0 * map;
    for (double e : mtp) {
        check_arg(e >= 0.0, "nds: TP errors must be nonnegative");
        acc += 1.0 - std::min(1.0, e);
    }
    return acc / 10.0;
}

DepthMetrics depth_metrics(std::span<const double> pred, std::span<const double> gt,
                           std::span<const uint8_t> valid) {
    check_arg(pred.size() == gt.size() && valid.size() == gt.size(),
              "depth_metrics: buffer sizes differ");
    int64_t n = 0;
    double abs_rel = 0.0, sq_err = 0.0;
    int64_t d1 = 0, d2 = 0, d3 = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!valid[i]) continue;
        check_arg(gt[i] > 0.0, "depth_metrics: ground truth must be positive on valid pixels");
        ++n;
        const double diff = pred[i] - gt[i];
        abs_rel += std::abs(diff) / gt[i];
        sq_err += diff * diff;
        const double delta = std::max(pred[i] / gt[i], gt[i] / pred[i]);
        if (delta < 1.25) ++d1;
        if (delta < 1.25 * 1.25) ++d2;
        if (delta < 1.25 * 1.25 * 1.25) ++d3;
    }
    check_arg(n > 0, "depth_metrics: empty valid mask");
    DepthMetrics m;
    m.abs_rel = abs_rel / static_cast<double>(n);
    m.rmse = std::sqrt(sq_err / static_cast<double>(n));
    m.delta1 = static_cast<double>(d1) / static_cast<double>(n);
    m.delta2 = static_cast<double>(d2) / static_cast<double>(n);
    m.delta3 = static_cast<double>(d3) / static_cast<double>(n);
    return m;
}

}  // namespace d2b::metrics
