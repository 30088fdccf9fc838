#include "d2bnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include <json.hpp>

#include "d2bnet/image_io.hpp"

namespace d2b::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double item_or_nan(const Tensor& t) { return t.defined() ? t.item() : kNaN; }

nlohmann::json scene_config_json(const SceneConfig& s) {
    return {{"width", s.width},
            {"height", s.height},
            {"min_objects", s.min_objects},
            {"max_objects", s.max_objects},
            {"num_stuff", s.num_stuff},
            {"num_thing_classes", s.num_thing_classes},
            {"num_attributes", s.num_attributes},
            {"focal", s.focal},
            {"camera_height", s.camera_height},
            {"max_depth", s.max_depth},
            {"background_depth", s.background_depth}};
}

SceneConfig scene_config_from_json_obj(const nlohmann::json& j) {
    SceneConfig s;
    s.width = j.at("width");
    s.height = j.at("height");
    s.min_objects = j.at("min_objects");
    s.max_objects = j.at("max_objects");
    s.num_stuff = j.at("num_stuff");
    s.num_thing_classes = j.at("num_thing_classes");
    s.num_attributes = j.at("num_attributes");
    s.focal = j.at("focal");
    s.camera_height = j.at("camera_height");
    s.max_depth = j.at("max_depth");
    s.background_depth = j.value("background_depth", s.background_depth);
    return s;
}

}  // namespace

std::string train_config_to_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["net"] = nlohmann::json::parse(network_config_to_json(cfg.net));
    j["scene"] = scene_config_json(cfg.scene);
    j["steps"] = cfg.steps;
    j["lr"] = cfg.lr;
    j["seed"] = cfg.seed;
    j["scene_count"] = cfg.scene_count;
    j["loss_weights"] = {{"lambda_3d", cfg.weights.lambda_3d},
                         {"alpha", cfg.weights.dim_scale},
                         {"beta", cfg.weights.loc_scale}};
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    TrainConfig cfg;
    if (j.contains("net")) cfg.net = network_config_from_json(j.at("net").dump());
    if (j.contains("scene")) cfg.scene = scene_config_from_json_obj(j.at("scene"));
    cfg.steps = j.value("steps", cfg.steps);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.scene_count = j.value("scene_count", cfg.scene_count);
    if (j.contains("loss_weights")) {
        const auto& w = j.at("loss_weights");
        cfg.weights.lambda_3d = w.value("lambda_3d", cfg.weights.lambda_3d);
        cfg.weights.dim_scale = w.value("alpha", cfg.weights.dim_scale);
        cfg.weights.loc_scale = w.value("beta", cfg.weights.loc_scale);
    }
    return cfg;
}

TrainOutput train_toy(const TrainConfig& cfg) {
    check_arg(cfg.steps >= 1, "train_toy: steps must be >= 1");
    check_arg(cfg.scene_count >= 1, "train_toy: scene_count must be >= 1");
    check_arg(cfg.lr > 0.0, "train_toy: learning rate must be positive");

    TrainOutput out;
    out.network = std::make_unique<Network>(cfg.net, cfg.seed);

    std::vector<SyntheticScene> pool;
    pool.reserve(static_cast<size_t>(cfg.scene_count));
    for (int i = 0; i < cfg.scene_count; ++i)
        pool.push_back(gen_scene(cfg.seed + static_cast<uint64_t>(i), cfg.scene));

    for (int step = 0; step < cfg.steps; ++step) {
        const SyntheticScene& scene = pool[static_cast<size_t>(step % cfg.scene_count)];
        Network::Forward fwd = out.network->forward(scene.image);
        Network::SceneLosses losses;
        try {
            losses = out.network->compute_losses(scene, fwd, cfg.weights);
        } catch (const std::runtime_error& e) {
            // Parameters are untouched since the last good step.
            out.result.aborted = true;
            out.result.abort_reason = e.what();
            break;
        }
        const double total = losses.total.item();
        if (!std::isfinite(total)) {
            out.result.aborted = true;
            out.result.abort_reason = "non-finite total loss at step " + std::to_string(step);
            break;
        }

        StepRecord rec;
        rec.step = step;
        rec.total = total;
        rec.fcos = item_or_nan(losses.components.fcos);
        rec.ctr = item_or_nan(losses.components.ctr);
        rec.dim = item_or_nan(losses.components.dim);
        rec.ori = item_or_nan(losses.components.ori);
        rec.loc = item_or_nan(losses.components.loc);
        rec.attr = item_or_nan(losses.components.attr);
        rec.mask = item_or_nan(losses.components.mask);
        rec.pano = item_or_nan(losses.components.pano);
        rec.depth = item_or_nan(losses.components.depth);
        out.result.trace.push_back(rec);

        out.network->zero_grads();
        losses.total.backward();
        out.network->sgd_step(cfg.lr);

        if (step == cfg.steps - 1) {
            out.result.routing_instance = fwd.routing_instance;
            out.result.routing_dense = fwd.routing_dense;
        }
    }
    return out;
}

void write_trace_csv(const std::string& path, const std::vector<StepRecord>& trace) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "step,total,fcos,ctr,dim,ori,loc,attr,mask,pano,depth\n";
    const auto cell = [&os](double v) {
        if (std::isnan(v)) return;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        os << buf;
    };
    for (const StepRecord& r : trace) {
        os << r.step << ',';
        cell(r.total);
        for (double v : {r.fcos, r.ctr, r.dim, r.ori, r.loc, r.attr, r.mask, r.pano, r.depth}) {
            os << ',';
            cell(v);
        }
        os << '\n';
    }
}

std::string train_result_to_json(const TrainConfig& cfg, const TrainResult& result) {
    nlohmann::json j;
    j["config"] = nlohmann::json::parse(train_config_to_json(cfg));
    j["steps_run"] = result.trace.size();
    j["aborted"] = result.aborted;
    if (result.aborted) j["abort_reason"] = result.abort_reason;
    if (!result.trace.empty()) j["final_loss"] = result.trace.back().total;
    // tasks x levels x channels
    j["routing_scores"] = result.routing_dense;
    j["routing_scores_instance"] = result.routing_instance;
    return j.dump(2);
}

void save_checkpoint(const std::string& path, const Network& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    net.save(os);
}

std::unique_ptr<Network> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return Network::from_stream(is);
}

namespace {

// Greedy centre-distance matching used for the TP-error statistics.
std::vector<std::pair<int, int>> greedy_match(std::span<const metrics::DetectionResult> preds,
                                              std::span<const metrics::GtDetection> gts,
                                              double threshold) {
    std::vector<std::pair<int, int>> pairs;
    std::vector<uint8_t> taken(gts.size(), 0);
    std::vector<int> order(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return preds[a].score > preds[b].score; });
    for (int pi : order) {
        double best = threshold;
        int best_gt = -1;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (taken[gi] || gts[gi].class_id != preds[pi].class_id) continue;
            const double d = std::hypot(preds[pi].box.center.x - gts[gi].box.center.x,
                                        preds[pi].box.center.z - gts[gi].box.center.z);
            if (d <= best) {
                best = d;
                best_gt = static_cast<int>(gi);
            }
        }
        if (best_gt >= 0) {
            taken[static_cast<size_t>(best_gt)] = 1;
            pairs.emplace_back(pi, best_gt);
        }
    }
    return pairs;
}

double aligned_box_iou(const geom::Box3D& a, const geom::Box3D& b) {
    const double vi = std::min(a.h, b.h) * std::min(a.w, b.w) * std::min(a.l, b.l);
    const double va = a.h * a.w * a.l;
    const double vb = b.h * b.w * b.l;
    return vi / (va + vb - vi);
}

double yaw_difference(double a, double b) {
    double d = std::fmod(std::abs(a - b), 2.0 * std::numbers::pi);
    return std::min(d, 2.0 * std::numbers::pi - d);
}

}  // namespace

EvalReport evaluate(const Network& net, const SceneConfig& scfg, int num_scenes, uint64_t seed0,
                    const std::string& render_dir) {
    check_arg(num_scenes >= 1, "evaluate: need at least one scene");
    EvalReport rep;
    rep.scenes = num_scenes;
    rep.has_seg = net.task_index(Task::seg).has_value();
    rep.has_det3d = net.task_index(Task::det3d).has_value();
    rep.has_depth = net.task_index(Task::depth).has_value();

    const std::array<double, 4> ap_thresholds{0.5, 1.0, 2.0, 4.0};
    std::array<double, 4> ap_sums{};
    double ate_sum = 0, ase_sum = 0, aoe_sum = 0, aae_sum = 0;
    int64_t tp_count = 0;
    metrics::PQResult pq_acc;
    std::vector<double> depth_pred_all, depth_gt_all;
    std::vector<uint8_t> depth_valid_all;

    if (!render_dir.empty()) std::filesystem::create_directories(render_dir);

    for (int si = 0; si < num_scenes; ++si) {
        const SyntheticScene scene = gen_scene(seed0 + static_cast<uint64_t>(si), scfg);
        const Network::Forward fwd = net.forward(scene.image);

        if (rep.has_seg) {
            const metrics::PanopticMap pred = net.predict_panoptic(scene, fwd);
            const metrics::PQResult r =
                metrics::panoptic_quality(pred, scene.pano, scfg.taxonomy());
            pq_acc.pq += r.pq;
            pq_acc.sq += r.sq;
            pq_acc.rq += r.rq;
            pq_acc.pq_things += r.pq_things;
            pq_acc.pq_stuff += r.pq_stuff;
            pq_acc.tp += r.tp;
            pq_acc.fp += r.fp;
            pq_acc.fn += r.fn;
            if (!render_dir.empty() && si < 4)
                write_label_ppm(render_dir + "/scene" + std::to_string(si) + "_pano_pred.ppm",
                                pred.class_id, pred.instance_id, scene.height, scene.width);
        }

        if (rep.has_det3d) {
            std::vector<metrics::DetectionResult> preds = net.predict_boxes(scene, fwd);
            std::vector<metrics::GtDetection> gts;
            for (const GtInstance& gi : scene.objects) gts.push_back({gi.box3d, gi.class_id});
            for (size_t ti = 0; ti < ap_thresholds.size(); ++ti)
                ap_sums[ti] += metrics::distance_ap(preds, gts, ap_thresholds[ti]);
            for (const auto& [pi, gi] : greedy_match(preds, gts, 2.0)) {
                const geom::Box3D& pb = preds[static_cast<size_t>(pi)].box;
                const geom::Box3D& gb = gts[static_cast<size_t>(gi)].box;
                ate_sum += std::hypot(pb.center.x - gb.center.x, pb.center.z - gb.center.z);
                ase_sum += 1.0 - aligned_box_iou(pb, gb);
                aoe_sum += yaw_difference(pb.yaw, gb.yaw);
                const bool attr_ok = pb.attribute.has_value() && gb.attribute.has_value() &&
                                     *pb.attribute == *gb.attribute;
                aae_sum += attr_ok ? 0.0 : 1.0;
                ++tp_count;
            }
        }

        if (rep.has_depth) {
            Tensor pred = net.predict_depth(fwd);
            if (pred.dim(1) != scene.height || pred.dim(2) != scene.width)
                pred = crop_spatial(pred, scene.height, scene.width);
            depth_pred_all.insert(depth_pred_all.end(), pred.data().begin(), pred.data().end());
            depth_gt_all.insert(depth_gt_all.end(), scene.depth.begin(), scene.depth.end());
            depth_valid_all.insert(depth_valid_all.end(), scene.depth_valid.begin(),
                                   scene.depth_valid.end());
            if (!render_dir.empty() && si < 4)
                write_pgm(render_dir + "/scene" + std::to_string(si) + "_depth_pred.pgm",
                          pred.data(), scene.height, scene.width, scfg.max_depth);
        }

        if (!render_dir.empty() && si < 4) {
            write_ppm(render_dir + "/scene" + std::to_string(si) + "_image.ppm",
                      scene.image.data(), scene.height, scene.width);
            write_label_ppm(render_dir + "/scene" + std::to_string(si) + "_pano_gt.ppm",
                            scene.pano.class_id, scene.pano.instance_id, scene.height,
                            scene.width);
            write_pgm(render_dir + "/scene" + std::to_string(si) + "_depth_gt.pgm", scene.depth,
                      scene.height, scene.width, scfg.max_depth);
        }
    }

    const double inv = 1.0 / num_scenes;
    if (rep.has_seg) {
        rep.pq.pq = pq_acc.pq * inv;
        rep.pq.sq = pq_acc.sq * inv;
        rep.pq.rq = pq_acc.rq * inv;
        rep.pq.pq_things = pq_acc.pq_things * inv;
        rep.pq.pq_stuff = pq_acc.pq_stuff * inv;
        rep.pq.tp = pq_acc.tp;
        rep.pq.fp = pq_acc.fp;
        rep.pq.fn = pq_acc.fn;
    }
    if (rep.has_det3d) {
        double map = 0.0;
        for (double s : ap_sums) map += s * inv;
        rep.map = map / static_cast<double>(ap_thresholds.size());
        if (tp_count > 0) {
            rep.mtp[0] = ate_sum / static_cast<double>(tp_count);
            rep.mtp[1] = ase_sum / static_cast<double>(tp_count);
            rep.mtp[2] = aoe_sum / static_cast<double>(tp_count);
            rep.mtp[3] = 1.0;  // no temporal data: velocity error pinned to 1
            rep.mtp[4] = aae_sum / static_cast<double>(tp_count);
        }
        rep.nds = metrics::nds(rep.map, rep.mtp);
    }
    if (rep.has_depth)
        rep.depth = metrics::depth_metrics(depth_pred_all, depth_gt_all, depth_valid_all);
    return rep;
}

std::string eval_report_to_json(const EvalReport& rep) {
    nlohmann::json j;
    j["scenes"] = rep.scenes;
    if (rep.has_seg) {
        j["panoptic"] = {{"pq", rep.pq.pq},       {"sq", rep.pq.sq},
                         {"rq", rep.pq.rq},       {"pq_things", rep.pq.pq_things},
                         {"pq_stuff", rep.pq.pq_stuff}, {"tp", rep.pq.tp},
                         {"fp", rep.pq.fp},       {"fn", rep.pq.fn}};
    }
    if (rep.has_det3d) {
        j["detection"] = {{"map", rep.map},
                          {"mate", rep.mtp[0]},
                          {"mase", rep.mtp[1]},
                          {"maoe", rep.mtp[2]},
                          {"mave", rep.mtp[3]},
                          {"maae", rep.mtp[4]},
                          {"nds", rep.nds}};
    }
    if (rep.has_depth) {
        j["depth"] = {{"abs_rel", rep.depth.abs_rel},
                      {"delta1", rep.depth.delta1},
                      {"delta2", rep.depth.delta2},
                      {"delta3", rep.depth.delta3},
                      {"rmse", rep.depth.rmse}};
    }
    return j.dump(2);
}

void write_eval_csv(const std::string& path, const EvalReport& rep) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "metric,value\n";
    char buf[64];
    const auto row = [&](const char* name, double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        os << name << ',' << buf << '\n';
    };
    os << "scenes," << rep.scenes << '\n';
    if (rep.has_seg) {
        row("pq", rep.pq.pq);
        row("sq", rep.pq.sq);
        row("rq", rep.pq.rq);
        row("pq_things", rep.pq.pq_things);
        row("pq_stuff", rep.pq.pq_stuff);
    }
    if (rep.has_det3d) {
        row("map", rep.map);
        row("mate", rep.mtp[0]);
        row("mase", rep.mtp[1]);
        row("maoe", rep.mtp[2]);
        row("mave", rep.mtp[3]);
        row("maae", rep.mtp[4]);
        row("nds", rep.nds);
    }
    if (rep.has_depth) {
        row("abs_rel", rep.depth.abs_rel);
        row("delta1", rep.depth.delta1);
        row("delta2", rep.depth.delta2);
        row("delta3", rep.depth.delta3);
        row("rmse", rep.depth.rmse);
    }
}

}  // namespace d2b::harness
