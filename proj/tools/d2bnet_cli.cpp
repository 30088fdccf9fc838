// Command-line front end: verification suites, toy training, checkpoint
// evaluation and the dynamic-convolution microbenchmark.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "d2bnet/bench.hpp"
#include "d2bnet/kernels.hpp"
#include "d2bnet/trainer.hpp"
#include "d2bnet/verification.hpp"

namespace fs = std::filesystem;
using namespace d2b;
using namespace d2b::harness;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << text;
}

std::vector<Task> parse_tasks(const std::string& csv) {
    std::vector<Task> tasks;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) tasks.push_back(task_from_name(item));
    }
    check_arg(!tasks.empty(), "at least one task required");
    return tasks;
}

int run_verify(const std::string& report_path, bool with_training, bool skip_bench) {
    VerifyOptions opt;
    opt.include_training = with_training;
    opt.include_benchmark = !skip_bench;
    const VerifyReport report = run_verification(opt);
    for (const CheckResult& c : report.checks)
        std::printf("[%s] %-20s %s (%.2fs) %s\n", c.pass ? "PASS" : "FAIL", c.id.c_str(),
                    c.name.c_str(), c.seconds, c.detail.c_str());
    const std::string json = verify_report_to_json(report);
    if (!report_path.empty()) {
        write_file(report_path, json);
        std::printf("report written to %s\n", report_path.c_str());
    }
    std::printf("%s\n", report.all_pass() ? "ALL CHECKS PASSED" : "CHECK FAILURES PRESENT");
    return report.all_pass() ? 0 : 1;
}

int run_train(const std::string& tasks_csv, int steps, uint64_t seed,
              const std::string& config_path, const std::string& out_dir, double lr,
              const std::string& routing, int scene_count, int channels) {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = train_config_from_json(read_file(config_path));
    if (!tasks_csv.empty()) cfg.net.tasks = parse_tasks(tasks_csv);
    if (steps > 0) cfg.steps = steps;
    if (seed != 0) cfg.seed = seed;
    if (lr > 0.0) cfg.lr = lr;
    if (!routing.empty()) cfg.net.routing = routing_mode_from_name(routing);
    if (scene_count > 0) cfg.scene_count = scene_count;
    if (channels > 0) {
        cfg.net.branch.channels = channels;
        cfg.net.branch.dense_width = channels;
    }

    std::printf("training: tasks=");
    for (size_t i = 0; i < cfg.net.tasks.size(); ++i)
        std::printf("%s%s", i ? "," : "", task_name(cfg.net.tasks[i]));
    std::printf(" steps=%d lr=%g seed=%llu routing=%s channels=%d\n", cfg.steps, cfg.lr,
                static_cast<unsigned long long>(cfg.seed), routing_mode_name(cfg.net.routing),
                cfg.net.branch.channels);

    const TrainOutput out = train_toy(cfg);
    if (!out.result.trace.empty())
        std::printf("loss %.6f -> %.6f over %zu steps\n", out.result.trace.front().total,
                    out.result.trace.back().total, out.result.trace.size());
    if (out.result.aborted)
        std::printf("ABORTED: %s (checkpoint keeps the last good parameters)\n",
                    out.result.abort_reason.c_str());

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_trace_csv(out_dir + "/trace.csv", out.result.trace);
        write_file(out_dir + "/train_report.json", train_result_to_json(cfg, out.result));
        save_checkpoint(out_dir + "/checkpoint.d2b", *out.network);
        write_file(out_dir + "/config.json", train_config_to_json(cfg));
        std::printf("wrote %s/{trace.csv,train_report.json,checkpoint.d2b,config.json}\n",
                    out_dir.c_str());
    }
    return out.result.aborted ? 1 : 0;
}

int run_eval(const std::string& checkpoint, int scenes, uint64_t seed,
             const std::string& out_dir) {
    auto net = load_checkpoint(checkpoint);
    SceneConfig scfg;  // evaluation scenes use the default toy geometry
    const std::string render_dir = out_dir.empty() ? "" : out_dir + "/renders";
    const EvalReport rep = evaluate(*net, scfg, scenes, seed, render_dir);
    const std::string json = eval_report_to_json(rep);
    std::printf("%s\n", json.c_str());
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file(out_dir + "/eval_report.json", json);
        write_eval_csv(out_dir + "/eval_metrics.csv", rep);
        std::printf("wrote %s/{eval_report.json,eval_metrics.csv,renders/}\n", out_dir.c_str());
    }
    return 0;
}

int run_bench(int c, const std::string& hw, int kernel, int repeats, const std::string& out_dir) {
    int h = 0, w = 0;
    if (std::sscanf(hw.c_str(), "%dx%d", &h, &w) != 2 || h <= 0 || w <= 0)
        throw std::runtime_error("--hw must look like 128x128");
    const BenchResult r = bench_rank1_conv(c, h, w, kernel, repeats);
    std::printf("%s\n", bench_to_json(r).c_str());
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file(out_dir + "/bench.json", bench_to_json(r));
        write_file(out_dir + "/bench.csv", bench_to_csv(r));
        std::printf("wrote %s/{bench.json,bench.csv}\n", out_dir.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"d2bnet: dynamic two-branched multi-task perception kernels"};
    app.require_subcommand(1);

    std::string isa;
    app.add_option("--isa", isa, "kernel ISA override: scalar, avx2 or auto");

    auto* verify = app.add_subcommand("verify", "run every oracle and invariant suite");
    std::string report_path;
    bool with_training = false, skip_bench = false;
    verify->add_option("--report", report_path, "write the JSON report here");
    verify->add_flag("--with-training", with_training,
                     "also run the slow single-task overfit and co-training checks");
    verify->add_flag("--skip-bench", skip_bench, "skip the wall-clock benchmark check");

    auto* train = app.add_subcommand("train-toy", "train the toy multi-task network");
    std::string tasks_csv, config_path, out_dir, routing;
    int steps = 0, scene_count = 0, channels = 0;
    uint64_t seed = 0;
    double lr = 0.0;
    train->add_option("--tasks", tasks_csv, "comma-separated subset of seg,det3d,depth");
    train->add_option("--steps", steps, "gradient steps");
    train->add_option("--seed", seed, "run seed");
    train->add_option("--config", config_path, "JSON config file");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--lr", lr, "learning rate");
    train->add_option("--routing", routing, "none, frozen, cdr or tdr");
    train->add_option("--scenes", scene_count, "scenes cycled during training");
    train->add_option("--channels", channels, "branch width (multiple of 8)");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on fresh scenes");
    std::string checkpoint;
    int eval_scenes = 8;
    uint64_t eval_seed = 9000;
    std::string eval_out;
    eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    eval->add_option("--scenes", eval_scenes, "number of scenes");
    eval->add_option("--seed", eval_seed, "first scene seed");
    eval->add_option("--out", eval_out, "output directory");

    auto* bench = app.add_subcommand("bench", "rank-1 vs dense dynamic convolution timing");
    int bench_c = 64, bench_kernel = 3, bench_repeats = 5;
    std::string bench_hw = "128x128", bench_out;
    bench->add_option("--c", bench_c, "channel width");
    bench->add_option("--hw", bench_hw, "spatial size, e.g. 128x128");
    bench->add_option("--kernel", bench_kernel, "odd kernel extent");
    bench->add_option("--repeats", bench_repeats, "timing repeats");
    bench->add_option("--out", bench_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (!isa.empty()) kernels::set_active(isa);
        if (verify->parsed()) return run_verify(report_path, with_training, skip_bench);
        if (train->parsed())
            return run_train(tasks_csv, steps, seed, config_path, out_dir, lr, routing,
                             scene_count, channels);
        if (eval->parsed()) return run_eval(checkpoint, eval_scenes, eval_seed, eval_out);
        if (bench->parsed())
            return run_bench(bench_c, bench_hw, bench_kernel, bench_repeats, bench_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
