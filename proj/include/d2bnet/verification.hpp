#pragma once

// Machine-checkable verification: oracle comparisons, invariant suites and
// the acceptance criteria, each returning a structured pass/fail record.

#include <string>
#include <vector>

#include "d2bnet/trainer.hpp"

namespace d2b::harness {

struct CheckResult {
    std::string id;
    std::string name;
    bool pass = false;
    double value = 0.0;  // the measured quantity (max error, speedup, ...)
    std::string detail;
    double seconds = 0.0;
};

struct VerifyReport {
    std::vector<CheckResult> checks;
    bool all_pass() const;
};

std::string verify_report_to_json(const VerifyReport& report);
VerifyReport verify_report_from_json(const std::string& text);

// Acceptance criteria. The fault-injection flag flips one sign before the
// equivalence comparison; it exists so the checker itself can be tested.
CheckResult check_rank1_equivalence(bool inject_fault = false);
CheckResult check_degeneracy();
CheckResult check_gradient_suite();
CheckResult check_factored_attention();
CheckResult check_geometry();
CheckResult check_corner_disentanglement();
CheckResult check_metric_examples();
CheckResult check_loss_weights();
CheckResult check_overfit_task(Task task, int steps = 500, int window = 50);
CheckResult check_cotraining_and_routing_logs(int steps = 60);
CheckResult check_benchmark();

// Additional per-module invariant suites.
std::vector<CheckResult> module_invariant_checks();

struct VerifyOptions {
    bool include_training = false;  // single-task overfits + co-training
    bool include_benchmark = true;
    bool include_invariants = true;
};

VerifyReport run_verification(const VerifyOptions& options = {});

// The small network/scene profile used by training-based checks.
TrainConfig acceptance_train_config(Task task);
TrainConfig acceptance_cotrain_config();

}  // namespace d2b::harness
