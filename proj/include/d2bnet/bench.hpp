#pragma once

// Microbenchmark: the rank-1 dynamic convolution against the brute-force
// per-position dynamic convolution on identical inputs.

#include <cstdint>
#include <string>
#include <vector>

namespace d2b::harness {

struct BenchResult {
    int channels = 0, height = 0, width = 0, kernel = 0, repeats = 0;
    std::string isa;
    std::vector<double> rank1_ms;      // per-repeat wall-clock
    std::vector<double> reference_ms;
    double rank1_median_ms = 0.0;
    double reference_median_ms = 0.0;
    double speedup = 0.0;  // reference / rank1
};

BenchResult bench_rank1_conv(int channels, int height, int width, int kernel, int repeats,
                             uint64_t seed = 7);

std::string bench_to_json(const BenchResult& r);
std::string bench_to_csv(const BenchResult& r);

}  // namespace d2b::harness
