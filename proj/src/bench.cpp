#include "d2bnet/bench.hpp"

#include <algorithm>
#include <chrono>

#include <json.hpp>

#include "d2bnet/dynamic_ops.hpp"
#include "d2bnet/kernels.hpp"
#include "d2bnet/rng.hpp"
#include "d2bnet/tensor.hpp"

namespace d2b::harness {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor random_tensor(Shape shape, Rng& rng) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& x : data) x = rng.uniform(-1.0, 1.0);
    return Tensor::from(std::move(shape), std::move(data));
}

}  // namespace

BenchResult bench_rank1_conv(int channels, int height, int width, int kernel, int repeats,
                             uint64_t seed) {
    check_arg(channels >= 1 && height >= 1 && width >= 1, "bench: bad extent");
    check_arg(kernel >= 1 && kernel % 2 == 1, "bench: kernel must be odd");
    check_arg(repeats >= 1, "bench: repeats must be >= 1");

    BenchResult r;
    r.channels = channels;
    r.height = height;
    r.width = width;
    r.kernel = kernel;
    r.repeats = repeats;
    r.isa = kernels::active_name();

    Rng rng(seed);
    const Tensor x = random_tensor({channels, height, width}, rng);
    dyn::Rank1Factors factors{random_tensor({channels, height, width}, rng),
                              random_tensor({channels, height, width}, rng)};
    dyn::Rank1ConvLayer layer;
    layer.weight = random_tensor({channels, channels, kernel, kernel}, rng);

    using clock = std::chrono::steady_clock;
    volatile double sink = 0.0;

    for (int i = 0; i < repeats; ++i) {
        const auto t0 = clock::now();
        const Tensor y = dyn::rank1_conv(x, factors, layer);
        const auto t1 = clock::now();
        sink = sink + y.data()[0];
        r.rank1_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }

    kernels::ConvShape s;
    s.ci = channels;
    s.hi = height;
    s.wi = width;
    s.co = channels;
    s.ho = height;
    s.wo = width;
    s.kh = kernel;
    s.kw = kernel;
    s.stride = 1;
    s.pad = kernel / 2;
    std::vector<double> y_ref(static_cast<size_t>(channels) * height * width);
    std::vector<double> scratch(static_cast<size_t>(channels) * channels * kernel * kernel);
    for (int i = 0; i < repeats; ++i) {
        std::fill(y_ref.begin(), y_ref.end(), 0.0);
        const auto t0 = clock::now();
        dyn::dense_dynamic_conv_rank1_pattern(x.data().data(), factors.a.data().data(),
                                              factors.b.data().data(),
                                              layer.weight.data().data(), y_ref.data(), s,
                                              scratch.data());
        const auto t1 = clock::now();
        sink = sink + y_ref[0];
        r.reference_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }

    r.rank1_median_ms = median(r.rank1_ms);
    r.reference_median_ms = median(r.reference_ms);
    r.speedup = r.reference_median_ms / r.rank1_median_ms;
    return r;
}

std::string bench_to_json(const BenchResult& r) {
    nlohmann::json j;
    j["channels"] = r.channels;
    j["height"] = r.height;
    j["width"] = r.width;
    j["kernel"] = r.kernel;
    j["repeats"] = r.repeats;
    j["isa"] = r.isa;
    j["rank1_ms"] = r.rank1_ms;
    j["reference_ms"] = r.reference_ms;
    j["rank1_median_ms"] = r.rank1_median_ms;
    j["reference_median_ms"] = r.reference_median_ms;
    j["speedup"] = r.speedup;
    return j.dump(2);
}

std::string bench_to_csv(const BenchResult& r) {
    std::string out = "variant,run,ms\n";
    for (size_t i = 0; i < r.rank1_ms.size(); ++i)
        out += "rank1," + std::to_string(i) + "," + std::to_string(r.rank1_ms[i]) + "\n";
    for (size_t i = 0; i < r.reference_ms.size(); ++i)
        out += "reference," + std::to_string(i) + "," + std::to_string(r.reference_ms[i]) + "\n";
    return out;
}

}  // namespace d2b::harness
