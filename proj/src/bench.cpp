#include "emf/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "emf/detection.hpp"
#include "emf/encoder.hpp"
#include "emf/reparam.hpp"

namespace emf {

namespace {

double percentile(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

BenchReport summarize(std::vector<double> samples_ms, int warmup) {
    BenchReport r;
    r.iterations = static_cast<int>(samples_ms.size());
    r.warmup = warmup;
    double sum = 0.0;
    for (double v : samples_ms) sum += v;
    r.mean_ms = sum / static_cast<double>(samples_ms.size());
    double var = 0.0;
    for (double v : samples_ms) var += (v - r.mean_ms) * (v - r.mean_ms);
    r.std_ms = std::sqrt(var / static_cast<double>(samples_ms.size()));
    std::sort(samples_ms.begin(), samples_ms.end());
    r.p50_ms = percentile(samples_ms, 0.50);
    r.p95_ms = percentile(samples_ms, 0.95);
    return r;
}

}  // namespace

BenchReport run_benchmark(const Model& m, int height, int width, int iterations,
                          int warmup) {
    if (iterations < 1) throw ArgumentError("run_benchmark: iterations must be >= 1");
    if (warmup < 0) throw ArgumentError("run_benchmark: warmup must be >= 0");

    const Tensor x = standardized_random_input(m.config.input_channels, height, width, 11);
    LstmStateSet states;

    using clock = std::chrono::steady_clock;
    std::vector<double> samples;
    samples.reserve(static_cast<std::size_t>(iterations));
    for (int i = 0; i < warmup + iterations; ++i) {
        const auto t0 = clock::now();
        RawPrediction raw = model_forward(x, states, m);
        const auto t1 = clock::now();
        (void)raw;
        if (i >= warmup)
            samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    BenchReport r = summarize(std::move(samples), warmup);
    r.form = form_name(m.form);
    r.channels = m.config.input_channels;
    r.height = height;
    r.width = width;
    return r;
}

BenchReport run_benchmark_end_to_end(const Model& m, int sensor_width, int sensor_height,
                                     const EncoderConfig& enc, const PostConfig& post,
                                     int iterations, int warmup) {
    if (iterations < 1) throw ArgumentError("run_benchmark: iterations must be >= 1");
    if (warmup < 0) throw ArgumentError("run_benchmark: warmup must be >= 0");

    // Synthetic window with a plausible event rate (~20k events per 50 ms).
    EventWindow window;
    window.t0 = 0;
    window.dt = enc.dt_us;
    std::uint64_t state = 99;
    auto next = [&state]() {
        state += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    };
    window.events.resize(20000);
    for (Event& e : window.events) {
        e.t = static_cast<std::int64_t>(next() % static_cast<std::uint64_t>(enc.dt_us));
        e.x = static_cast<int>(next() % static_cast<std::uint64_t>(sensor_width));
        e.y = static_cast<int>(next() % static_cast<std::uint64_t>(sensor_height));
        e.p = (next() & 1) ? 1 : -1;
    }
    std::stable_sort(window.events.begin(), window.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });

    LstmStateSet states;
    using clock = std::chrono::steady_clock;
    std::vector<double> samples;
    samples.reserve(static_cast<std::size_t>(iterations));
    for (int i = 0; i < warmup + iterations; ++i) {
        const auto t0 = clock::now();
        const Tensor x = flatten_volume(
            encode_stacked_histogram(window, sensor_width, sensor_height, enc));
        RawPrediction raw = model_forward(x, states, m);
        std::vector<Detection> dets = nms(decode(raw, post.score_thr), post.iou_thr,
                                          post.score_thr);
        const auto t1 = clock::now();
        (void)dets;
        if (i >= warmup)
            samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    BenchReport r = summarize(std::move(samples), warmup);
    r.form = form_name(m.form);
    r.channels = m.config.input_channels;
    r.height = (sensor_height + enc.spatial_divisor - 1) / enc.spatial_divisor;
    r.width = (sensor_width + enc.spatial_divisor - 1) / enc.spatial_divisor;
    r.end_to_end = true;
    return r;
}

nlohmann::json bench_report_to_json(const BenchReport& r) {
    return nlohmann::json{{"iterations", r.iterations}, {"warmup", r.warmup},
                          {"mean_ms", r.mean_ms},       {"std_ms", r.std_ms},
                          {"p50_ms", r.p50_ms},         {"p95_ms", r.p95_ms},
                          {"form", r.form},             {"channels", r.channels},
                          {"height", r.height},         {"width", r.width},
                          {"end_to_end", r.end_to_end}};
}

}  // namespace emf
