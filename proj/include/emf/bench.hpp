#pragma once

#include <string>

#include "emf/backbone.hpp"
#include "emf/config.hpp"

namespace emf {

/// Latency statistics over the timed (post-warmup) iterations only.
struct BenchReport {
    int iterations = 0;
    int warmup = 0;
    double mean_ms = 0.0;
    double std_ms = 0.0;
    double p50_ms = 0.0;
    double p95_ms = 0.0;
    std::string form;
    int channels = 0;
    int height = 0;
    int width = 0;
    bool end_to_end = false;
};

/// Times the model forward (backbone + head) on a pre-generated input tensor
/// that is resident in memory before the clock starts; batch size 1. LSTM
/// state persists across iterations, matching streaming inference.
BenchReport run_benchmark(const Model& m, int height, int width, int iterations,
                          int warmup);

/// Times the full per-window path instead: encode -> forward -> decode -> NMS
/// over a pre-generated synthetic event window.
BenchReport run_benchmark_end_to_end(const Model& m, int sensor_width, int sensor_height,
                                     const EncoderConfig& enc, const PostConfig& post,
                                     int iterations, int warmup);

nlohmann::json bench_report_to_json(const BenchReport& r);

}  // namespace emf
