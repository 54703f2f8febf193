#pragma once

#include <string>

#include <json.hpp>

#include "emf/backbone.hpp"
#include "emf/encoder.hpp"
#include "emf/evaluation.hpp"

namespace emf {

/// Post-processing thresholds (YOLOX-style defaults: a low floor for
/// evaluation, a higher one for overlay-quality output).
struct PostConfig {
    double score_thr = 0.01;
    double overlay_score_thr = 0.1;
    double iou_thr = 0.45;
};

/// One JSON document describing a whole run. Flags override file values;
/// the effective config is echoed into command output for reproducibility.
struct RunConfig {
    ModelConfig model;
    EncoderConfig encoder;
    PostConfig post;
    std::string protocol = "none";
    std::uint64_t seed = 42;

    /// Cross-field consistency: model input channels must equal P*T and the
    /// protocol's spatial divisor must equal the encoder's.
    void validate() const;

    static RunConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    static RunConfig load_file(const std::string& path);
};

}  // namespace emf
