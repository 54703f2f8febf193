#include "emf/config.hpp"

#include <fstream>

namespace emf {

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok) throw ConfigError("config: unknown key \"" + key + "\" in " + where);
    }
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    encoder.validate();
    if (model.input_channels != encoder.polarities * encoder.bins)
        throw ConfigError("config: model input_channels " +
                          std::to_string(model.input_channels) + " != P*T = " +
                          std::to_string(encoder.polarities * encoder.bins));
    const EvalProtocol proto = EvalProtocol::from_name(protocol);
    if (proto.spatial_divisor != encoder.spatial_divisor)
        throw ConfigError("config: protocol \"" + protocol + "\" requires spatial divisor " +
                          std::to_string(proto.spatial_divisor) + ", encoder uses " +
                          std::to_string(encoder.spatial_divisor));
    if (post.score_thr < 0.0 || post.score_thr > 1.0 || post.overlay_score_thr < 0.0 ||
        post.overlay_score_thr > 1.0)
        throw ConfigError("config: score thresholds must lie in [0,1]");
    if (post.iou_thr < 0.0 || post.iou_thr > 1.0)
        throw ConfigError("config: iou_thr must lie in [0,1]");
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    check_keys(j, {"model", "encoder", "post", "protocol", "seed"}, "top level");
    RunConfig cfg;
    if (j.contains("model")) {
        const nlohmann::json& m = j.at("model");
        check_keys(m,
                   {"input_channels", "epe_channels", "stage_channels", "blocks_per_stage",
                    "large_kernel", "mixer_kernel", "ffn_kernel", "ffn_expansion",
                    "detection_levels", "head_width", "num_classes"},
                   "model");
        maybe(m, "input_channels", cfg.model.input_channels);
        maybe(m, "epe_channels", cfg.model.epe_channels);
        maybe(m, "stage_channels", cfg.model.stage_channels);
        maybe(m, "blocks_per_stage", cfg.model.blocks_per_stage);
        maybe(m, "large_kernel", cfg.model.large_kernel);
        maybe(m, "mixer_kernel", cfg.model.mixer_kernel);
        maybe(m, "ffn_kernel", cfg.model.ffn_kernel);
        maybe(m, "ffn_expansion", cfg.model.ffn_expansion);
        maybe(m, "detection_levels", cfg.model.detection_levels);
        maybe(m, "head_width", cfg.model.head_width);
        maybe(m, "num_classes", cfg.model.num_classes);
    }
    if (j.contains("encoder")) {
        const nlohmann::json& e = j.at("encoder");
        check_keys(e, {"bins", "dt_us", "spatial_divisor", "saturation"}, "encoder");
        maybe(e, "bins", cfg.encoder.bins);
        maybe(e, "dt_us", cfg.encoder.dt_us);
        maybe(e, "spatial_divisor", cfg.encoder.spatial_divisor);
        maybe(e, "saturation", cfg.encoder.saturation);
    }
    if (j.contains("post")) {
        const nlohmann::json& p = j.at("post");
        check_keys(p, {"score_thr", "overlay_score_thr", "iou_thr"}, "post");
        maybe(p, "score_thr", cfg.post.score_thr);
        maybe(p, "overlay_score_thr", cfg.post.overlay_score_thr);
        maybe(p, "iou_thr", cfg.post.iou_thr);
    }
    maybe(j, "protocol", cfg.protocol);
    maybe(j, "seed", cfg.seed);
    return cfg;
}

nlohmann::json RunConfig::to_json() const {
    return nlohmann::json{
        {"model",
         {{"input_channels", model.input_channels},
          {"epe_channels", model.epe_channels},
          {"stage_channels", model.stage_channels},
          {"blocks_per_stage", model.blocks_per_stage},
          {"large_kernel", model.large_kernel},
          {"mixer_kernel", model.mixer_kernel},
          {"ffn_kernel", model.ffn_kernel},
          {"ffn_expansion", model.ffn_expansion},
          {"detection_levels", model.detection_levels},
          {"head_width", model.head_width},
          {"num_classes", model.num_classes}}},
        {"encoder",
         {{"bins", encoder.bins},
          {"dt_us", encoder.dt_us},
          {"spatial_divisor", encoder.spatial_divisor},
          {"saturation", encoder.saturation}}},
        {"post",
         {{"score_thr", post.score_thr},
          {"overlay_score_thr", post.overlay_score_thr},
          {"iou_thr", post.iou_thr}}},
        {"protocol", protocol},
        {"seed", seed}};
}

RunConfig RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return from_json(j);
}

}  // namespace emf
