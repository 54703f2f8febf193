#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "emf/detection.hpp"
#include "emf/tensor.hpp"

namespace emf {

enum class ModelForm { train, fused };

inline const char* form_name(ModelForm f) {
    return f == ModelForm::train ? "train" : "fused";
}

/// Architecture hyperparameters. Defaults give the 4-stage backbone over a
/// 20-channel stacked-histogram input with detection off stages 2..4
/// (strides 8/16/32).
struct ModelConfig {
    int input_channels = 20;  // P*T
    int epe_channels = 20;
    std::vector<int> stage_channels = {64, 128, 256, 512};
    int blocks_per_stage = 2;
    int large_kernel = 7;
    int mixer_kernel = 3;
    int ffn_kernel = 7;
    int ffn_expansion = 4;
    std::vector<int> detection_levels = {2, 3, 4};  // 1-based stage indices
    int head_width = 192;
    int num_classes = 2;

    void validate() const;
    int stage_stride(int stage_index) const { return 4 << (stage_index - 1); }
    HeadConfig head_config() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Convolution followed by inference batch norm (train-form building unit).
struct ConvBn {
    ConvParams conv;
    BnParams bn;
};

/// Multi-branch reparameterizable block: k x k conv+BN, a 3x3 conv+BN when
/// k > 3, and a BN identity branch at stride 1; branch outputs are summed and
/// activated. The fused form is a single convolution + activation.
struct RepBlockParams {
    int kernel = 3;
    int stride = 1;
    int groups = 1;  // channel count for depthwise, 1 for dense
    std::optional<ConvBn> main;
    std::optional<ConvBn> small;
    std::optional<BnParams> id_bn;
    std::optional<ConvParams> fused;
};

/// Token mixer: y = x + BN(DWConv3(x)) in train form, one depthwise conv in
/// fused form. Linear by construction so the residual can fold away.
struct RepMixerParams {
    std::optional<ConvBn> dw;
    std::optional<ConvParams> fused;
};

/// Channel mixer: y = x + project(act(expand(DWConv_BN(x)))).
struct ConvFfnParams {
    std::optional<ConvBn> dw;
    std::optional<ConvParams> dw_fused;
    ConvParams expand;
    ConvParams project;
};

struct EmfBlockParams {
    RepMixerParams mixer;
    ConvFfnParams ffn;
};

/// Event Progression Extractor: point-wise conv + BN + activation, mixing
/// only across time-bin channels (1x1 receptive field).
struct EpeParams {
    std::optional<ConvBn> pw;
    std::optional<ConvParams> fused;
};

/// Stage tokenizer: point-wise channel expansion, stride-2 large-kernel
/// RepBlocks (two in stage 1, one elsewhere), then a dense 1x1 RepBlock.
struct RootParams {
    std::optional<ConvBn> pw;
    std::optional<ConvParams> pw_fused;
    std::vector<RepBlockParams> down;
    RepBlockParams mix;
};

/// Per-pixel LSTM gate convolutions; wx carries the shared bias.
struct LstmParams {
    ConvParams wx;
    ConvParams wh;
};

struct StageParams {
    RootParams root;
    std::vector<EmfBlockParams> blocks;
    LstmParams lstm;
};

struct Model {
    ModelConfig config;
    ModelForm form = ModelForm::train;
    EpeParams epe;
    std::vector<StageParams> stages;  // always 4
    HeadParams head;
};

/// One LstmState per stage. States are owned by exactly one sequence
/// processor; empty states mean "fresh" and are materialized as zeros.
struct LstmStateSet {
    std::vector<LstmState> stages{std::vector<LstmState>(4)};

    void reset();
    std::vector<std::uint8_t> serialize() const;
    static LstmStateSet deserialize(const std::vector<std::uint8_t>& bytes);
};

/// Zeroes the state sets selected by `mask`; others are untouched.
void reset_states(std::vector<LstmStateSet>& sets, const std::vector<bool>& mask);

/// Named intermediate outputs of a forward pass, in evaluation order.
struct TapRecorder {
    std::vector<std::pair<std::string, Tensor>> taps;
    void add(std::string name, const Tensor& t) { taps.emplace_back(std::move(name), t); }
};

Tensor epe_forward(const Tensor& x, const EpeParams& p, ModelForm form);
Tensor repblock_forward(const Tensor& x, const RepBlockParams& p, ModelForm form);
Tensor repmixer_forward(const Tensor& x, const RepMixerParams& p, ModelForm form);
Tensor convffn_forward(const Tensor& x, const ConvFfnParams& p, ModelForm form);
Tensor emf_block_forward(const Tensor& x, const EmfBlockParams& p, ModelForm form);
Tensor root_module_forward(const Tensor& x, const RootParams& p, ModelForm form);

/// Root -> EMF blocks -> per-pixel LSTM; returns the LSTM hidden output and
/// updates `state` in place. A stale state shape raises StateError.
Tensor stage_forward(const Tensor& x, LstmState& state, const StageParams& p,
                     ModelForm form, TapRecorder* taps = nullptr,
                     const std::string& prefix = {});

/// Full backbone: EPE then the four stages chained. Returns the feature
/// pyramid at strides 4/8/16/32 and updates all LSTM states.
std::vector<Tensor> backbone_forward(const Tensor& x, LstmStateSet& states,
                                     const Model& m, TapRecorder* taps = nullptr);

/// Backbone + FPN + detection head.
RawPrediction model_forward(const Tensor& x, LstmStateSet& states, const Model& m,
                            TapRecorder* taps = nullptr);

/// Builds a model with correctly-shaped, zero-valued parameters in the given
/// form (used by the weights loader and the initializer).
Model build_model_skeleton(const ModelConfig& cfg, ModelForm form);

/// Deterministic seeded initialization: conv weights uniform in
/// (-1/sqrt(fan_in), 1/sqrt(fan_in)) from a per-tensor counter-based stream,
/// BN at identity (gamma=1, beta=0, mean=0, var=1), LSTM forget bias 1.
/// Identical (config, seed) pairs produce bit-identical models.
Model init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Flat view over every parameter tensor, in the canonical serialization
/// order. Names follow the documented "stage{i}.block{j}.mixer.dw" scheme.
struct ParamView {
    std::string name;
    std::vector<int> shape;
    float* data = nullptr;
    std::size_t count = 0;
};
std::vector<ParamView> parameter_views(Model& m);

std::size_t parameter_count(const Model& m);
std::uint64_t parameter_checksum(const Model& m);

}  // namespace emf
