#pragma once

#include <string>
#include <vector>

#include "emf/backbone.hpp"
#include "emf/tensor.hpp"

namespace emf {

/// Outcome of a train-vs-fused equivalence check.
struct FusionReport {
    struct BlockDeviation {
        std::string name;
        double max_abs = 0.0;
    };
    std::vector<BlockDeviation> blocks;  // forward order
    double global_max_abs = 0.0;         // max over blocks
    int inputs_tested = 0;
    double tolerance = 0.0;
    bool pass = false;
    std::string first_offender;  // first block over tolerance, empty when pass
};

/// Folds inference batch norm into the preceding convolution:
///   W' = W * gamma / sqrt(var + eps),  b' = beta + (b - mean) * gamma / sqrt(var + eps).
ConvParams fold_bn(const ConvParams& conv, const BnParams& bn);

/// Zero-embeds a k x k kernel centered in a K x K kernel (k, K odd, K >= k);
/// padding becomes K/2 so outputs are unchanged under zero padding.
ConvParams pad_kernel(const ConvParams& small, int target_kernel);

/// Dirac kernel: output channel c reads input channel c at the center tap.
/// conv2d(x, identity_kernel(C, K, groups)) == x for any x.
ConvParams identity_kernel(int channels, int kernel, int groups);

/// Elementwise sum of parallel conv branches with identical geometry.
ConvParams merge_branches(const std::vector<ConvParams>& branches);

/// Merges every RepBlock and RepMixer (residual absorbed as a Dirac kernel)
/// into single convolutions and folds every remaining conv+BN pair; LSTM,
/// point-wise FFN convs and the head are copied verbatim.
Model fuse_model(const Model& m);

/// Runs two same-config models (each in its own form, normally train vs
/// fused) on `n_inputs` seeded random inputs with fresh states, inputs
/// standardized to zero mean / unit variance, and reports per-block and
/// global max-abs deviations over all recorded taps.
FusionReport verify_fusion(const Model& train, const Model& fused, int n_inputs,
                           double tolerance, int height = 64, int width = 64,
                           std::uint64_t seed = 7);

/// Seeded synthetic input used by the verifier and the benchmark: uniform
/// counts in [0, 255] standardized to zero mean / unit variance.
Tensor standardized_random_input(int channels, int height, int width, std::uint64_t seed);

}  // namespace emf
