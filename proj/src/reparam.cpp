#include "emf/reparam.hpp"

#include <cmath>

namespace emf {

namespace {

std::uint64_t splitmix_next(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

ConvParams fuse_repblock(const RepBlockParams& p) {
    if (!p.main) throw StateError("fuse: RepBlock has no train-form branches");
    std::vector<ConvParams> branches;
    branches.push_back(fold_bn(p.main->conv, p.main->bn));
    if (p.small)
        branches.push_back(pad_kernel(fold_bn(p.small->conv, p.small->bn), p.kernel));
    if (p.id_bn) {
        const int channels = p.main->conv.out_channels();
        branches.push_back(fold_bn(identity_kernel(channels, p.kernel, p.groups), *p.id_bn));
    }
    return merge_branches(branches);
}

ConvParams fuse_mixer(const RepMixerParams& p) {
    if (!p.dw) throw StateError("fuse: RepMixer has no train-form parameters");
    const int channels = p.dw->conv.out_channels();
    const int kernel = p.dw->conv.kernel_h();
    return merge_branches(
        {fold_bn(p.dw->conv, p.dw->bn), identity_kernel(channels, kernel, channels)});
}

}  // namespace

Tensor standardized_random_input(int channels, int height, int width, std::uint64_t seed) {
    Tensor t({channels, height, width});
    std::uint64_t state = seed;
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<float>(splitmix_next(state) >> 40) * (255.0f / 16777216.0f);
    double sum = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) sum += t[i];
    const double mean = sum / static_cast<double>(t.size());
    double var = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double d = t[i] - mean;
        var += d * d;
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(var / t.size() + 1e-8));
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = (t[i] - static_cast<float>(mean)) * inv;
    return t;
}

ConvParams fold_bn(const ConvParams& conv, const BnParams& bn) {
    if (bn.channels() != conv.out_channels())
        throw ShapeError("fold_bn: bn over " + std::to_string(bn.channels()) +
                         " channels, conv produces " + std::to_string(conv.out_channels()));
    ConvParams out = conv;
    const std::size_t per_out = out.weight.size() / static_cast<std::size_t>(conv.out_channels());
    for (int o = 0; o < conv.out_channels(); ++o) {
        // Same float sequence as batchnorm_infer's scale, so the folded conv
        // tracks the composed pair as closely as float32 allows.
        const float s = bn.gamma[o] * (1.0f / std::sqrt(bn.var[o] + bn.eps));
        float* w = out.weight.data() + static_cast<std::size_t>(o) * per_out;
        for (std::size_t i = 0; i < per_out; ++i) w[i] *= s;
        out.bias[o] = bn.beta[o] + (conv.bias[o] - bn.mean[o]) * s;
    }
    return out;
}

ConvParams pad_kernel(const ConvParams& small, int target_kernel) {
    const int k_h = small.kernel_h(), k_w = small.kernel_w();
    if (k_h != k_w) throw ArgumentError("pad_kernel: only square kernels supported");
    if (k_h % 2 == 0 || target_kernel % 2 == 0)
        throw ArgumentError("pad_kernel: kernel sizes must be odd");
    if (target_kernel < k_h)
        throw ArgumentError("pad_kernel: target " + std::to_string(target_kernel) +
                            " smaller than kernel " + std::to_string(k_h));
    ConvParams out;
    out.weight = Tensor({small.weight.dim(0), small.weight.dim(1), target_kernel, target_kernel});
    out.bias = small.bias;
    out.stride = small.stride;
    out.groups = small.groups;
    out.pad = target_kernel / 2;
    const int off = (target_kernel - k_h) / 2;
    for (int o = 0; o < small.weight.dim(0); ++o)
        for (int i = 0; i < small.weight.dim(1); ++i)
            for (int y = 0; y < k_h; ++y)
                for (int x = 0; x < k_w; ++x)
                    out.weight.at(o, i, y + off, x + off) = small.weight.at(o, i, y, x);
    return out;
}

ConvParams identity_kernel(int channels, int kernel, int groups) {
    if (kernel % 2 == 0) throw ArgumentError("identity_kernel: kernel must be odd");
    if (groups != 1 && groups != channels)
        throw ArgumentError("identity_kernel: groups must be 1 or C, got " +
                            std::to_string(groups));
    ConvParams p;
    p.weight = Tensor({channels, channels / groups, kernel, kernel});
    p.bias.assign(static_cast<std::size_t>(channels), 0.0f);
    p.stride = 1;
    p.pad = kernel / 2;
    p.groups = groups;
    const int center = kernel / 2;
    for (int c = 0; c < channels; ++c)
        p.weight.at(c, groups == 1 ? c : 0, center, center) = 1.0f;
    return p;
}

ConvParams merge_branches(const std::vector<ConvParams>& branches) {
    if (branches.empty()) throw ArgumentError("merge_branches: no branches");
    ConvParams out = branches.front();
    for (std::size_t i = 1; i < branches.size(); ++i) {
        const ConvParams& b = branches[i];
        if (!b.weight.same_shape(out.weight) || b.stride != out.stride ||
            b.pad != out.pad || b.groups != out.groups)
            throw ArgumentError("merge_branches: branch " + std::to_string(i) +
                                " geometry " + b.weight.shape_str() + "/s" +
                                std::to_string(b.stride) + "/p" + std::to_string(b.pad) +
                                "/g" + std::to_string(b.groups) + " incompatible with " +
                                out.weight.shape_str() + "/s" + std::to_string(out.stride) +
                                "/p" + std::to_string(out.pad) + "/g" +
                                std::to_string(out.groups));
        for (std::size_t k = 0; k < out.weight.size(); ++k) out.weight[k] += b.weight[k];
        for (std::size_t k = 0; k < out.bias.size(); ++k) out.bias[k] += b.bias[k];
    }
    return out;
}

Model fuse_model(const Model& m) {
    if (m.form == ModelForm::fused) throw StateError("fuse_model: model is already fused");
    Model out = build_model_skeleton(m.config, ModelForm::fused);
    out.epe.fused = fold_bn(m.epe.pw->conv, m.epe.pw->bn);
    for (std::size_t i = 0; i < m.stages.size(); ++i) {
        const StageParams& src = m.stages[i];
        StageParams& dst = out.stages[i];
        dst.root.pw_fused = fold_bn(src.root.pw->conv, src.root.pw->bn);
        for (std::size_t d = 0; d < src.root.down.size(); ++d)
            dst.root.down[d].fused = fuse_repblock(src.root.down[d]);
        dst.root.mix.fused = fuse_repblock(src.root.mix);
        for (std::size_t j = 0; j < src.blocks.size(); ++j) {
            dst.blocks[j].mixer.fused = fuse_mixer(src.blocks[j].mixer);
            dst.blocks[j].ffn.dw_fused =
                fold_bn(src.blocks[j].ffn.dw->conv, src.blocks[j].ffn.dw->bn);
            dst.blocks[j].ffn.expand = src.blocks[j].ffn.expand;
            dst.blocks[j].ffn.project = src.blocks[j].ffn.project;
        }
        dst.lstm = src.lstm;
    }
    out.head = m.head;
    return out;
}

FusionReport verify_fusion(const Model& train, const Model& fused, int n_inputs,
                           double tolerance, int height, int width, std::uint64_t seed) {
    if (!(train.config == fused.config))
        throw ArgumentError("verify_fusion: model configs differ");
    if (n_inputs < 1) throw ArgumentError("verify_fusion: need at least one input");

    FusionReport report;
    report.inputs_tested = n_inputs;
    report.tolerance = tolerance;

    for (int i = 0; i < n_inputs; ++i) {
        const Tensor x = standardized_random_input(
            train.config.input_channels, height, width,
            seed * 0x2545F4914F6CDD1Dull + static_cast<std::uint64_t>(i) + 1);
        LstmStateSet st_train, st_fused;
        TapRecorder taps_train, taps_fused;
        model_forward(x, st_train, train, &taps_train);
        model_forward(x, st_fused, fused, &taps_fused);
        if (taps_train.taps.size() != taps_fused.taps.size())
            throw StateError("verify_fusion: tap streams diverge");

        if (report.blocks.empty()) {
            report.blocks.resize(taps_train.taps.size());
            for (std::size_t b = 0; b < taps_train.taps.size(); ++b)
                report.blocks[b].name = taps_train.taps[b].first;
        }
        for (std::size_t b = 0; b < taps_train.taps.size(); ++b) {
            const Tensor& a = taps_train.taps[b].second;
            const Tensor& c = taps_fused.taps[b].second;
            if (!a.same_shape(c))
                throw StateError("verify_fusion: tap " + report.blocks[b].name +
                                 " shapes differ");
            double dev = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k)
                dev = std::max(dev, std::abs(static_cast<double>(a[k]) - c[k]));
            report.blocks[b].max_abs = std::max(report.blocks[b].max_abs, dev);
        }
    }
    for (const FusionReport::BlockDeviation& b : report.blocks) {
        report.global_max_abs = std::max(report.global_max_abs, b.max_abs);
        if (b.max_abs > tolerance && report.first_offender.empty())
            report.first_offender = b.name;
    }
    report.pass = report.global_max_abs <= tolerance;
    return report;
}

}  // namespace emf
