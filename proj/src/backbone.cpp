#include "emf/backbone.hpp"

#include <algorithm>
#include <cstring>

namespace emf {

namespace {

void add_inplace(Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("branch sum: " + a.shape_str() + " vs " + b.shape_str());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

ConvParams make_conv(int c_out, int c_in, int k, int stride, int groups) {
    ConvParams p;
    p.weight = Tensor({c_out, c_in / groups, k, k});
    p.bias.assign(static_cast<std::size_t>(c_out), 0.0f);
    p.stride = stride;
    p.pad = k / 2;
    p.groups = groups;
    return p;
}

ConvBn make_conv_bn(int c_out, int c_in, int k, int stride, int groups) {
    return ConvBn{make_conv(c_out, c_in, k, stride, groups), BnParams::identity(c_out)};
}

RepBlockParams make_repblock(int channels, int kernel, int stride, int groups,
                             ModelForm form) {
    RepBlockParams p;
    p.kernel = kernel;
    p.stride = stride;
    p.groups = groups;
    if (form == ModelForm::train) {
        p.main = make_conv_bn(channels, channels, kernel, stride, groups);
        if (kernel > 3) p.small = make_conv_bn(channels, channels, 3, stride, groups);
        if (stride == 1) p.id_bn = BnParams::identity(channels);
    } else {
        p.fused = make_conv(channels, channels, kernel, stride, groups);
    }
    return p;
}

// --- fixed-order parameter enumeration ------------------------------------

struct ViewCollector {
    std::vector<ParamView> views;

    void tensor(const std::string& name, Tensor& t) {
        views.push_back(ParamView{name, t.shape(), t.data(), t.size()});
    }
    void vec(const std::string& name, std::vector<float>& v) {
        views.push_back(ParamView{name, {static_cast<int>(v.size())}, v.data(), v.size()});
    }
    void conv(const std::string& prefix, ConvParams& c) {
        tensor(prefix + ".w", c.weight);
        vec(prefix + ".b", c.bias);
    }
    void bn(const std::string& prefix, BnParams& b) {
        vec(prefix + ".gamma", b.gamma);
        vec(prefix + ".beta", b.beta);
        vec(prefix + ".mean", b.mean);
        vec(prefix + ".var", b.var);
    }
    void conv_bn(const std::string& prefix, ConvBn& cb) {
        conv(prefix, cb.conv);
        bn(prefix + ".bn", cb.bn);
    }
    void repblock(const std::string& prefix, RepBlockParams& p) {
        if (p.fused) {
            conv(prefix, *p.fused);
            return;
        }
        if (p.main) conv_bn(prefix + ".k" + std::to_string(p.kernel), *p.main);
        if (p.small) conv_bn(prefix + ".k3", *p.small);
        if (p.id_bn) bn(prefix + ".id.bn", *p.id_bn);
    }
};

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t splitmix_next(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

float next_uniform(std::uint64_t& state, float bound) {
    // 24-bit mantissa draw in [0,1), fully specified so models are
    // bit-identical for a given (config, seed) on any platform.
    const float u = static_cast<float>(splitmix_next(state) >> 40) * (1.0f / 16777216.0f);
    return (2.0f * u - 1.0f) * bound;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

const ConvBn& expect_train(const std::optional<ConvBn>& p, const char* what) {
    if (!p) throw StateError(std::string(what) + ": train-form parameters missing");
    return *p;
}
const ConvParams& expect_fused(const std::optional<ConvParams>& p, const char* what) {
    if (!p) throw StateError(std::string(what) + ": fused-form parameters missing");
    return *p;
}

}  // namespace

void ModelConfig::validate() const {
    if (input_channels < 1 || epe_channels < 1)
        throw ConfigError("ModelConfig: channel counts must be positive");
    if (stage_channels.size() != 4)
        throw ConfigError("ModelConfig: exactly 4 stage widths required");
    for (int c : stage_channels)
        if (c < 1) throw ConfigError("ModelConfig: stage widths must be positive");
    if (blocks_per_stage < 1) throw ConfigError("ModelConfig: blocks_per_stage must be >= 1");
    if (large_kernel < 3 || large_kernel % 2 == 0)
        throw ConfigError("ModelConfig: large_kernel must be odd and >= 3");
    if (mixer_kernel < 1 || mixer_kernel % 2 == 0)
        throw ConfigError("ModelConfig: mixer_kernel must be odd");
    if (ffn_kernel < 1 || ffn_kernel % 2 == 0)
        throw ConfigError("ModelConfig: ffn_kernel must be odd");
    if (ffn_expansion < 1) throw ConfigError("ModelConfig: ffn_expansion must be >= 1");
    if (detection_levels.empty())
        throw ConfigError("ModelConfig: at least one detection level required");
    for (std::size_t i = 0; i < detection_levels.size(); ++i) {
        const int l = detection_levels[i];
        if (l < 1 || l > 4)
            throw ConfigError("ModelConfig: detection level " + std::to_string(l) +
                              " outside 1..4");
        if (i > 0 && detection_levels[i] <= detection_levels[i - 1])
            throw ConfigError("ModelConfig: detection levels must be strictly increasing");
    }
    if (head_width < 1) throw ConfigError("ModelConfig: head_width must be positive");
    if (num_classes < 1) throw ConfigError("ModelConfig: num_classes must be positive");
}

HeadConfig ModelConfig::head_config() const {
    HeadConfig hc;
    hc.num_classes = num_classes;
    hc.width = head_width;
    hc.strides.clear();
    for (int l : detection_levels) hc.strides.push_back(stage_stride(l));
    return hc;
}

Tensor epe_forward(const Tensor& x, const EpeParams& p, ModelForm form) {
    if (form == ModelForm::train) {
        const ConvBn& cb = expect_train(p.pw, "epe");
        return gelu(batchnorm_infer(conv2d(x, cb.conv), cb.bn));
    }
    return gelu(conv2d(x, expect_fused(p.fused, "epe")));
}

Tensor repblock_forward(const Tensor& x, const RepBlockParams& p, ModelForm form) {
    if (form == ModelForm::fused)
        return gelu(conv2d(x, expect_fused(p.fused, "repblock")));
    const ConvBn& main = expect_train(p.main, "repblock");
    Tensor sum = batchnorm_infer(conv2d(x, main.conv), main.bn);
    if (p.small) add_inplace(sum, batchnorm_infer(conv2d(x, p.small->conv), p.small->bn));
    if (p.id_bn) add_inplace(sum, batchnorm_infer(x, *p.id_bn));
    return gelu(sum);
}

Tensor repmixer_forward(const Tensor& x, const RepMixerParams& p, ModelForm form) {
    if (form == ModelForm::fused) return conv2d(x, expect_fused(p.fused, "repmixer"));
    const ConvBn& dw = expect_train(p.dw, "repmixer");
    Tensor y = batchnorm_infer(conv2d(x, dw.conv), dw.bn);
    add_inplace(y, x);
    return y;
}

Tensor convffn_forward(const Tensor& x, const ConvFfnParams& p, ModelForm form) {
    Tensor t;
    if (form == ModelForm::train) {
        const ConvBn& dw = expect_train(p.dw, "convffn");
        t = batchnorm_infer(conv2d(x, dw.conv), dw.bn);
    } else {
        t = conv2d(x, expect_fused(p.dw_fused, "convffn"));
    }
    t = conv2d(gelu(conv2d(t, p.expand)), p.project);
    add_inplace(t, x);
    return t;
}

Tensor emf_block_forward(const Tensor& x, const EmfBlockParams& p, ModelForm form) {
    return convffn_forward(repmixer_forward(x, p.mixer, form), p.ffn, form);
}

Tensor root_module_forward(const Tensor& x, const RootParams& p, ModelForm form) {
    Tensor t;
    if (form == ModelForm::train) {
        const ConvBn& pw = expect_train(p.pw, "root.pw");
        t = gelu(batchnorm_infer(conv2d(x, pw.conv), pw.bn));
    } else {
        t = gelu(conv2d(x, expect_fused(p.pw_fused, "root.pw")));
    }
    for (const RepBlockParams& d : p.down) t = repblock_forward(t, d, form);
    return repblock_forward(t, p.mix, form);
}

Tensor stage_forward(const Tensor& x, LstmState& state, const StageParams& p,
                     ModelForm form, TapRecorder* taps, const std::string& prefix) {
    Tensor t = root_module_forward(x, p.root, form);
    if (taps) taps->add(prefix + ".root", t);
    for (std::size_t j = 0; j < p.blocks.size(); ++j) {
        t = emf_block_forward(t, p.blocks[j], form);
        if (taps) taps->add(prefix + ".block" + std::to_string(j + 1), t);
    }
    if (!state.empty() && state.h.shape() != t.shape())
        throw StateError("stage state shaped " + state.h.shape_str() +
                         " is stale for features " + t.shape_str() +
                         "; reset the sequence state");
    Tensor out = pixel_lstm_step(t, state, p.lstm.wx, p.lstm.wh);
    if (taps) taps->add(prefix + ".out", out);
    return out;
}

std::vector<Tensor> backbone_forward(const Tensor& x, LstmStateSet& states,
                                     const Model& m, TapRecorder* taps) {
    if (x.rank() != 3 || x.dim(0) != m.config.input_channels)
        throw ShapeError("backbone_forward: input " + x.shape_str() + " does not carry " +
                         std::to_string(m.config.input_channels) + " channels");
    if (states.stages.size() != m.stages.size())
        throw StateError("backbone_forward: state set has " +
                         std::to_string(states.stages.size()) + " entries for " +
                         std::to_string(m.stages.size()) + " stages");
    Tensor t = epe_forward(x, m.epe, m.form);
    if (taps) taps->add("epe", t);
    std::vector<Tensor> pyramid;
    pyramid.reserve(m.stages.size());
    for (std::size_t i = 0; i < m.stages.size(); ++i) {
        t = stage_forward(t, states.stages[i], m.stages[i], m.form, taps,
                          "stage" + std::to_string(i + 1));
        pyramid.push_back(t);
    }
    return pyramid;
}

RawPrediction model_forward(const Tensor& x, LstmStateSet& states, const Model& m,
                            TapRecorder* taps) {
    const std::vector<Tensor> pyramid = backbone_forward(x, states, m, taps);
    std::vector<Tensor> features;
    features.reserve(m.config.detection_levels.size());
    for (int l : m.config.detection_levels) features.push_back(pyramid[l - 1]);
    const std::vector<Tensor> fpn = fpn_forward(features, m.head);
    if (taps)
        for (std::size_t i = 0; i < fpn.size(); ++i)
            taps->add("fpn.l" + std::to_string(m.config.detection_levels[i]), fpn[i]);
    RawPrediction raw = head_forward(fpn, m.config.head_config(), m.head);
    if (taps) {
        for (std::size_t i = 0; i < raw.levels.size(); ++i) {
            const std::string l = "head.l" + std::to_string(m.config.detection_levels[i]);
            taps->add(l + ".cls", raw.levels[i].cls);
            taps->add(l + ".reg", raw.levels[i].reg);
            taps->add(l + ".obj", raw.levels[i].obj);
        }
    }
    return raw;
}

Model build_model_skeleton(const ModelConfig& cfg, ModelForm form) {
    cfg.validate();
    Model m;
    m.config = cfg;
    m.form = form;

    if (form == ModelForm::train)
        m.epe.pw = make_conv_bn(cfg.epe_channels, cfg.input_channels, 1, 1, 1);
    else
        m.epe.fused = make_conv(cfg.epe_channels, cfg.input_channels, 1, 1, 1);

    int in_ch = cfg.epe_channels;
    for (int i = 0; i < 4; ++i) {
        const int out_ch = cfg.stage_channels[static_cast<std::size_t>(i)];
        StageParams s;
        if (form == ModelForm::train)
            s.root.pw = make_conv_bn(out_ch, in_ch, 1, 1, 1);
        else
            s.root.pw_fused = make_conv(out_ch, in_ch, 1, 1, 1);
        const int down_count = i == 0 ? 2 : 1;
        for (int d = 0; d < down_count; ++d)
            s.root.down.push_back(make_repblock(out_ch, cfg.large_kernel, 2, out_ch, form));
        s.root.mix = make_repblock(out_ch, 1, 1, 1, form);

        for (int j = 0; j < cfg.blocks_per_stage; ++j) {
            EmfBlockParams b;
            if (form == ModelForm::train) {
                b.mixer.dw = make_conv_bn(out_ch, out_ch, cfg.mixer_kernel, 1, out_ch);
                b.ffn.dw = make_conv_bn(out_ch, out_ch, cfg.ffn_kernel, 1, out_ch);
            } else {
                b.mixer.fused = make_conv(out_ch, out_ch, cfg.mixer_kernel, 1, out_ch);
                b.ffn.dw_fused = make_conv(out_ch, out_ch, cfg.ffn_kernel, 1, out_ch);
            }
            const int hidden = cfg.ffn_expansion * out_ch;
            b.ffn.expand = make_conv(hidden, out_ch, 1, 1, 1);
            b.ffn.project = make_conv(out_ch, hidden, 1, 1, 1);
            s.blocks.push_back(std::move(b));
        }

        s.lstm.wx = make_conv(4 * out_ch, out_ch, 1, 1, 1);
        s.lstm.wh = make_conv(4 * out_ch, out_ch, 1, 1, 1);
        m.stages.push_back(std::move(s));
        in_ch = out_ch;
    }

    for (int l : cfg.detection_levels) {
        m.head.lateral.push_back(
            make_conv(cfg.head_width, cfg.stage_channels[static_cast<std::size_t>(l - 1)], 1, 1, 1));
        m.head.smooth.push_back(make_conv(cfg.head_width, cfg.head_width, 3, 1, 1));
    }
    m.head.stem = make_conv(cfg.head_width, cfg.head_width, 1, 1, 1);
    m.head.cls1 = make_conv(cfg.head_width, cfg.head_width, 3, 1, 1);
    m.head.cls2 = make_conv(cfg.head_width, cfg.head_width, 3, 1, 1);
    m.head.cls_out = make_conv(cfg.num_classes, cfg.head_width, 1, 1, 1);
    m.head.reg1 = make_conv(cfg.head_width, cfg.head_width, 3, 1, 1);
    m.head.reg2 = make_conv(cfg.head_width, cfg.head_width, 3, 1, 1);
    m.head.reg_out = make_conv(4, cfg.head_width, 1, 1, 1);
    m.head.obj_out = make_conv(1, cfg.head_width, 1, 1, 1);
    return m;
}

std::vector<ParamView> parameter_views(Model& m) {
    ViewCollector c;
    if (m.epe.fused)
        c.conv("epe.pw", *m.epe.fused);
    else if (m.epe.pw)
        c.conv_bn("epe.pw", *m.epe.pw);

    for (std::size_t i = 0; i < m.stages.size(); ++i) {
        const std::string sp = "stage" + std::to_string(i + 1);
        StageParams& s = m.stages[i];
        if (s.root.pw_fused)
            c.conv(sp + ".root.pw", *s.root.pw_fused);
        else if (s.root.pw)
            c.conv_bn(sp + ".root.pw", *s.root.pw);
        for (std::size_t d = 0; d < s.root.down.size(); ++d)
            c.repblock(sp + ".root.down" + std::to_string(d + 1), s.root.down[d]);
        c.repblock(sp + ".root.mix", s.root.mix);
        for (std::size_t j = 0; j < s.blocks.size(); ++j) {
            const std::string bp = sp + ".block" + std::to_string(j + 1);
            EmfBlockParams& b = s.blocks[j];
            if (b.mixer.fused)
                c.conv(bp + ".mixer", *b.mixer.fused);
            else if (b.mixer.dw)
                c.conv_bn(bp + ".mixer.dw", *b.mixer.dw);
            if (b.ffn.dw_fused)
                c.conv(bp + ".ffn.dw", *b.ffn.dw_fused);
            else if (b.ffn.dw)
                c.conv_bn(bp + ".ffn.dw", *b.ffn.dw);
            c.conv(bp + ".ffn.expand", b.ffn.expand);
            c.conv(bp + ".ffn.project", b.ffn.project);
        }
        c.tensor(sp + ".lstm.wx.w", s.lstm.wx.weight);
        c.vec(sp + ".lstm.b", s.lstm.wx.bias);
        c.tensor(sp + ".lstm.wh.w", s.lstm.wh.weight);
    }

    for (std::size_t i = 0; i < m.head.lateral.size(); ++i) {
        const std::string l = std::to_string(m.config.detection_levels[i]);
        c.conv("head.fpn.lateral" + l, m.head.lateral[i]);
        c.conv("head.fpn.smooth" + l, m.head.smooth[i]);
    }
    c.conv("head.stem", m.head.stem);
    c.conv("head.cls1", m.head.cls1);
    c.conv("head.cls2", m.head.cls2);
    c.conv("head.cls_out", m.head.cls_out);
    c.conv("head.reg1", m.head.reg1);
    c.conv("head.reg2", m.head.reg2);
    c.conv("head.reg_out", m.head.reg_out);
    c.conv("head.obj_out", m.head.obj_out);
    return std::move(c.views);
}

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    Model m = build_model_skeleton(cfg, ModelForm::train);
    for (ParamView& v : parameter_views(m)) {
        if (ends_with(v.name, ".bn.gamma") || ends_with(v.name, ".bn.var")) {
            std::fill_n(v.data, v.count, 1.0f);
        } else if (ends_with(v.name, ".bn.beta") || ends_with(v.name, ".bn.mean")) {
            std::fill_n(v.data, v.count, 0.0f);
        } else if (ends_with(v.name, ".lstm.b")) {
            std::fill_n(v.data, v.count, 0.0f);
            const std::size_t c = v.count / 4;  // [i, f, g, o]: forget bias 1
            std::fill_n(v.data + c, c, 1.0f);
        } else if (ends_with(v.name, ".w")) {
            std::size_t fan_in = 1;
            for (std::size_t d = 1; d < v.shape.size(); ++d)
                fan_in *= static_cast<std::size_t>(v.shape[d]);
            const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
            std::uint64_t state =
                fnv1a64(v.name) ^ (seed * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull);
            for (std::size_t k = 0; k < v.count; ++k)
                v.data[k] = next_uniform(state, bound);
        } else {
            std::fill_n(v.data, v.count, 0.0f);  // plain biases
        }
    }
    return m;
}

std::size_t parameter_count(const Model& m) {
    std::size_t n = 0;
    for (const ParamView& v : parameter_views(const_cast<Model&>(m))) n += v.count;
    return n;
}

std::uint64_t parameter_checksum(const Model& m) {
    std::uint64_t h = 1469598103934665603ull;
    for (const ParamView& v : parameter_views(const_cast<Model&>(m))) {
        const unsigned char* bytes = reinterpret_cast<const unsigned char*>(v.data);
        for (std::size_t i = 0; i < v.count * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

void LstmStateSet::reset() {
    for (LstmState& s : stages) {
        std::fill(s.h.values().begin(), s.h.values().end(), 0.0f);
        std::fill(s.c.values().begin(), s.c.values().end(), 0.0f);
    }
}

void reset_states(std::vector<LstmStateSet>& sets, const std::vector<bool>& mask) {
    if (sets.size() != mask.size())
        throw ArgumentError("reset_states: mask length " + std::to_string(mask.size()) +
                            " != state sets " + std::to_string(sets.size()));
    for (std::size_t i = 0; i < sets.size(); ++i)
        if (mask[i]) sets[i].reset();
}

std::vector<std::uint8_t> LstmStateSet::serialize() const {
    std::vector<std::uint8_t> out;
    auto put_u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
    };
    auto put_tensor = [&](const Tensor& t) {
        for (float f : t.values()) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(bits);
        }
    };
    put_u32(static_cast<std::uint32_t>(stages.size()));
    for (const LstmState& s : stages) {
        if (s.empty()) {
            put_u32(0);
            put_u32(0);
            put_u32(0);
        } else {
            put_u32(static_cast<std::uint32_t>(s.h.dim(0)));
            put_u32(static_cast<std::uint32_t>(s.h.dim(1)));
            put_u32(static_cast<std::uint32_t>(s.h.dim(2)));
            put_tensor(s.h);
            put_tensor(s.c);
        }
    }
    return out;
}

LstmStateSet LstmStateSet::deserialize(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto get_u32 = [&]() -> std::uint32_t {
        if (pos + 4 > bytes.size()) throw FormatError("LstmStateSet: truncated state blob");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
        pos += 4;
        return v;
    };
    auto get_tensor = [&](int c, int h, int w) {
        Tensor t({c, h, w});
        for (std::size_t i = 0; i < t.size(); ++i) {
            const std::uint32_t bits = get_u32();
            std::memcpy(t.data() + i, &bits, 4);
        }
        return t;
    };
    LstmStateSet set;
    set.stages.assign(get_u32(), LstmState{});
    for (LstmState& s : set.stages) {
        const int c = static_cast<int>(get_u32());
        const int h = static_cast<int>(get_u32());
        const int w = static_cast<int>(get_u32());
        if (c == 0) continue;
        s.h = get_tensor(c, h, w);
        s.c = get_tensor(c, h, w);
    }
    if (pos != bytes.size()) throw FormatError("LstmStateSet: trailing bytes in state blob");
    return set;
}

}  // namespace emf
