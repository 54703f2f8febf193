#include "emf/tensor.hpp"

#include <atomic>
#include <cstring>

namespace emf {

namespace {

std::atomic<std::uint64_t> g_conv_calls{0};

constexpr int kMB = 4;   // output-channel tile
constexpr int kNB = 64;  // output-pixel tile

// out[m][n] = bias[m] + sum_k A[m][k] * X[k][n], k strictly ascending per
// element. The tile accumulators live in registers; lanes across n are
// independent chains, so vectorization cannot reorder any per-element sum.
void gemm_tile_full(const float* a, const float* bias, const float* x,
                    float* out, int k_len, int n_total, int m0, int n0) {
    float acc[kMB][kNB];
    for (int m = 0; m < kMB; ++m)
        for (int n = 0; n < kNB; ++n) acc[m][n] = bias[m0 + m];
    for (int k = 0; k < k_len; ++k) {
        const float* xr = x + static_cast<std::size_t>(k) * n_total + n0;
        for (int m = 0; m < kMB; ++m) {
            const float am = a[static_cast<std::size_t>(m0 + m) * k_len + k];
            for (int n = 0; n < kNB; ++n) acc[m][n] += am * xr[n];
        }
    }
    for (int m = 0; m < kMB; ++m)
        std::memcpy(out + static_cast<std::size_t>(m0 + m) * n_total + n0, acc[m],
                    sizeof(float) * kNB);
}

void gemm_tile_edge(const float* a, const float* bias, const float* x,
                    float* out, int k_len, int n_total, int m0, int n0,
                    int mb, int nb) {
    float acc[kMB][kNB];
    for (int m = 0; m < mb; ++m)
        for (int n = 0; n < nb; ++n) acc[m][n] = bias[m0 + m];
    for (int k = 0; k < k_len; ++k) {
        const float* xr = x + static_cast<std::size_t>(k) * n_total + n0;
        for (int m = 0; m < mb; ++m) {
            const float am = a[static_cast<std::size_t>(m0 + m) * k_len + k];
            for (int n = 0; n < nb; ++n) acc[m][n] += am * xr[n];
        }
    }
    for (int m = 0; m < mb; ++m)
        std::memcpy(out + static_cast<std::size_t>(m0 + m) * n_total + n0, acc[m],
                    sizeof(float) * nb);
}

// C[M x N] = A[M x K] * X[K x N] + bias, row-major. n-tiles outer so the
// K x kNB slab of X stays cache-hot across the m sweep.
void gemm_ordered(const float* a, const float* bias, const float* x,
                  float* out, int m_total, int k_len, int n_total) {
    for (int n0 = 0; n0 < n_total; n0 += kNB) {
        const int nb = std::min(kNB, n_total - n0);
        int m0 = 0;
        if (nb == kNB) {
            for (; m0 + kMB <= m_total; m0 += kMB)
                gemm_tile_full(a, bias, x, out, k_len, n_total, m0, n0);
        }
        for (; m0 < m_total; m0 += kMB) {
            gemm_tile_edge(a, bias, x, out, k_len, n_total, m0, n0,
                           std::min(kMB, m_total - m0), nb);
        }
    }
}

// Lowers one channel group to a (cg*kh*kw) x (Ho*Wo) matrix whose row index
// runs kernel-major: r = (ci*kh + ky)*kw + kx. Out-of-bounds taps become 0.
void im2col(const float* in, int cg, int h, int w, int kh, int kw, int stride,
            int pad, int ho, int wo, float* col) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t n = static_cast<std::size_t>(ho) * wo;
    for (int ci = 0; ci < cg; ++ci) {
        const float* src = in + ci * plane;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                float* dst = col + ((static_cast<std::size_t>(ci) * kh + ky) * kw + kx) * n;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    float* row = dst + static_cast<std::size_t>(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        std::memset(row, 0, sizeof(float) * wo);
                        continue;
                    }
                    const float* srow = src + static_cast<std::size_t>(iy) * w;
                    if (stride == 1) {
                        const int x_lo = std::max(0, pad - kx);
                        const int x_hi = std::min(wo, w + pad - kx);
                        for (int ox = 0; ox < x_lo; ++ox) row[ox] = 0.0f;
                        if (x_hi > x_lo)
                            std::memcpy(row + x_lo, srow + x_lo - pad + kx,
                                        sizeof(float) * (x_hi - x_lo));
                        for (int ox = std::max(x_hi, x_lo); ox < wo; ++ox) row[ox] = 0.0f;
                    } else {
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            row[ox] = (ix < 0 || ix >= w) ? 0.0f : srow[ix];
                        }
                    }
                }
            }
        }
    }
}

// Depthwise fast path: per-element accumulation order (ky, kx), vectorizable
// across ox because each output keeps its own accumulator.
void conv_depthwise(const Tensor& input, const ConvParams& p, Tensor& out) {
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int kh = p.kernel_h(), kw = p.kernel_w();
    const int ho = out.dim(1), wo = out.dim(2);
    std::vector<float> row(static_cast<std::size_t>(wo));
    for (int ch = 0; ch < c; ++ch) {
        const float* src = input.data() + static_cast<std::size_t>(ch) * h * w;
        const float* wt = p.weight.data() + static_cast<std::size_t>(ch) * kh * kw;
        float* dst = out.data() + static_cast<std::size_t>(ch) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
            std::fill(row.begin(), row.end(), p.bias[ch]);
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * p.stride - p.pad + ky;
                if (iy < 0 || iy >= h) continue;
                const float* srow = src + static_cast<std::size_t>(iy) * w;
                for (int kx = 0; kx < kw; ++kx) {
                    const float wv = wt[ky * kw + kx];
                    const int base = kx - p.pad;
                    if (p.stride == 1) {
                        const int x_lo = std::max(0, -base);
                        const int x_hi = std::min(wo, w - base);
                        for (int ox = x_lo; ox < x_hi; ++ox)
                            row[ox] += wv * srow[ox + base];
                    } else {
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * p.stride + base;
                            if (ix >= 0 && ix < w) row[ox] += wv * srow[ix];
                        }
                    }
                }
            }
            std::memcpy(dst + static_cast<std::size_t>(oy) * wo, row.data(),
                        sizeof(float) * wo);
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const ConvParams& p) {
    g_conv_calls.fetch_add(1, std::memory_order_relaxed);
    if (input.rank() != 3)
        throw ShapeError("conv2d: expected rank-3 input, got " + input.shape_str());
    if (p.weight.rank() != 4)
        throw ShapeError("conv2d: expected rank-4 weight, got " + p.weight.shape_str());
    const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int c_out = p.out_channels();
    if (p.groups < 1 || c_in % p.groups != 0 || c_out % p.groups != 0)
        throw ShapeError("conv2d: channels not divisible by groups (in " +
                         input.shape_str() + ", weight " + p.weight.shape_str() +
                         ", groups " + std::to_string(p.groups) + ")");
    if (p.weight.dim(1) != c_in / p.groups)
        throw ShapeError("conv2d: weight " + p.weight.shape_str() +
                         " incompatible with input " + input.shape_str() +
                         " at groups " + std::to_string(p.groups));
    if (static_cast<int>(p.bias.size()) != c_out)
        throw ShapeError("conv2d: bias length " + std::to_string(p.bias.size()) +
                         " != C_out " + std::to_string(c_out));
    if (p.stride < 1 || p.pad < 0)
        throw ShapeError("conv2d: invalid stride/pad");
    const int kh = p.kernel_h(), kw = p.kernel_w();
    const int ho = conv_out_extent(h, kh, p.stride, p.pad);
    const int wo = conv_out_extent(w, kw, p.stride, p.pad);
    if (ho <= 0 || wo <= 0)
        throw ShapeError("conv2d: kernel " + p.weight.shape_str() +
                         " does not fit input " + input.shape_str());

    Tensor out({c_out, ho, wo});

    if (p.groups == c_in && p.weight.dim(1) == 1 && c_out == c_in) {
        conv_depthwise(input, p, out);
        return out;
    }

    const std::size_t n = static_cast<std::size_t>(ho) * wo;
    const int cg = c_in / p.groups;
    const int og = c_out / p.groups;
    const int k_len = cg * kh * kw;

    const bool pointwise = (kh == 1 && kw == 1 && p.stride == 1 && p.pad == 0);
    std::vector<float> col;
    if (!pointwise) col.resize(static_cast<std::size_t>(k_len) * n);

    for (int g = 0; g < p.groups; ++g) {
        const float* in_g = input.data() + static_cast<std::size_t>(g) * cg * h * w;
        const float* x = in_g;
        if (!pointwise) {
            im2col(in_g, cg, h, w, kh, kw, p.stride, p.pad, ho, wo, col.data());
            x = col.data();
        }
        gemm_ordered(p.weight.data() + static_cast<std::size_t>(g) * og * k_len,
                     p.bias.data() + static_cast<std::size_t>(g) * og, x,
                     out.data() + static_cast<std::size_t>(g) * og * n, og, k_len,
                     static_cast<int>(n));
    }
    return out;
}

Tensor batchnorm_infer(const Tensor& input, const BnParams& bn) {
    if (input.rank() != 3)
        throw ShapeError("batchnorm_infer: expected rank-3 input, got " + input.shape_str());
    const int c = input.dim(0);
    if (bn.channels() != c || bn.beta.size() != bn.gamma.size() ||
        bn.mean.size() != bn.gamma.size() || bn.var.size() != bn.gamma.size())
        throw ShapeError("batchnorm_infer: parameter length " +
                         std::to_string(bn.channels()) + " != channels " +
                         std::to_string(c));
    const std::size_t plane = static_cast<std::size_t>(input.dim(1)) * input.dim(2);
    Tensor out(input.shape());
    for (int ch = 0; ch < c; ++ch) {
        const float inv = 1.0f / std::sqrt(bn.var[ch] + bn.eps);
        const float g = bn.gamma[ch], b = bn.beta[ch], m = bn.mean[ch];
        const float* src = input.data() + ch * plane;
        float* dst = out.data() + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = g * ((src[i] - m) * inv) + b;
    }
    return out;
}

float gelu_scalar(float x) {
    constexpr float kSqrt2OverPi = 0.7978845608028654f;
    constexpr float kCubic = 0.044715f;
    return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + kCubic * x * x * x)));
}

Tensor gelu(const Tensor& input) {
    Tensor out(input.shape());
    const float* src = input.data();
    float* dst = out.data();
    for (std::size_t i = 0; i < input.size(); ++i) dst[i] = gelu_scalar(src[i]);
    return out;
}

Tensor nearest_upsample2x(const Tensor& input) {
    if (input.rank() != 3)
        throw ShapeError("nearest_upsample2x: expected rank-3 input, got " + input.shape_str());
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            const float* src = input.data() + (static_cast<std::size_t>(ch) * h + y) * w;
            float* d0 = out.data() + (static_cast<std::size_t>(ch) * 2 * h + 2 * y) * 2 * w;
            float* d1 = d0 + 2 * w;
            for (int x = 0; x < w; ++x) {
                d0[2 * x] = src[x];
                d0[2 * x + 1] = src[x];
                d1[2 * x] = src[x];
                d1[2 * x + 1] = src[x];
            }
        }
    }
    return out;
}

Tensor pixel_lstm_step(const Tensor& x, LstmState& state,
                       const ConvParams& wx, const ConvParams& wh) {
    if (x.rank() != 3)
        throw ShapeError("pixel_lstm_step: expected rank-3 input, got " + x.shape_str());
    if (wx.kernel_h() != 1 || wx.kernel_w() != 1 || wh.kernel_h() != 1 || wh.kernel_w() != 1)
        throw ShapeError("pixel_lstm_step: gate convolutions must be 1x1");
    const int gates = wx.out_channels();
    if (gates % 4 != 0 || wh.out_channels() != gates)
        throw ShapeError("pixel_lstm_step: gate convs must both produce 4C channels");
    const int c = gates / 4;
    if (wh.in_channels() != c)
        throw ShapeError("pixel_lstm_step: hidden gate conv expects " + std::to_string(c) +
                         " input channels, has " + std::to_string(wh.in_channels()));
    const int h = x.dim(1), w = x.dim(2);
    if (state.empty()) state = LstmState::zero(c, h, w);
    if (!state.h.same_shape(state.c) || state.h.shape() != std::vector<int>{c, h, w})
        throw ShapeError("pixel_lstm_step: state shape " + state.h.shape_str() +
                         " does not match required (" + std::to_string(c) + "," +
                         std::to_string(h) + "," + std::to_string(w) +
                         "); reset the state");

    const Tensor gx = conv2d(x, wx);
    const Tensor gh = conv2d(state.h, wh);

    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor h_next({c, h, w});
    Tensor c_next({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
        const float* gi = gx.data() + static_cast<std::size_t>(ch) * plane;
        const float* gf = gx.data() + static_cast<std::size_t>(c + ch) * plane;
        const float* gg = gx.data() + static_cast<std::size_t>(2 * c + ch) * plane;
        const float* go = gx.data() + static_cast<std::size_t>(3 * c + ch) * plane;
        const float* hi = gh.data() + static_cast<std::size_t>(ch) * plane;
        const float* hf = gh.data() + static_cast<std::size_t>(c + ch) * plane;
        const float* hg = gh.data() + static_cast<std::size_t>(2 * c + ch) * plane;
        const float* ho = gh.data() + static_cast<std::size_t>(3 * c + ch) * plane;
        const float* cc = state.c.data() + static_cast<std::size_t>(ch) * plane;
        float* hn = h_next.data() + static_cast<std::size_t>(ch) * plane;
        float* cn = c_next.data() + static_cast<std::size_t>(ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            const float ig = sigmoidf(gi[i] + hi[i]);
            const float fg = sigmoidf(gf[i] + hf[i]);
            const float gg_v = std::tanh(gg[i] + hg[i]);
            const float og = sigmoidf(go[i] + ho[i]);
            const float cv = fg * cc[i] + ig * gg_v;
            cn[i] = cv;
            hn[i] = og * std::tanh(cv);
        }
    }
    state.h = h_next;
    state.c = std::move(c_next);
    return h_next;
}

std::uint64_t conv_call_count() { return g_conv_calls.load(std::memory_order_relaxed); }
void reset_conv_call_count() { g_conv_calls.store(0, std::memory_order_relaxed); }

}  // namespace emf
