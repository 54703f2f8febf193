#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "emf/error.hpp"

namespace emf {

/// Dense row-major float32 tensor of rank 1..4. Rank-3 tensors follow
/// (C, H, W) semantics throughout the library.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        std::size_t n = 1;
        for (int d : shape_) {
            if (d <= 0) throw ShapeError("Tensor: non-positive dimension " + std::to_string(d));
            n *= static_cast<std::size_t>(d);
        }
        data_.assign(n, 0.0f);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& values() { return data_; }
    const std::vector<float>& values() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    // (C, H, W) accessors
    float& at(int c, int y, int x) {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    float at(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    // (N, C, H, W) accessors
    float& at(int n, int c, int y, int x) {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    float at(int n, int c, int y, int x) const {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

/// 2-D convolution parameters. Weight layout (C_out, C_in/groups, k_h, k_w).
struct ConvParams {
    Tensor weight;
    std::vector<float> bias;  // length C_out
    int stride = 1;
    int pad = 0;
    int groups = 1;

    int out_channels() const { return weight.dim(0); }
    int in_channels() const { return weight.dim(1) * groups; }
    int kernel_h() const { return weight.dim(2); }
    int kernel_w() const { return weight.dim(3); }
};

/// Inference-time batch-norm parameters, all vectors of length C.
struct BnParams {
    std::vector<float> gamma;
    std::vector<float> beta;
    std::vector<float> mean;
    std::vector<float> var;
    float eps = 1e-5f;

    int channels() const { return static_cast<int>(gamma.size()); }

    /// gamma=1, beta=0, mean=0, var=1: batchnorm_infer becomes (nearly) the
    /// identity up to eps.
    static BnParams identity(int c, float eps = 1e-5f) {
        BnParams bn;
        bn.gamma.assign(c, 1.0f);
        bn.beta.assign(c, 0.0f);
        bn.mean.assign(c, 0.0f);
        bn.var.assign(c, 1.0f);
        bn.eps = eps;
        return bn;
    }
};

/// Recurrent state of one per-pixel LSTM: hidden and cell tensors (C, H, W).
struct LstmState {
    Tensor h;
    Tensor c;

    bool empty() const { return h.empty(); }
    static LstmState zero(int channels, int height, int width) {
        LstmState s;
        s.h = Tensor({channels, height, width});
        s.c = Tensor({channels, height, width});
        return s;
    }
};

/// Output spatial extent of a convolution along one axis.
inline int conv_out_extent(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

/// Grouped 2-D cross-correlation over a (C_in, H, W) tensor.
///
/// Accumulation per output element starts from the bias and proceeds in
/// kernel-major order (input channel within group, then k_y, then k_x), so
/// repeated runs are bit-identical and any internal data parallelism across
/// output elements cannot change results.
Tensor conv2d(const Tensor& input, const ConvParams& p);

/// Per-channel inference batch norm: gamma * (x - mean) / sqrt(var + eps) + beta.
Tensor batchnorm_infer(const Tensor& input, const BnParams& bn);

/// Elementwise GELU, tanh approximation:
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& input);
float gelu_scalar(float x);

/// Nearest-neighbour 2x upsampling: (C, H, W) -> (C, 2H, 2W).
Tensor nearest_upsample2x(const Tensor& input);

/// One step of the per-pixel LSTM. Gate convolutions are 1x1 producing 4C
/// channels ([i, f, g, o] stacked) from the input and the hidden state:
///   c' = sigmoid(f) * c + sigmoid(i) * tanh(g),  h' = sigmoid(o) * tanh(c').
/// The same cell runs independently at every pixel with shared weights.
/// Returns h'; `state` is updated in place to {h', c'}.
Tensor pixel_lstm_step(const Tensor& x, LstmState& state,
                       const ConvParams& wx, const ConvParams& wh);

/// Numerically stable logistic function.
inline float sigmoidf(float x) {
    if (x >= 0.0f) {
        float e = std::exp(-x);
        return 1.0f / (1.0f + e);
    }
    float e = std::exp(x);
    return e / (1.0f + e);
}

/// Number of conv2d invocations since process start (or the last reset).
/// Used to compare structural cost between model forms.
std::uint64_t conv_call_count();
void reset_conv_call_count();

}  // namespace emf
