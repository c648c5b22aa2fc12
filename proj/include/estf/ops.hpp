#pragma once

// Differentiable primitives. Every forward has a hand-derived backward that
// maps the upstream gradient (same shape as the forward output) to gradients
// of each input. All functions are pure.

#include <string_view>
#include <vector>

#include "estf/tensor.hpp"

namespace estf {

// ---- linear algebra ----

/// a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
struct MatmulGrads {
    Tensor da, db;
};
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout);

Tensor transpose(const Tensor& x);

// ---- normalisation ----

/// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& x);
/// Takes the forward *output* y.
Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy);

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    Tensor xhat;               // normalised rows before the affine
    std::vector<double> rstd;  // 1/sqrt(var+eps) per row
};
struct LayerNormResult {
    Tensor y;
    LayerNormCache cache;
};
/// Per row of x[tokens×d]: (x-mean)/sqrt(var+eps)*gamma + beta.
LayerNormResult layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);
struct LayerNormGrads {
    Tensor dx, dgamma, dbeta;
};
LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma, const Tensor& dy);

// ---- convolution ----

/// Cross-correlation of x[C_in×H×W] with weight[C_out×C_in×kh×kw].
Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding);
struct Conv2dGrads {
    Tensor dx, dweight;
};
Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dout, std::size_t stride,
                            std::size_t padding);

// ---- elementwise and broadcasting ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);

/// x[n×d] + b[d] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// Column sums of dout, i.e. the gradient of the broadcast bias.
Tensor add_row_bias_backward(const Tensor& dout);

/// x[C×...] * gamma[c] + beta[c] per leading-axis channel.
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);
struct ChannelAffineGrads {
    Tensor dx, dgamma, dbeta;
};
ChannelAffineGrads channel_affine_backward(const Tensor& x, const Tensor& gamma, const Tensor& dout);

enum class Activation { relu, gelu };
Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dout);
/// Exact erf form.
Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& dout);
Tensor activate(Activation a, const Tensor& x);
Tensor activate_backward(Activation a, const Tensor& x, const Tensor& dout);

// ---- shape manipulation and reductions ----

Tensor reshape(const Tensor& x, Shape shape);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Inverse of concat: cuts x along `axis` into pieces of the given extents.
std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes);

/// Removes `axis`.
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);
/// Repeats dout along a re-inserted `axis` to recover `input_shape`.
Tensor sum_axis_backward(const Tensor& dout, const Shape& input_shape, std::size_t axis);
Tensor mean_axis_backward(const Tensor& dout, const Shape& input_shape, std::size_t axis);

}  // namespace estf
