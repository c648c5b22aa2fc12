#include "estf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "estf/kernels.hpp"

namespace estf {

namespace {

void require_matrix(const Tensor& t, const char* what) { require_rank(t, 2, what); }

// outer × axis × inner decomposition of a shape around `axis`.
struct AxisView {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    v.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != axis) out.push_back(shape[i]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " · " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    kernels::parallel::matmul(a.data(), b.data(), c.data(), m, k, n);
    return c;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (dout.shape() != Shape{m, n}) {
        throw DimensionError("matmul_backward: upstream " + shape_str(dout.shape()) + " vs output [" +
                             std::to_string(m) + "x" + std::to_string(n) + "]");
    }
    MatmulGrads g{Tensor({m, k}), Tensor({k, n})};
    kernels::parallel::matmul_nt(dout.data(), b.data(), g.da.data(), m, n, k);
    kernels::parallel::matmul_tn(a.data(), dout.data(), g.db.data(), k, m, n);
    return g;
}

Tensor transpose(const Tensor& x) {
    require_matrix(x, "transpose");
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor y({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
    }
    return y;
}

Tensor softmax_rows(const Tensor& x) {
    require_matrix(x, "softmax_rows");
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor y(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const double* in = x.data().data() + i * c;
        double* out = y.data().data() + i * c;
        const double mx = *std::max_element(in, in + c);
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out[j] = std::exp(in[j] - mx);
            total += out[j];
        }
        for (std::size_t j = 0; j < c; ++j) out[j] /= total;
    }
    return y;
}

Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy) {
    require_same_shape(y, dy, "softmax_rows_backward");
    const std::size_t r = y.dim(0), c = y.dim(1);
    Tensor dx(y.shape());
    for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * dy[i * c + j];
        for (std::size_t j = 0; j < c; ++j) dx[i * c + j] = y[i * c + j] * (dy[i * c + j] - dot);
    }
    return dx;
}

LayerNormResult layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_matrix(x, "layer_norm");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (gamma.size() != d || beta.size() != d) {
        throw DimensionError("layer_norm: gamma/beta length must equal width " + std::to_string(d));
    }
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    LayerNormResult r{Tensor(x.shape()), {Tensor(x.shape()), std::vector<double>(rows)}};
    for (std::size_t i = 0; i < rows; ++i) {
        const double* in = x.data().data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        r.cache.rstd[i] = rstd;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (in[j] - mean) * rstd;
            r.cache.xhat[i * d + j] = xh;
            r.y[i * d + j] = xh * gamma[j] + beta[j];
        }
    }
    return r;
}

LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma, const Tensor& dy) {
    require_same_shape(cache.xhat, dy, "layer_norm_backward");
    const std::size_t rows = dy.dim(0), d = dy.dim(1);
    LayerNormGrads g{Tensor(dy.shape()), Tensor({d}), Tensor({d})};
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < rows; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double gy = dy[i * d + j];
            const double xh = cache.xhat[i * d + j];
            g.dgamma[j] += gy * xh;
            g.dbeta[j] += gy;
            dxhat[j] = gy * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh;
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            g.dx[i * d + j] =
                cache.rstd[i] * (dxhat[j] - mean_dxhat - cache.xhat[i * d + j] * mean_dxhat_xhat);
        }
    }
    return g;
}

namespace {

kernels::ConvGeometry conv_geometry(const Tensor& x, const Tensor& weight, std::size_t stride,
                                    std::size_t padding) {
    require_rank(x, 3, "conv2d input");
    require_rank(weight, 4, "conv2d weight");
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    if (weight.dim(1) != x.dim(0)) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " expects " +
                             std::to_string(weight.dim(1)) + " input channels, input is " + shape_str(x.shape()));
    }
    kernels::ConvGeometry g;
    g.in_channels = x.dim(0);
    g.height = x.dim(1);
    g.width = x.dim(2);
    g.out_channels = weight.dim(0);
    g.kernel_h = weight.dim(2);
    g.kernel_w = weight.dim(3);
    g.stride = stride;
    g.padding = padding;
    if (g.kernel_h > g.height + 2 * padding || g.kernel_w > g.width + 2 * padding) {
        throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                             shape_str(x.shape()) + " with padding " + std::to_string(padding));
    }
    return g;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding) {
    const auto g = conv_geometry(x, weight, stride, padding);
    Tensor y({g.out_channels, g.out_height(), g.out_width()});
    kernels::parallel::conv2d_forward(x.data(), weight.data(), y.data(), g);
    return y;
}

Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dout, std::size_t stride,
                            std::size_t padding) {
    const auto g = conv_geometry(x, weight, stride, padding);
    if (dout.shape() != Shape{g.out_channels, g.out_height(), g.out_width()}) {
        throw DimensionError("conv2d_backward: upstream shape " + shape_str(dout.shape()));
    }
    Conv2dGrads grads{Tensor(x.shape()), Tensor(weight.shape())};
    kernels::parallel::conv2d_backward_input(dout.data(), weight.data(), grads.dx.data(), g);
    kernels::parallel::conv2d_backward_weight(x.data(), dout.data(), grads.dweight.data(), g);
    return grads;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    return y;
}

Tensor scale(const Tensor& x, double s) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * s;
    return y;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    require_matrix(x, "add_row_bias");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (bias.size() != d) {
        throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs rows of width " +
                             std::to_string(d));
    }
    Tensor y(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] + bias[j];
    }
    return y;
}

Tensor add_row_bias_backward(const Tensor& dout) {
    require_matrix(dout, "add_row_bias_backward");
    const std::size_t n = dout.dim(0), d = dout.dim(1);
    Tensor db({d});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) db[j] += dout[i * d + j];
    }
    return db;
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const std::size_t c = x.dim(0);
    if (gamma.size() != c || beta.size() != c) {
        throw DimensionError("channel_affine: gamma/beta length must equal channel count " + std::to_string(c));
    }
    const std::size_t plane = x.size() / c;
    Tensor y(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < plane; ++i) y[ch * plane + i] = x[ch * plane + i] * gamma[ch] + beta[ch];
    }
    return y;
}

ChannelAffineGrads channel_affine_backward(const Tensor& x, const Tensor& gamma, const Tensor& dout) {
    require_same_shape(x, dout, "channel_affine_backward");
    const std::size_t c = x.dim(0);
    const std::size_t plane = x.size() / c;
    ChannelAffineGrads g{Tensor(x.shape()), Tensor({c}), Tensor({c})};
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < plane; ++i) {
            const double gy = dout[ch * plane + i];
            g.dx[ch * plane + i] = gy * gamma[ch];
            g.dgamma[ch] += gy * x[ch * plane + i];
            g.dbeta[ch] += gy;
        }
    }
    return g;
}

Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

Tensor relu(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dout) {
    require_same_shape(x, dout, "relu_backward");
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dout[i] : 0.0;
    return dx;
}

Tensor gelu(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
    }
    return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& dout) {
    require_same_shape(x, dout, "gelu_backward");
    const double inv_sqrt_2pi = std::numbers::inv_sqrtpi / std::numbers::sqrt2;
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
        dx[i] = dout[i] * (cdf + x[i] * pdf);
    }
    return dx;
}

Tensor activate(Activation a, const Tensor& x) { return a == Activation::relu ? relu(x) : gelu(x); }

Tensor activate_backward(Activation a, const Tensor& x, const Tensor& dout) {
    return a == Activation::relu ? relu_backward(x, dout) : gelu_backward(x, dout);
}

Tensor reshape(const Tensor& x, Shape shape) { return x.reshaped(std::move(shape)); }

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    Shape out_shape = parts.front().shape();
    const auto first = axis_view(out_shape, axis);
    std::size_t total = 0;
    for (const auto& p : parts) {
        const auto v = axis_view(p.shape(), axis);
        if (p.rank() != out_shape.size() || v.outer != first.outer || v.inner != first.inner) {
            throw DimensionError("concat: incompatible shapes " + shape_str(parts.front().shape()) + " and " +
                                 shape_str(p.shape()) + " along axis " + std::to_string(axis));
        }
        total += v.extent;
    }
    out_shape[axis] = total;
    Tensor y(out_shape);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t chunk = p.dim(axis) * first.inner;
        for (std::size_t o = 0; o < first.outer; ++o) {
            std::copy_n(p.data().data() + o * chunk, chunk,
                        y.data().data() + o * total * first.inner + offset * first.inner);
        }
        offset += p.dim(axis);
    }
    return y;
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
    const auto v = axis_view(x.shape(), axis);
    std::size_t total = 0;
    for (auto s : sizes) total += s;
    if (total != v.extent) {
        throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis has extent " +
                             std::to_string(v.extent));
    }
    std::vector<Tensor> out;
    std::size_t offset = 0;
    for (auto s : sizes) {
        Shape shape = x.shape();
        shape[axis] = s;
        Tensor piece(shape);
        const std::size_t chunk = s * v.inner;
        for (std::size_t o = 0; o < v.outer; ++o) {
            std::copy_n(x.data().data() + o * v.extent * v.inner + offset * v.inner, chunk,
                        piece.data().data() + o * chunk);
        }
        out.push_back(std::move(piece));
        offset += s;
    }
    return out;
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
    const auto v = axis_view(x.shape(), axis);
    Tensor y(drop_axis(x.shape(), axis));
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t e = 0; e < v.extent; ++e) {
            for (std::size_t i = 0; i < v.inner; ++i) {
                y[o * v.inner + i] += x[(o * v.extent + e) * v.inner + i];
            }
        }
    }
    return y;
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
    return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor sum_axis_backward(const Tensor& dout, const Shape& input_shape, std::size_t axis) {
    const auto v = axis_view(input_shape, axis);
    if (dout.size() != v.outer * v.inner) {
        throw DimensionError("sum_axis_backward: upstream " + shape_str(dout.shape()) + " vs input " +
                             shape_str(input_shape));
    }
    Tensor dx(input_shape);
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t e = 0; e < v.extent; ++e) {
            for (std::size_t i = 0; i < v.inner; ++i) {
                dx[(o * v.extent + e) * v.inner + i] = dout[o * v.inner + i];
            }
        }
    }
    return dx;
}

Tensor mean_axis_backward(const Tensor& dout, const Shape& input_shape, std::size_t axis) {
    return scale(sum_axis_backward(dout, input_shape, axis), 1.0 / static_cast<double>(input_shape.at(axis)));
}

}  // namespace estf
