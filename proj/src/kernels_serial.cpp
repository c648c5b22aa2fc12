#include "estf/kernels.hpp"

#include <algorithm>

namespace estf::kernels::serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
            c[i * n + j] = acc;
        }
    }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

namespace {

// Input value at padded coordinate, zero outside the image.
double padded(std::span<const double> x, const ConvGeometry& g, std::size_t ci, long iy, long ix) {
    if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) || ix >= static_cast<long>(g.width)) return 0.0;
    return x[(ci * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)];
}

}  // namespace

void conv2d_forward(std::span<const double> x, std::span<const double> w, std::span<double> y,
                    const ConvGeometry& g) {
    const std::size_t oh = g.out_height(), ow = g.out_width();
    const long pad = static_cast<long>(g.padding);
    for (std::size_t co = 0; co < g.out_channels; ++co) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
                    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                            const long iy = static_cast<long>(oy * g.stride + ky) - pad;
                            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                            acc += w[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx] *
                                   padded(x, g, ci, iy, ix);
                        }
                    }
                }
                y[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

void conv2d_backward_input(std::span<const double> dy, std::span<const double> w, std::span<double> dx,
                           const ConvGeometry& g) {
    const std::size_t oh = g.out_height(), ow = g.out_width();
    const long pad = static_cast<long>(g.padding);
    std::fill(dx.begin(), dx.end(), 0.0);
    for (std::size_t co = 0; co < g.out_channels; ++co) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const double grad = dy[(co * oh + oy) * ow + ox];
                for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
                    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                            const long iy = static_cast<long>(oy * g.stride + ky) - pad;
                            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                                ix >= static_cast<long>(g.width))
                                continue;
                            dx[(ci * g.height + static_cast<std::size_t>(iy)) * g.width +
                               static_cast<std::size_t>(ix)] +=
                                grad * w[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_weight(std::span<const double> x, std::span<const double> dy, std::span<double> dw,
                            const ConvGeometry& g) {
    const std::size_t oh = g.out_height(), ow = g.out_width();
    const long pad = static_cast<long>(g.padding);
    for (std::size_t co = 0; co < g.out_channels; ++co) {
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                    double acc = 0.0;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const long iy = static_cast<long>(oy * g.stride + ky) - pad;
                            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                            acc += dy[(co * oh + oy) * ow + ox] * padded(x, g, ci, iy, ix);
                        }
                    }
                    dw[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx] = acc;
                }
            }
        }
    }
}

}  // namespace estf::kernels::serial
