#include "estf/kernels.hpp"

#include <algorithm>

namespace estf::kernels::parallel {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelThreshold = 1 << 15;

struct Range {
    std::size_t lo, hi;
};

// Output positions o in [0, n_out) whose tap o*stride + k - pad lands in [0, n_in).
Range valid_outputs(std::size_t k, std::size_t n_out, std::size_t n_in, std::size_t stride, std::size_t pad) {
    std::size_t lo = 0;
    if (pad > k) lo = (pad - k + stride - 1) / stride;
    if (n_in + pad <= k) return {0, 0};
    std::size_t hi = (n_in - 1 + pad - k) / stride + 1;
    hi = std::min(hi, n_out);
    if (lo > hi) lo = hi;
    return {lo, hi};
}

}  // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n) {
    const bool big = m * n * k >= kParallelThreshold;
#pragma omp parallel for if (big) schedule(static)
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c.data() + i * n;
        std::fill(crow, crow + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* brow = b.data() + p * n;
#pragma omp simd
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n) {
    const bool big = m * n * k >= kParallelThreshold;
#pragma omp parallel for if (big) schedule(static)
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b.data() + j * k;
            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] = acc;
        }
    }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n) {
    const bool big = m * n * k >= kParallelThreshold;
#pragma omp parallel for if (big) schedule(static)
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c.data() + i * n;
        std::fill(crow, crow + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double api = a[p * m + i];
            const double* brow = b.data() + p * n;
#pragma omp simd
            for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

void conv2d_forward(std::span<const double> x, std::span<const double> w, std::span<double> y,
                    const ConvGeometry& g) {
    const std::size_t oh = g.out_height(), ow = g.out_width();
    const std::size_t work = g.out_channels * oh * ow * g.in_channels * g.kernel_h * g.kernel_w;
    const std::size_t s = g.stride;
#pragma omp parallel for if (work >= kParallelThreshold) schedule(static)
    for (std::size_t co = 0; co < g.out_channels; ++co) {
        double* yplane = y.data() + co * oh * ow;
        std::fill(yplane, yplane + oh * ow, 0.0);
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            const double* xplane = x.data() + ci * g.height * g.width;
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                const Range rows = valid_outputs(ky, oh, g.height, s, g.padding);
                for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                    const Range cols = valid_outputs(kx, ow, g.width, s, g.padding);
                    const double wv = w[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                    for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
                        const double* xrow = xplane + (oy * s + ky - g.padding) * g.width;
                        double* yrow = yplane + oy * ow;
                        for (std::size_t ox = cols.lo; ox < cols.hi; ++ox) {
                            yrow[ox] += wv * xrow[ox * s + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_input(std::span<const double> dy, std::span<const double> w, std::span<double> dx,
                           const ConvGeometry& g) {
    const std::size_t oh = g.out_height(), ow = g.out_width();
    const std::size_t work = g.out_channels * oh * ow * g.in_channels * g.kernel_h * g.kernel_w;
    const std::size_t s = g.stride;
#pragma omp parallel for if (work >= kParallelThreshold) schedule(static)
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
        double* xplane = dx.data() + ci * g.height * g.width;
        std::fill(xplane, xplane + g.height * g.width, 0.0);
        for (std::size_t co = 0; co < g.out_channels; ++co) {
            const double* yplane = dy.data() + co * oh * ow;
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                const Range rows = valid_outputs(ky, oh, g.height, s, g.padding);
                for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                    const Range cols = valid_outputs(kx, ow, g.width, s, g.padding);
                    const double wv = w[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                    for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
                        double* xrow = xplane + (oy * s + ky - g.padding) * g.width;
                        const double* yrow = yplane + oy * ow;
                        for (std::size_t ox = cols.lo; ox < cols.hi; ++ox) {
                            xrow[ox * s + kx - g.padding] += wv * yrow[ox];
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
    const std::size_t work = g.out_channels * oh * ow * g.in_channels * g.kernel_h * g.kernel_w;
    const std::size_t s = g.stride;
#pragma omp parallel for if (work >= kParallelThreshold) schedule(static)
    for (std::size_t co = 0; co < g.out_channels; ++co) {
        const double* yplane = dy.data() + co * oh * ow;
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            const double* xplane = x.data() + ci * g.height * g.width;
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                const Range rows = valid_outputs(ky, oh, g.height, s, g.padding);
                for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                    const Range cols = valid_outputs(kx, ow, g.width, s, g.padding);
                    double acc = 0.0;
                    for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
                        const double* xrow = xplane + (oy * s + ky - g.padding) * g.width;
                        const double* yrow = yplane + oy * ow;
                        for (std::size_t ox = cols.lo; ox < cols.hi; ++ox) {
                            acc += yrow[ox] * xrow[ox * s + kx - g.padding];
                        }
                    }
                    dw[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx] = acc;
                }
            }
        }
    }
}

}  // namespace estf::kernels::parallel
