#pragma once

// Raw compute kernels behind the dense primitives. Each kernel exists twice:
// `serial` is the plain reference loop nest kept for testing, `parallel` is
// the OpenMP version used by the library. Both overwrite their output.

#include <cstddef>
#include <span>

namespace estf::kernels {

struct ConvGeometry {
    std::size_t in_channels = 0, height = 0, width = 0;
    std::size_t out_channels = 0, kernel_h = 0, kernel_w = 0;
    std::size_t stride = 1, padding = 0;

    std::size_t out_height() const { return (height + 2 * padding - kernel_h) / stride + 1; }
    std::size_t out_width() const { return (width + 2 * padding - kernel_w) / stride + 1; }
};

namespace serial {

/// c[m×n] = a[m×k] · b[k×n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n);
/// c[m×n] = a[m×k] · b[n×k]ᵀ
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n);
/// c[m×n] = a[k×m]ᵀ · b[k×n]
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n);

void conv2d_forward(std::span<const double> x, std::span<const double> w, std::span<double> y,
                    const ConvGeometry& g);
void conv2d_backward_input(std::span<const double> dy, std::span<const double> w, std::span<double> dx,
                           const ConvGeometry& g);
void conv2d_backward_weight(std::span<const double> x, std::span<const double> dy, std::span<double> dw,
                            const ConvGeometry& g);

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n);
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n);

void conv2d_forward(std::span<const double> x, std::span<const double> w, std::span<double> y,
                    const ConvGeometry& g);
void conv2d_backward_input(std::span<const double> dy, std::span<const double> w, std::span<double> dx,
                           const ConvGeometry& g);
void conv2d_backward_weight(std::span<const double> x, std::span<const double> dy, std::span<double> dw,
                            const ConvGeometry& g);

}  // namespace parallel

}  // namespace estf::kernels
