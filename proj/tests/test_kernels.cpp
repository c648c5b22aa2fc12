// The OpenMP kernels against the serial reference loop nests.

#include <random>

#include "doctest.h"
#include "estf/gradcheck.hpp"
#include "estf/kernels.hpp"

using namespace estf;
namespace ks = estf::kernels::serial;
namespace kp = estf::kernels::parallel;

namespace {

double max_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("matmul variants agree with the serial reference") {
    std::mt19937_64 rng(1);
    // Second shape exceeds the parallel threshold.
    for (auto [m, k, n] : {std::array<std::size_t, 3>{3, 5, 4}, std::array<std::size_t, 3>{64, 48, 40}}) {
        const Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n});
        const Tensor bt = random_tensor(rng, {n, k}), at = random_tensor(rng, {k, m});
        std::vector<double> ref(m * n), got(m * n);

        ks::matmul(a.data(), b.data(), ref, m, k, n);
        kp::matmul(a.data(), b.data(), got, m, k, n);
        CHECK(max_diff(ref, got) < 1e-12);

        ks::matmul_nt(a.data(), bt.data(), ref, m, k, n);
        kp::matmul_nt(a.data(), bt.data(), got, m, k, n);
        CHECK(max_diff(ref, got) < 1e-12);

        ks::matmul_tn(at.data(), b.data(), ref, m, k, n);
        kp::matmul_tn(at.data(), b.data(), got, m, k, n);
        CHECK(max_diff(ref, got) < 1e-12);
    }
}

TEST_CASE("conv2d variants agree with the serial reference") {
    std::mt19937_64 rng(2);
    for (std::size_t stride : {1, 2, 3}) {
        for (std::size_t pad : {0, 1, 2}) {
            kernels::ConvGeometry g;
            g.in_channels = 3;
            g.height = 9;
            g.width = 7;
            g.out_channels = 4;
            g.kernel_h = 3;
            g.kernel_w = 2;
            g.stride = stride;
            g.padding = pad;
            const Tensor x = random_tensor(rng, {g.in_channels, g.height, g.width});
            const Tensor w = random_tensor(rng, {g.out_channels, g.in_channels, g.kernel_h, g.kernel_w});
            const Tensor dy = random_tensor(rng, {g.out_channels, g.out_height(), g.out_width()});

            std::vector<double> ref(dy.size()), got(dy.size());
            ks::conv2d_forward(x.data(), w.data(), ref, g);
            kp::conv2d_forward(x.data(), w.data(), got, g);
            CHECK(max_diff(ref, got) < 1e-12);

            std::vector<double> dref(x.size()), dgot(x.size());
            ks::conv2d_backward_input(dy.data(), w.data(), dref, g);
            kp::conv2d_backward_input(dy.data(), w.data(), dgot, g);
            CHECK(max_diff(dref, dgot) < 1e-12);

            std::vector<double> wref(w.size()), wgot(w.size());
            ks::conv2d_backward_weight(x.data(), dy.data(), wref, g);
            kp::conv2d_backward_weight(x.data(), dy.data(), wgot, g);
            CHECK(max_diff(wref, wgot) < 1e-12);
        }
    }
}

TEST_CASE("large conv crosses the parallel threshold") {
    std::mt19937_64 rng(3);
    kernels::ConvGeometry g{8, 32, 32, 16, 3, 3, 2, 1};
    const Tensor x = random_tensor(rng, {8, 32, 32});
    const Tensor w = random_tensor(rng, {16, 8, 3, 3});
    std::vector<double> ref(16 * 16 * 16), got(ref.size());
    ks::conv2d_forward(x.data(), w.data(), ref, g);
    kp::conv2d_forward(x.data(), w.data(), got, g);
    CHECK(max_diff(ref, got) < 1e-11);
}
