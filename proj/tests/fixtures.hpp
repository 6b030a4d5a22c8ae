#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <cmath>
#include <random>

#include <equirecon/steerable.hpp>

namespace fixture {

using equirecon::ComplexTensor;
using equirecon::Tensor;

/// Smooth complex image: a few Gaussian bumps (widths 3..6 px) kept away from
/// the border, with a slowly varying phase.
inline ComplexTensor<double> gaussian_bumps(std::size_t H, std::size_t W, std::uint64_t seed, int nbumps = 5) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    ComplexTensor<double> f({H, W});
    const double cy = (double(H) - 1) / 2, cx = (double(W) - 1) / 2;
    for (int b = 0; b < nbumps; ++b) {
        const double by = cy + (u(rng) - 0.5) * 0.4 * double(H);
        const double bx = cx + (u(rng) - 0.5) * 0.4 * double(W);
        const double sg = 3.0 + 3.0 * u(rng);
        const double amp = 0.5 + u(rng);
        const double ph = 6.283185307179586 * u(rng);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double d2 = (double(y) - by) * (double(y) - by) + (double(x) - bx) * (double(x) - bx);
                const double g = amp * std::exp(-d2 / (2 * sg * sg));
                const double p = ph + 0.05 * (double(x) - cx);
                f.re[y * W + x] += g * std::cos(p);
                f.im[y * W + x] += g * std::sin(p);
            }
    }
    return f;
}

/// Relative l2 discrepancy between lift_conv(L_s f) at scale index j + shift
/// and L_s applied to lift_conv(f) at index j, over valid j and interior pixels.
template <typename Layer>
double lift_shift_error(const Layer& layer, const ComplexTensor<double>& f, double s, std::size_t shift) {
    using namespace equirecon;
    const std::size_t H = f.shape()[0], W = f.shape()[1];
    auto img = [&](const ComplexTensor<double>& z) {
        auto p = pack_planar(z);
        return Var<double>::constant(Tensor<double>({1, 2, H, W}, p.data));
    };
    const auto a = lift_conv(img(resample_scale(f, s)), layer).data.value();
    const auto b = lift_conv(img(f), layer).data.value();
    const std::size_t C = a.shape[1], S = a.shape[2], HW = H * W;
    const std::size_t m = equivariance_margin(s, H, W, layer.basis->kernel_size);
    double num = 0, den = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t j = 0; j + shift < S; ++j) {
            Tensor<double> plane({H, W});
            std::copy_n(b.data.begin() + static_cast<std::ptrdiff_t>((c * S + j) * HW), HW, plane.data.begin());
            const auto want = resample_scale(plane, s);
            const double* got = a.data.data() + (c * S + j + shift) * HW;
            for (std::size_t y = m; y + m < H; ++y)
                for (std::size_t x = m; x + m < W; ++x) {
                    const double d = got[y * W + x] - want[y * W + x];
                    num += d * d;
                    den += want[y * W + x] * want[y * W + x];
                }
        }
    return std::sqrt(num / den);
}

} // namespace fixture
