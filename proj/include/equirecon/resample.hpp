#pragma once

#include <cmath>
#include <complex>

#include "errors.hpp"
#include "tensor.hpp"

namespace equirecon {

/// Magnifies the content of every trailing H x W plane by `s` about the grid
/// center ((H-1)/2, (W-1)/2) with bilinear interpolation. The array size is
/// unchanged; output pixels whose source falls outside the grid get `fill`.
/// s < 1 shrinks the content, s == 1 is the exact identity.
template <typename T>
Tensor<T> resample_scale(const Tensor<T>& x, double s, T fill = T(0)) {
    if (!(s > 0) || !std::isfinite(s)) throw DomainError("resample_scale needs a positive finite scale, got " + std::to_string(s));
    if (x.ndim() < 2) throw DimensionError("resample_scale needs at least 2 dimensions");
    const std::size_t H = x.shape[x.ndim() - 2], W = x.shape[x.ndim() - 1], HW = H * W;
    const std::size_t planes = HW ? x.size() / HW : 0;
    if (s == 1.0) return x;
    const double cy = (double(H) - 1) / 2, cx = (double(W) - 1) / 2;
    Tensor<T> out(x.shape);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* in = x.data.data() + p * HW;
        T* o = out.data.data() + p * HW;
        for (std::size_t y = 0; y < H; ++y) {
            const double sy = cy + (double(y) - cy) / s;
            for (std::size_t xx = 0; xx < W; ++xx) {
                const double sx = cx + (double(xx) - cx) / s;
                if (sy < 0 || sy > double(H) - 1 || sx < 0 || sx > double(W) - 1) {
                    o[y * W + xx] = fill;
                    continue;
                }
                const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
                const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
                const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
                const T fy = static_cast<T>(sy - double(y0)), fx = static_cast<T>(sx - double(x0));
                const T a = in[y0 * W + x0], b = in[y0 * W + x1];
                const T c = in[y1 * W + x0], d = in[y1 * W + x1];
                // a + f*(b - a) form keeps constants exact.
                const T top = a + fx * (b - a);
                const T bot = c + fx * (d - c);
                o[y * W + xx] = top + fy * (bot - top);
            }
        }
    }
    return out;
}

template <typename T>
ComplexTensor<T> resample_scale(const ComplexTensor<T>& x, double s, std::complex<T> fill = {}) {
    return {resample_scale(x.re, s, fill.real()), resample_scale(x.im, s, fill.imag())};
}

} // namespace equirecon
