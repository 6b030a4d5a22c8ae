#pragma once

// Complex-valued operations. Inside the graph a complex array is a Var with
// planar layout [2, ...]: plane 0 holds real parts, plane 1 imaginary parts.
// The same layout doubles as the 2-channel real input of the proximal CNNs.

#include <cmath>

#include "autodiff.hpp"
#include "kernels.hpp"

namespace equirecon {

/// Centered orthonormal 2D DFT over the last two axes of a planar complex tensor.
template <typename T>
Tensor<T> fft2c(const Tensor<T>& planar, bool inverse = false) {
    const Shape& s = planar.shape;
    if (s.size() < 3 || s[0] != 2)
        throw DimensionError("fft2c expects a planar complex tensor [2,...,H,W], got " + shape_str(s));
    const std::size_t H = s[s.size() - 2], W = s[s.size() - 1];
    if (H < 1 || W < 1) throw DimensionError("fft2c needs H, W >= 1");
    const std::size_t half = planar.size() / 2, nplanes = half / (H * W);
    Tensor<T> out = planar;
    for (std::size_t p = 0; p < nplanes; ++p)
        kernels::fft2c_plane(out.data.data() + p * H * W, out.data.data() + half + p * H * W, H, W, inverse);
    return out;
}

template <typename T>
Tensor<T> ifft2c(const Tensor<T>& planar) {
    return fft2c(planar, true);
}

template <typename T>
ComplexTensor<T> fft2c(const ComplexTensor<T>& x) {
    return unpack_planar(fft2c(pack_planar(x)));
}

template <typename T>
ComplexTensor<T> ifft2c(const ComplexTensor<T>& x) {
    return unpack_planar(ifft2c(pack_planar(x)));
}

namespace ad {

/// Differentiable fft2c. The transform is unitary, so its gradient is the inverse transform.
template <typename T>
Var<T> fft2c(const Var<T>& x, bool inverse = false) {
    return Var<T>::make(equirecon::fft2c(x.value(), inverse), {x}, [inverse](Node<T>& n) {
        Tensor<T> g(n.value.shape, n.grad);
        g = equirecon::fft2c(g, !inverse);
        auto& gx = detail::gbuf(n, 0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
}

template <typename T>
Var<T> ifft2c(const Var<T>& x) {
    return fft2c(x, true);
}

/// Per-coil weighting: x [2,H,W] times constant maps [2,C,H,W] -> [2,C,H,W].
template <typename T>
Var<T> coil_expand(const Var<T>& x, const Tensor<T>& maps) {
    if (maps.ndim() != 4 || maps.shape[0] != 2) throw DimensionError("coil_expand: maps must be [2,C,H,W]");
    const std::size_t C = maps.shape[1], HW = maps.shape[2] * maps.shape[3];
    require_shape(x.shape(), {2, maps.shape[2], maps.shape[3]}, "coil_expand image");
    const std::size_t half = C * HW;
    Tensor<T> out({2, C, maps.shape[2], maps.shape[3]});
    const T* xr = x.value().data.data();
    const T* xi = xr + HW;
    for (std::size_t c = 0; c < C; ++c) {
        const T* sr = maps.data.data() + c * HW;
        const T* si = sr + half;
        T* orr = out.data.data() + c * HW;
        T* oi = orr + half;
        for (std::size_t p = 0; p < HW; ++p) {
            orr[p] = sr[p] * xr[p] - si[p] * xi[p];
            oi[p] = sr[p] * xi[p] + si[p] * xr[p];
        }
    }
    return Var<T>::make(std::move(out), {x}, [maps, C, HW, half](Node<T>& n) {
        // Adjoint: sum_c conj(S_c) * g_c.
        auto& g = detail::gbuf(n, 0);
        for (std::size_t c = 0; c < C; ++c) {
            const T* sr = maps.data.data() + c * HW;
            const T* si = sr + half;
            const T* gr = n.grad.data() + c * HW;
            const T* gi = gr + half;
            for (std::size_t p = 0; p < HW; ++p) {
                g[p] += sr[p] * gr[p] + si[p] * gi[p];
                g[HW + p] += sr[p] * gi[p] - si[p] * gr[p];
            }
        }
    });
}

/// Coil combination: sum_c conj(S_c) y_c with y [2,C,H,W] -> [2,H,W].
template <typename T>
Var<T> coil_combine(const Var<T>& y, const Tensor<T>& maps) {
    if (maps.ndim() != 4 || maps.shape[0] != 2) throw DimensionError("coil_combine: maps must be [2,C,H,W]");
    require_shape(y.shape(), maps.shape, "coil_combine data");
    const std::size_t C = maps.shape[1], HW = maps.shape[2] * maps.shape[3], half = C * HW;
    Tensor<T> out({2, maps.shape[2], maps.shape[3]});
    for (std::size_t c = 0; c < C; ++c) {
        const T* sr = maps.data.data() + c * HW;
        const T* si = sr + half;
        const T* yr = y.value().data.data() + c * HW;
        const T* yi = yr + half;
        for (std::size_t p = 0; p < HW; ++p) {
            out[p] += sr[p] * yr[p] + si[p] * yi[p];
            out[HW + p] += sr[p] * yi[p] - si[p] * yr[p];
        }
    }
    return Var<T>::make(std::move(out), {y}, [maps, C, HW, half](Node<T>& n) {
        auto& g = detail::gbuf(n, 0);
        const T* gr = n.grad.data();
        const T* gi = gr + HW;
        for (std::size_t c = 0; c < C; ++c) {
            const T* sr = maps.data.data() + c * HW;
            const T* si = sr + half;
            for (std::size_t p = 0; p < HW; ++p) {
                g[c * HW + p] += sr[p] * gr[p] - si[p] * gi[p];
                g[half + c * HW + p] += sr[p] * gi[p] + si[p] * gr[p];
            }
        }
    });
}

/// Multiplies every trailing H x W plane of x by a constant real mask [H,W].
template <typename T>
Var<T> apply_mask(const Var<T>& x, const Tensor<T>& mask) {
    if (mask.ndim() != 2) throw DimensionError("apply_mask: mask must be [H,W]");
    const std::size_t HW = mask.size();
    if (x.size() % HW != 0 || x.shape()[x.shape().size() - 1] != mask.shape[1] ||
        x.shape()[x.shape().size() - 2] != mask.shape[0])
        throw DimensionError("apply_mask: data " + shape_str(x.shape()) + " vs mask " + shape_str(mask.shape));
    Tensor<T> out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i % HW];
    return Var<T>::make(std::move(out), {x}, [mask, HW](Node<T>& n) {
        auto& g = detail::gbuf(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * mask[i % HW];
    });
}

/// Mean over pixels of sqrt(dr^2 + di^2 + delta^2) - delta between planar complex
/// images xhat (differentiable) and a constant target of the same shape.
template <typename T>
Var<T> complex_l1(const Var<T>& xhat, const Tensor<T>& xstar, T delta = T(1e-8)) {
    require_shape(xhat.shape(), xstar.shape, "complex_l1");
    if (xstar.ndim() < 1 || xstar.shape[0] != 2) throw DimensionError("complex_l1 expects planar complex images");
    const std::size_t half = xstar.size() / 2;
    const T d2 = delta * delta;
    double acc = 0;
    for (std::size_t p = 0; p < half; ++p) {
        const T dr = xhat.value()[p] - xstar[p], di = xhat.value()[half + p] - xstar[half + p];
        acc += double(std::sqrt(dr * dr + di * di + d2) - delta);
    }
    const T loss = static_cast<T>(acc / double(half));
    return Var<T>::make(Tensor<T>({1}, {loss}), {xhat}, [xstar, half, d2](Node<T>& n) {
        const auto& xv = n.parents[0]->value;
        auto& g = detail::gbuf(n, 0);
        const T s = n.grad[0] / static_cast<T>(half);
        for (std::size_t p = 0; p < half; ++p) {
            const T dr = xv[p] - xstar[p], di = xv[half + p] - xstar[half + p];
            const T m = std::sqrt(dr * dr + di * di + d2);
            g[p] += s * dr / m;
            g[half + p] += s * di / m;
        }
    });
}

} // namespace ad
} // namespace equirecon
