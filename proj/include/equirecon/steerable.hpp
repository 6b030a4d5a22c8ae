#pragma once

// Scale-translation equivariant convolutions built from a fixed steerable
// basis of 2D Hermite polynomials under a Gaussian envelope.
//
// A learned kernel is a linear combination w = sum_b v_b psi_b of basis
// filters. The basis is evaluated analytically at a geometric set of scales
// sigma * a^j, so one coefficient vector yields a family of kernels that are
// dilations of each other. Lifting convolves an image with every member of
// the family and produces a stack indexed by (scale, position); shrinking the
// input by a moves responses one index up the scale axis.

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "resample.hpp"

namespace equirecon {

enum class BasisNormalization {
    // Scale-0 filters have unit l2 norm; filters at sigma_j carry the extra
    // factor (sigma_0 / sigma_j)^2 of a continuous dilation, so responses to a
    // dilated image match exactly in the continuum.
    scale_consistent,
    // Every (filter, scale) slice has unit l2 norm.
    per_scale_l2,
};

/// Physicists' Hermite polynomial H_n(x).
inline double hermite(int n, double x) {
    if (n == 0) return 1.0;
    double h0 = 1.0, h1 = 2.0 * x;
    for (int k = 1; k < n; ++k) {
        const double h2 = 2.0 * x * h1 - 2.0 * k * h0;
        h0 = h1;
        h1 = h2;
    }
    return h1;
}

/// Hermite index pairs (i along x, j along y) ordered by total degree, then
/// i descending: (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...
inline std::vector<std::pair<int, int>> hermite_orders(std::size_t count) {
    std::vector<std::pair<int, int>> out;
    for (int d = 0; out.size() < count; ++d)
        for (int i = d; i >= 0 && out.size() < count; --i) out.emplace_back(i, d - i);
    return out;
}

/// H_i(x/s) H_j(y/s) exp(-(x^2 + y^2) / (2 s^2)) at integer grid offsets.
inline double hermite_gaussian(int i, int j, double x, double y, double s) {
    return hermite(i, x / s) * hermite(j, y / s) * std::exp(-(x * x + y * y) / (2 * s * s));
}

struct SteerableBasis {
    std::size_t order_count = 0;  // B
    std::size_t kernel_size = 0;  // k
    double base_sigma = 0;
    double scale_factor = 1;      // a
    std::vector<double> scales;   // a^j
    BasisNormalization normalization = BasisNormalization::scale_consistent;
    Tensor<double> filters;       // [B, n_scales, k, k]

    std::size_t n_scales() const { return scales.size(); }

    /// Filter b at scale index j as a k x k row-major slice.
    std::span<const double> filter(std::size_t b, std::size_t j) const {
        const std::size_t kk = kernel_size * kernel_size;
        return std::span<const double>(filters.data).subspan((b * n_scales() + j) * kk, kk);
    }
};

/// Builds the fixed basis. Each filter is the analytic Hermite-Gaussian
/// re-evaluated at sigma * a^j (never resampled from another scale).
inline SteerableBasis hermite_gaussian_basis(std::size_t k, std::size_t order, double sigma, double a, std::size_t n_scales,
                                             BasisNormalization norm = BasisNormalization::scale_consistent) {
    if (k % 2 == 0 || k == 0) throw ConfigError("steerable kernel size must be odd, got " + std::to_string(k));
    if (order < 1) throw ConfigError("basis order must be >= 1");
    if (!(a > 0)) throw DomainError("scale factor a must be positive");
    if (!(sigma > 0)) throw DomainError("basis sigma must be positive");
    if (n_scales < 1) throw ConfigError("n_scales must be >= 1");
    // Total Hermite degree is capped at k - 1: higher degrees alias on a k-point grid.
    const std::size_t available = k * (k + 1) / 2;
    if (order > available)
        throw ConfigError("basis order " + std::to_string(order) + " exceeds the " + std::to_string(available) +
                          " Hermite indices available for a " + std::to_string(k) + "x" + std::to_string(k) + " kernel");

    SteerableBasis basis;
    basis.order_count = order;
    basis.kernel_size = k;
    basis.base_sigma = sigma;
    basis.scale_factor = a;
    basis.normalization = norm;
    for (std::size_t j = 0; j < n_scales; ++j) basis.scales.push_back(std::pow(a, double(j)));
    basis.filters = Tensor<double>({order, n_scales, k, k});

    const int r = int(k / 2);
    const auto orders = hermite_orders(order);
    for (std::size_t b = 0; b < order; ++b) {
        const auto [hi, hj] = orders[b];
        double norm0 = 0;
        for (std::size_t j = 0; j < n_scales; ++j) {
            const double sj = sigma * basis.scales[j];
            double* f = basis.filters.data.data() + (b * n_scales + j) * k * k;
            double ss = 0;
            for (int y = -r; y <= r; ++y)
                for (int x = -r; x <= r; ++x) {
                    const double v = hermite_gaussian(hi, hj, double(x), double(y), sj);
                    f[(y + r) * int(k) + (x + r)] = v;
                    ss += v * v;
                }
            if (j == 0) norm0 = std::sqrt(ss);
            const double c = norm == BasisNormalization::per_scale_l2
                                 ? 1.0 / std::sqrt(ss)
                                 : (1.0 / norm0) * (sigma * sigma) / (sj * sj);
            for (std::size_t i = 0; i < k * k; ++i) f[i] *= c;
        }
    }
    return basis;
}

/// Default envelope width at scale 1 for a k x k window. Wider envelopes get
/// truncated by the window differently at each scale, which breaks the
/// dilation relation between slices (k/4 gives about 5% lift discrepancy at
/// k = 5, k/6 about 0.5%).
inline double default_basis_sigma(std::size_t k) { return double(k) / 6.0; }

// ---------------------------------------------------------------------------
// Differentiable pieces

namespace ad {

/// Materializes kernels for every scale: v [Cout, Cin, B] -> [Cout, S, Cin, k, k].
template <typename T>
Var<T> steer_kernels(const Var<T>& v, const SteerableBasis& basis) {
    const Shape& vs = v.shape();
    if (vs.size() != 3 || vs[2] != basis.order_count)
        throw DimensionError("coefficients " + shape_str(vs) + " do not match a basis of order " +
                             std::to_string(basis.order_count));
    const std::size_t Cout = vs[0], Cin = vs[1], B = vs[2], S = basis.n_scales(), kk = basis.kernel_size * basis.kernel_size;
    std::vector<T> psi(basis.filters.size());
    for (std::size_t i = 0; i < psi.size(); ++i) psi[i] = static_cast<T>(basis.filters[i]);
    Tensor<T> out({Cout, S, Cin, basis.kernel_size, basis.kernel_size});
    for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t ci = 0; ci < Cin; ++ci) {
                T* o = out.data.data() + ((co * S + s) * Cin + ci) * kk;
                for (std::size_t b = 0; b < B; ++b) {
                    const T c = v.value()[(co * Cin + ci) * B + b];
                    const T* f = psi.data() + (b * S + s) * kk;
                    for (std::size_t p = 0; p < kk; ++p) o[p] += c * f[p];
                }
            }
    return Var<T>::make(std::move(out), {v}, [psi = std::move(psi), Cout, Cin, B, S, kk](Node<T>& n) {
        auto& g = detail::gbuf(n, 0);
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                    const T* gk = n.grad.data() + ((co * S + s) * Cin + ci) * kk;
                    for (std::size_t b = 0; b < B; ++b) {
                        const T* f = psi.data() + (b * S + s) * kk;
                        T acc = 0;
                        for (std::size_t p = 0; p < kk; ++p) acc += gk[p] * f[p];
                        g[(co * Cin + ci) * B + b] += acc;
                    }
                }
    });
}

/// Group convolution over a stack [N, Cin, S, H, W] with per-scale kernels
/// [Cout, S, Cin, k, k]: out[:, :, j] = sum_{d < interaction, j + d < S}
/// conv(in[:, :, j + d], kernel[:, j + d]).
template <typename T>
Var<T> scale_conv(const Var<T>& stack, const Var<T>& kernels, std::size_t interaction, Padding pad = Padding::zero) {
    const Shape& is = stack.shape();
    const Shape& ks = kernels.shape();
    if (is.size() != 5 || ks.size() != 5) throw DimensionError("scale_conv expects 5-d stack and kernels");
    if (ks[1] != is[2] || ks[2] != is[1])
        throw DimensionError("scale_conv: stack " + shape_str(is) + " vs kernels " + shape_str(ks));
    if (interaction < 1) throw ConfigError("interaction must be >= 1");
    const std::size_t N = is[0], Cin = is[1], S = is[2], H = is[3], W = is[4], Cout = ks[0], k = ks[3];
    const std::size_t plane = H * W, kk = k * k;
    auto in_at = [=](std::size_t n, std::size_t ci, std::size_t s) { return ((n * Cin + ci) * S + s) * plane; };
    auto out_at = [=](std::size_t n, std::size_t co, std::size_t s) { return ((n * Cout + co) * S + s) * plane; };
    auto k_at = [=](std::size_t co, std::size_t s, std::size_t ci) { return ((co * S + s) * Cin + ci) * kk; };
    Tensor<T> out({N, Cout, S, H, W});
    const T* x = stack.value().data.data();
    const T* w = kernels.value().data.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t j = 0; j < S; ++j)
                for (std::size_t d = 0; d < interaction && j + d < S; ++d)
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        kernels::correlate_plane(x + in_at(n, ci, j + d), w + k_at(co, j + d, ci), int(k), int(H), int(W), pad,
                                                 out.data.data() + out_at(n, co, j));
    return Var<T>::make(std::move(out), {stack, kernels}, [=](Node<T>& nd) {
        const T* xv = nd.parents[0]->value.data.data();
        const T* wv = nd.parents[1]->value.data.data();
        const T* g = nd.grad.data();
        const bool gx_on = detail::wants(nd, 0), gw_on = detail::wants(nd, 1);
        T* gx = gx_on ? detail::gbuf(nd, 0).data() : nullptr;
        T* gw = gw_on ? detail::gbuf(nd, 1).data() : nullptr;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < Cout; ++co)
                for (std::size_t j = 0; j < S; ++j)
                    for (std::size_t d = 0; d < interaction && j + d < S; ++d)
                        for (std::size_t ci = 0; ci < Cin; ++ci) {
                            if (gx_on)
                                kernels::correlate_plane_adj_input(g + out_at(n, co, j), wv + k_at(co, j + d, ci), int(k), int(H),
                                                                   int(W), pad, gx + in_at(n, ci, j + d));
                            if (gw_on)
                                kernels::correlate_plane_adj_taps(g + out_at(n, co, j), xv + in_at(n, ci, j + d), int(k), int(H),
                                                                  int(W), pad, gw + k_at(co, j + d, ci));
                        }
    });
}

/// Pixelwise maximum over the scale axis: [N, C, S, H, W] -> [N, C, H, W].
/// The gradient goes to the first maximizing scale.
template <typename T>
Var<T> max_over_scales(const Var<T>& stack) {
    const Shape& s = stack.shape();
    if (s.size() != 5) throw DimensionError("max_over_scales expects [N,C,S,H,W], got " + shape_str(s));
    const std::size_t NC = s[0] * s[1], S = s[2], plane = s[3] * s[4];
    Tensor<T> out({s[0], s[1], s[3], s[4]});
    std::vector<std::uint32_t> arg(NC * plane, 0);
    const T* x = stack.value().data.data();
    for (std::size_t c = 0; c < NC; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
            T best = x[(c * S) * plane + p];
            std::uint32_t bi = 0;
            for (std::size_t j = 1; j < S; ++j) {
                const T v = x[(c * S + j) * plane + p];
                if (v > best) {
                    best = v;
                    bi = std::uint32_t(j);
                }
            }
            out[c * plane + p] = best;
            arg[c * plane + p] = bi;
        }
    return Var<T>::make(std::move(out), {stack}, [arg = std::move(arg), NC, S, plane](Node<T>& n) {
        auto& g = detail::gbuf(n, 0);
        for (std::size_t c = 0; c < NC; ++c)
            for (std::size_t p = 0; p < plane; ++p) g[(c * S + arg[c * plane + p]) * plane + p] += n.grad[c * plane + p];
    });
}

} // namespace ad

// ---------------------------------------------------------------------------
// Layers

/// Features on the scale-translation group: data [N, C, S, H, W] with the
/// scales that index axis 2.
template <typename T>
struct ScaleStack {
    Var<T> data;
    std::vector<double> scales;
};

template <typename T>
struct ScaleEquivConvLayer {
    Var<T> v;     // [Cout, Cin, B]
    Var<T> bias;  // [Cout]
    std::shared_ptr<const SteerableBasis> basis;
    std::size_t interaction = 1;

    std::size_t out_channels() const { return v.shape()[0]; }
    std::size_t in_channels() const { return v.shape()[1]; }
    std::size_t parameter_count() const { return v.size() + bias.size(); }
};

/// Kernel w = sum_b v_b psi_b at one scale index: [Cout, Cin, k, k].
template <typename T>
Var<T> build_kernel(const Var<T>& v, const SteerableBasis& basis, std::size_t scale_index) {
    if (scale_index >= basis.n_scales())
        throw DimensionError("scale index " + std::to_string(scale_index) + " out of range for " +
                             std::to_string(basis.n_scales()) + " scales");
    SteerableBasis single = basis;
    single.scales = {basis.scales[scale_index]};
    const std::size_t kk = basis.kernel_size * basis.kernel_size;
    single.filters = Tensor<double>({basis.order_count, 1, basis.kernel_size, basis.kernel_size});
    for (std::size_t b = 0; b < basis.order_count; ++b) {
        auto f = basis.filter(b, scale_index);
        std::copy(f.begin(), f.end(), single.filters.data.begin() + static_cast<std::ptrdiff_t>(b * kk));
    }
    auto k5 = ad::steer_kernels(v, single);
    return ad::reshape(k5, {v.shape()[0], v.shape()[1], basis.kernel_size, basis.kernel_size});
}

/// Lifting convolution: image [N, Cin, H, W] -> stack [N, Cout, S, H, W] whose
/// slice j is conv2d(image, build_kernel(v, basis, j)) plus bias.
template <typename T>
ScaleStack<T> lift_conv(const Var<T>& image, const ScaleEquivConvLayer<T>& layer, Padding pad = Padding::zero) {
    const auto& b = *layer.basis;
    const std::size_t Cout = layer.out_channels(), Cin = layer.in_channels(), S = b.n_scales(), k = b.kernel_size;
    if (image.shape().size() != 4 || image.shape()[1] != Cin)
        throw DimensionError("lift_conv: image " + shape_str(image.shape()) + " vs layer input channels " + std::to_string(Cin));
    auto kernels = ad::reshape(ad::steer_kernels(layer.v, b), {Cout * S, Cin, k, k});
    auto y = ad::conv2d(image, kernels, pad);
    const Shape& ys = y.shape();
    y = ad::reshape(y, {ys[0], Cout, S, ys[2], ys[3]});
    return {ad::add_channel_bias(y, layer.bias), b.scales};
}

/// Group convolution of a stack with the layer's per-scale kernels.
template <typename T>
ScaleStack<T> group_conv(const ScaleStack<T>& stack, const ScaleEquivConvLayer<T>& layer, Padding pad = Padding::zero) {
    const auto& b = *layer.basis;
    if (stack.scales != b.scales) throw ConfigError("group_conv: stack scales do not match the layer basis");
    auto kernels = ad::steer_kernels(layer.v, b);
    auto y = ad::scale_conv(stack.data, kernels, layer.interaction, pad);
    return {ad::add_channel_bias(y, layer.bias), b.scales};
}

template <typename T>
Var<T> scale_project(const ScaleStack<T>& stack) {
    return ad::max_over_scales(stack.data);
}

// ---------------------------------------------------------------------------
// Equivariance error

/// Pixels at least `margin` away from every border.
inline std::size_t equivariance_margin(double s, std::size_t H, std::size_t W, std::size_t k) {
    return static_cast<std::size_t>(std::ceil(std::abs(1.0 - s) * double(std::max(H, W)) / 2.0)) + k;
}

/// ||a - b||^2 / ||a||^2 restricted to pixels at least `margin` away from
/// every border of the trailing H x W planes.
template <typename T>
double interior_relative_error(const Tensor<T>& a, const Tensor<T>& b, std::size_t margin) {
    require_shape(b.shape, a.shape, "interior_relative_error");
    const std::size_t H = a.shape[a.ndim() - 2], W = a.shape[a.ndim() - 1], HW = H * W;
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t y = (i % HW) / W, x = i % W;
        if (y < margin || y + margin >= H || x < margin || x + margin >= W) continue;
        const double d = double(a[i]) - double(b[i]);
        num += d * d;
        den += double(a[i]) * double(a[i]);
    }
    if (!(den > 0)) throw NumericError("equivariance error: reference norm vanishes on the interior region");
    return num / den;
}

/// Delta = ||L_s[phi(f)] - phi(L_s[f])||^2 / ||L_s[phi(f)]||^2 over the
/// interior of the trailing H x W planes, with L_s = resample_scale.
template <typename T>
double equivariance_error(const std::function<Tensor<T>(const Tensor<T>&)>& phi, const Tensor<T>& f, double s,
                          std::size_t kernel_size) {
    const Tensor<T> a = resample_scale(phi(f), s);
    const Tensor<T> b = phi(resample_scale(f, s));
    require_shape(b.shape, a.shape, "equivariance_error");
    const std::size_t H = a.shape[a.ndim() - 2], W = a.shape[a.ndim() - 1];
    return interior_relative_error(a, b, equivariance_margin(s, H, W, kernel_size));
}

/// Complex-image form: the norm runs over both real and imaginary parts.
template <typename T>
double equivariance_error(const std::function<ComplexTensor<T>(const ComplexTensor<T>&)>& phi, const ComplexTensor<T>& f,
                          double s, std::size_t kernel_size) {
    std::function<Tensor<T>(const Tensor<T>&)> planar = [&](const Tensor<T>& x) { return pack_planar(phi(unpack_planar(x))); };
    return equivariance_error(planar, pack_planar(f), s, kernel_size);
}

} // namespace equirecon
