#pragma once

// Multi-coil Cartesian acquisition model y = mask . F(S x) + noise, its
// adjoint, the data-consistency gradient step, and generators for sampling
// masks and coil sensitivity maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "complex_ops.hpp"

namespace equirecon {

struct SamplingMask {
    Tensor<double> grid;  // H x W, entries in {0, 1}
    double acceleration = 1.0;
    std::pair<std::size_t, std::size_t> calib{0, 0};
    std::uint64_t seed = 0;
    double base_radius = 0.0;  // r0 of the density law; 0 when fully sampled

    std::size_t height() const { return grid.shape.at(0); }
    std::size_t width() const { return grid.shape.at(1); }
    std::size_t count() const {
        std::size_t n = 0;
        for (double v : grid.data) n += v != 0.0;
        return n;
    }

    /// Rebuilds acceleration from the grid contents.
    void recount() { acceleration = double(grid.size()) / double(std::max<std::size_t>(count(), 1)); }
};

template <typename T>
struct SensitivityMaps {
    ComplexTensor<T> maps;  // C x H x W

    std::size_t ncoils() const { return maps.shape().at(0); }

    template <typename U>
    SensitivityMaps<U> cast() const {
        return {maps.template cast<U>()};
    }
};

template <typename T>
struct KSpaceSample {
    std::string id;
    ComplexTensor<T> y;       // C x H x W, zero wherever the mask is zero
    SensitivityMaps<T> maps;
    SamplingMask mask;
    ComplexTensor<T> target;  // H x W
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    std::size_t height() const { return target.shape().at(0); }
    std::size_t width() const { return target.shape().at(1); }

    template <typename U>
    KSpaceSample<U> cast() const {
        return {id, y.template cast<U>(), maps.template cast<U>(), mask, target.template cast<U>(), noise_sigma, seed};
    }
};

/// Planar copies of the constant operands of A, prepared once per sample.
template <typename T>
struct ForwardOperator {
    Tensor<T> maps;  // [2, C, H, W]
    Tensor<T> mask;  // [H, W]

    ForwardOperator(const SensitivityMaps<T>& s, const SamplingMask& m)
        : maps(pack_planar(s.maps)), mask(m.grid.template cast<T>()) {
        if (s.maps.shape().size() != 3) throw DimensionError("sensitivity maps must be C x H x W");
        if (m.grid.shape != Shape{s.maps.shape()[1], s.maps.shape()[2]})
            throw DimensionError("mask " + shape_str(m.grid.shape) + " does not match maps " + shape_str(s.maps.shape()));
    }
};

namespace ad {

/// y_c = mask . fft2c(S_c x) for planar x [2,H,W] -> [2,C,H,W].
template <typename T>
Var<T> forward_A(const Var<T>& x, const ForwardOperator<T>& op) {
    return apply_mask(fft2c(coil_expand(x, op.maps)), op.mask);
}

/// x = sum_c conj(S_c) ifft2c(mask . y_c) for planar y [2,C,H,W] -> [2,H,W].
template <typename T>
Var<T> adjoint_A(const Var<T>& y, const ForwardOperator<T>& op) {
    return coil_combine(ifft2c(apply_mask(y, op.mask)), op.maps);
}

/// z = x - eta * A^H (A x - y). The factor 2 of the exact gradient of
/// ||Ax - y||^2 is absorbed into eta.
template <typename T>
Var<T> data_consistency_step(const Var<T>& x, const Var<T>& y, const ForwardOperator<T>& op, const Var<T>& eta) {
    return sub(x, scale_by(adjoint_A(sub(forward_A(x, op), y), op), eta));
}

} // namespace ad

template <typename T>
ComplexTensor<T> forward_A(const ComplexTensor<T>& x, const SensitivityMaps<T>& maps, const SamplingMask& mask) {
    const ForwardOperator<T> op(maps, mask);
    return unpack_planar(ad::forward_A(Var<T>::constant(pack_planar(x)), op).value());
}

template <typename T>
ComplexTensor<T> adjoint_A(const ComplexTensor<T>& y, const SensitivityMaps<T>& maps, const SamplingMask& mask) {
    const ForwardOperator<T> op(maps, mask);
    return unpack_planar(ad::adjoint_A(Var<T>::constant(pack_planar(y)), op).value());
}

template <typename T>
ComplexTensor<T> data_consistency_step(const ComplexTensor<T>& x, const KSpaceSample<T>& s, double eta) {
    const ForwardOperator<T> op(s.maps, s.mask);
    auto z = ad::data_consistency_step(Var<T>::constant(pack_planar(x)), Var<T>::constant(pack_planar(s.y)), op,
                                       Var<T>::constant(Tensor<T>({1}, {static_cast<T>(eta)})));
    return unpack_planar(z.value());
}

// ---------------------------------------------------------------------------
// Generators

namespace detail {

/// Uniform integer in [0, n) from a 64-bit engine without library-specific
/// distribution code, so sequences are identical across standard libraries.
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do r = rng();
    while (r >= limit);
    return r % n;
}

inline double uniform01(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

/// Standard normal via Box-Muller on uniform01.
inline double normal01(std::mt19937_64& rng) {
    double u1;
    do u1 = uniform01(rng);
    while (u1 <= 0.0);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

} // namespace detail

/// Minimum-distance radius of the variable-density Poisson disc law at (y, x):
/// r0 * (1 + 2 * |p - c| / |corner - c|) with c the k-space center (H/2, W/2).
inline double poisson_radius(double r0, std::size_t H, std::size_t W, double y, double x) {
    const double cy = double(H / 2), cx = double(W / 2);
    const double dmax = std::hypot(std::max(cy, double(H) - 1 - cy), std::max(cx, double(W) - 1 - cx));
    const double d = std::hypot(y - cy, x - cx);
    return r0 * (1.0 + 2.0 * (dmax > 0 ? d / dmax : 0.0));
}

/// Top-left corner of the calibration rectangle centered on the k-space center.
inline std::pair<std::size_t, std::size_t> calib_origin(std::size_t H, std::size_t W, std::pair<std::size_t, std::size_t> calib) {
    return {H / 2 - calib.first / 2, W / 2 - calib.second / 2};
}

inline bool in_calib(std::size_t y, std::size_t x, std::size_t H, std::size_t W, std::pair<std::size_t, std::size_t> calib) {
    const auto [y0, x0] = calib_origin(H, W, calib);
    return y >= y0 && y < y0 + calib.first && x >= x0 && x < x0 + calib.second;
}

namespace detail {

// Dart throwing in a fixed candidate order. A candidate p is kept when every
// kept point q satisfies |p - q| >= min(r(p), r(q)); since that bound never
// exceeds r(p) only a window of radius r(p) needs scanning.
inline Tensor<double> throw_darts(std::size_t H, std::size_t W, double r0, std::pair<std::size_t, std::size_t> calib,
                                  const std::vector<std::size_t>& order, const std::vector<double>& radius_unit) {
    Tensor<double> grid({H, W});
    std::vector<char> kept(H * W, 0);
    std::vector<std::size_t> kept_list;
    auto conflicts = [&](std::size_t y, std::size_t x, long yy, long xx, double rp) {
        const double dist = std::hypot(double(yy - long(y)), double(xx - long(x)));
        return dist < std::min(rp, r0 * radius_unit[std::size_t(yy) * W + std::size_t(xx)]);
    };
    for (std::size_t idx : order) {
        const std::size_t y = idx / W, x = idx % W;
        const double rp = r0 * radius_unit[idx];
        const int win = static_cast<int>(std::ceil(rp));
        bool ok = true;
        // Same test either way; pick whichever of window and kept list is smaller.
        if ((2.0 * win + 1) * (2.0 * win + 1) > double(kept_list.size())) {
            for (std::size_t q : kept_list)
                if (std::abs(long(q / W) - long(y)) <= win && std::abs(long(q % W) - long(x)) <= win &&
                    conflicts(y, x, long(q / W), long(q % W), rp)) {
                    ok = false;
                    break;
                }
        } else {
            for (int dy = -win; dy <= win && ok; ++dy) {
                const long yy = long(y) + dy;
                if (yy < 0 || yy >= long(H)) continue;
                for (int dx = -win; dx <= win; ++dx) {
                    const long xx = long(x) + dx;
                    if (xx < 0 || xx >= long(W) || !kept[yy * W + xx]) continue;
                    if (conflicts(y, x, yy, xx, rp)) {
                        ok = false;
                        break;
                    }
                }
            }
        }
        if (ok) {
            kept[idx] = 1;
            kept_list.push_back(idx);
            grid[idx] = 1.0;
        }
    }
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            if (in_calib(y, x, H, W, calib)) grid[y * W + x] = 1.0;
    return grid;
}

} // namespace detail

/// Variable-density Poisson-disc undersampling mask with a fully sampled
/// calibration rectangle. The base radius is bisected until the achieved
/// acceleration is within +-10% of the target. Pure in (H, W, target, calib, seed).
inline SamplingMask poisson_disc_mask(std::size_t H, std::size_t W, double target_accel,
                                      std::pair<std::size_t, std::size_t> calib, std::uint64_t seed) {
    if (H == 0 || W == 0) throw DimensionError("mask grid must be non-empty");
    if (!(target_accel >= 1.0)) throw DomainError("target acceleration must be >= 1, got " + std::to_string(target_accel));
    if (calib.first > H || calib.second > W)
        throw ConfigError("calibration region " + std::to_string(calib.first) + "x" + std::to_string(calib.second) +
                          " does not fit a " + std::to_string(H) + "x" + std::to_string(W) + " grid");
    SamplingMask m;
    m.calib = calib;
    m.seed = seed;
    if (target_accel == 1.0) {
        m.grid = Tensor<double>({H, W}, 1.0);
        m.recount();
        return m;
    }

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < H * W; ++i)
        if (!in_calib(i / W, i % W, H, W, calib)) order.push_back(i);
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[detail::uniform_index(rng, i)]);
    std::vector<double> unit(H * W);
    for (std::size_t i = 0; i < H * W; ++i) unit[i] = poisson_radius(1.0, H, W, double(i / W), double(i % W));

    double lo = 0.0, hi = double(std::max(H, W));
    double best_err = std::numeric_limits<double>::infinity(), best_acc = 1.0;
    for (int iter = 0; iter < 60; ++iter) {
        const double r0 = 0.5 * (lo + hi);
        m.grid = detail::throw_darts(H, W, r0, calib, order, unit);
        m.recount();
        m.base_radius = r0;
        const double rel = std::abs(m.acceleration - target_accel) / target_accel;
        if (rel < best_err) {
            best_err = rel;
            best_acc = m.acceleration;
        }
        if (rel <= 0.10) return m;
        (m.acceleration < target_accel ? lo : hi) = r0;
    }
    throw GenerationError("poisson_disc_mask: target acceleration " + std::to_string(target_accel) + " not reached", best_acc);
}

/// Rescales every pixel so that sum_c |S_c|^2 == 1 (pixels where all coils vanish stay zero).
template <typename T>
void normalize_maps(SensitivityMaps<T>& s) {
    const std::size_t C = s.maps.shape().at(0), HW = s.maps.size() / C;
    for (std::size_t p = 0; p < HW; ++p) {
        double ss = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const double r = s.maps.re[c * HW + p], i = s.maps.im[c * HW + p];
            ss += r * r + i * i;
        }
        if (ss <= 0) continue;
        const double inv = 1.0 / std::sqrt(ss);
        for (std::size_t c = 0; c < C; ++c) {
            s.maps.re[c * HW + p] = static_cast<T>(s.maps.re[c * HW + p] * inv);
            s.maps.im[c * HW + p] = static_cast<T>(s.maps.im[c * HW + p] * inv);
        }
    }
}

/// Smooth synthetic coil sensitivities: Gaussian magnitude bumps centered on a
/// ring near the field-of-view border with slowly varying phase, normalized so
/// that the per-pixel sum over coils of |S_c|^2 is 1.
inline SensitivityMaps<double> synth_sensitivity_maps(std::size_t H, std::size_t W, std::size_t ncoils, double smoothness,
                                                      std::uint64_t seed) {
    if (ncoils < 1) throw DomainError("ncoils must be >= 1");
    if (!(smoothness > 0)) throw DomainError("smoothness must be positive");
    std::mt19937_64 rng(seed);
    const double cy = (double(H) - 1) / 2, cx = (double(W) - 1) / 2;
    const double width = smoothness * double(std::max(H, W));
    const double rot = 2.0 * std::numbers::pi * detail::uniform01(rng);
    ComplexTensor<double> maps({ncoils, H, W});
    for (std::size_t c = 0; c < ncoils; ++c) {
        const double theta = rot + 2.0 * std::numbers::pi * double(c) / double(ncoils);
        const double py = cy + 0.5 * double(H) * std::sin(theta);
        const double px = cx + 0.5 * double(W) * std::cos(theta);
        const double phase0 = 2.0 * std::numbers::pi * detail::uniform01(rng);
        const double gy = std::numbers::pi * (detail::uniform01(rng) - 0.5);
        const double gx = std::numbers::pi * (detail::uniform01(rng) - 0.5);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double d2 = (double(y) - py) * (double(y) - py) + (double(x) - px) * (double(x) - px);
                const double mag = std::exp(-d2 / (2 * width * width));
                const double ph = phase0 + gy * (double(y) - cy) / double(H) + gx * (double(x) - cx) / double(W);
                maps.re[(c * H + y) * W + x] = mag * std::cos(ph);
                maps.im[(c * H + y) * W + x] = mag * std::sin(ph);
            }
    }
    SensitivityMaps<double> out{std::move(maps)};
    normalize_maps(out);
    return out;
}

/// y = mask . (fft2c(S_c x*) + eps), eps circular complex Gaussian with
/// E|eps|^2 = sigma^2. Noise is drawn at every location in a fixed order and
/// then masked, so the noise stream does not depend on the mask.
inline KSpaceSample<double> simulate_sample(const ComplexTensor<double>& target, const SensitivityMaps<double>& maps,
                                            const SamplingMask& mask, double noise_sigma, std::uint64_t seed) {
    if (!(noise_sigma >= 0)) throw DomainError("noise_sigma must be >= 0");
    const ForwardOperator<double> op(maps, mask);
    require_shape(target.shape(), {maps.maps.shape()[1], maps.maps.shape()[2]}, "simulate_sample target");
    Tensor<double> k = equirecon::fft2c(ad::coil_expand(Var<double>::constant(pack_planar(target)), op.maps).value());
    if (noise_sigma > 0) {
        std::mt19937_64 rng(seed);
        const double comp = noise_sigma / std::sqrt(2.0);
        for (auto& v : k.data) v += comp * detail::normal01(rng);
    }
    const std::size_t HW = mask.grid.size();
    for (std::size_t i = 0; i < k.size(); ++i) k[i] *= mask.grid[i % HW];
    KSpaceSample<double> s;
    s.y = unpack_planar(k);
    s.maps = maps;
    s.mask = mask;
    s.target = target;
    s.noise_sigma = noise_sigma;
    s.seed = seed;
    return s;
}

} // namespace equirecon
