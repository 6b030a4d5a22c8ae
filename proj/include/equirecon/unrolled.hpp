#pragma once

// Reconstruction algorithms: the classical l1 proximal gradient solver used as
// an oracle, and unrolled networks that alternate data-consistency steps with
// learned residual CNN blocks.

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mri_forward.hpp"
#include "steerable.hpp"

namespace equirecon {

enum class Variant { vanilla, scale_eq };

inline std::string to_string(Variant v) { return v == Variant::vanilla ? "vanilla" : "scale_eq"; }

inline Variant parse_variant(const std::string& s) {
    if (s == "vanilla") return Variant::vanilla;
    if (s == "scale_eq") return Variant::scale_eq;
    throw ConfigError("unknown model variant '" + s + "' (expected vanilla or scale_eq)");
}

enum class EtaInit { zero, value };

/// Architecture of an unrolled network. Steerable fields only matter for the
/// scale_eq variant.
struct ModelSpec {
    Variant variant = Variant::vanilla;
    std::size_t unrolls = 5;
    std::size_t channels = 96;
    std::size_t kernel_size = 3;           // vanilla convolutions
    std::size_t steer_kernel_size = 5;     // steerable windows
    std::size_t basis_order = 3;           // B
    double scale_factor = 0.9;             // a
    std::size_t n_scales = 3;
    std::size_t interaction = 1;
    double basis_sigma = 0.0;              // 0 selects default_basis_sigma(k)
    EtaInit eta_init = EtaInit::value;
    double eta_value = 0.1;
    Padding padding = Padding::zero;

    double sigma() const { return basis_sigma > 0 ? basis_sigma : default_basis_sigma(steer_kernel_size); }
    double initial_eta() const { return eta_init == EtaInit::zero ? 0.0 : eta_value; }
};

/// Closed-form trainable parameter count of one proximal block.
inline std::size_t block_parameter_count(const ModelSpec& s) {
    if (s.variant == Variant::vanilla) return 4 * s.channels * s.kernel_size * s.kernel_size + s.channels + 2;
    return 4 * s.channels * s.basis_order + s.channels + 2;
}

/// Closed-form trainable parameter count: K blocks plus K step sizes.
inline std::size_t parameter_count(const ModelSpec& s) { return s.unrolls * (block_parameter_count(s) + 1); }

template <typename T>
struct ProximalBlock {
    Variant variant = Variant::vanilla;
    Padding padding = Padding::zero;
    // vanilla body
    Var<T> w1, b1, w2, b2;
    // scale_eq body
    ScaleEquivConvLayer<T> lift, group;

    /// body(z) for planar z [2, H, W]; returns [2, H, W].
    Var<T> body(const Var<T>& z) const {
        const Shape& s = z.shape();
        if (s.size() != 3 || s[0] != 2) throw DimensionError("proximal block expects [2,H,W], got " + shape_str(s));
        auto x = ad::reshape(z, {1, 2, s[1], s[2]});
        Var<T> out;
        if (variant == Variant::vanilla) {
            auto h = ad::relu(ad::add_channel_bias(ad::conv2d(x, w1, padding), b1));
            out = ad::add_channel_bias(ad::conv2d(h, w2, padding), b2);
        } else {
            auto h = lift_conv(x, lift, padding);
            h.data = ad::relu(h.data);
            out = scale_project(group_conv(h, group, padding));
        }
        return ad::reshape(out, s);
    }

    Var<T> apply(const Var<T>& z) const { return ad::add(z, body(z)); }

    std::vector<std::pair<std::string, Var<T>>> named_parameters() const {
        if (variant == Variant::vanilla) return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
        return {{"lift_v", lift.v}, {"lift_bias", lift.bias}, {"group_v", group.v}, {"group_bias", group.bias}};
    }
};

template <typename T>
struct UnrolledModel {
    ModelSpec spec;
    std::shared_ptr<const SteerableBasis> basis;  // null for vanilla
    std::vector<ProximalBlock<T>> blocks;
    std::vector<Var<T>> etas;  // each [1]

    std::size_t unrolls() const { return blocks.size(); }

    /// Stable names ("block0.w1", ..., "eta0", ...) in a fixed order.
    std::vector<std::pair<std::string, Var<T>>> named_parameters() const {
        std::vector<std::pair<std::string, Var<T>>> out;
        for (std::size_t k = 0; k < blocks.size(); ++k)
            for (auto& [n, v] : blocks[k].named_parameters()) out.emplace_back("block" + std::to_string(k) + "." + n, v);
        for (std::size_t k = 0; k < etas.size(); ++k) out.emplace_back("eta" + std::to_string(k), etas[k]);
        return out;
    }

    std::vector<Var<T>> parameters() const {
        std::vector<Var<T>> out;
        for (auto& [n, v] : named_parameters()) out.push_back(v);
        return out;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.zero_grad();
    }
};

namespace detail {
template <typename T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, std::uint64_t seed) {
    Tensor<T> t(std::move(shape));
    std::mt19937_64 rng(seed);
    const double std = std::sqrt(2.0 / double(fan_in));
    for (auto& v : t.data) v = static_cast<T>(std * normal01(rng));
    return t;
}
} // namespace detail

/// Fresh model: Kaiming-normal first layer, zero final layer and biases, so an
/// untrained network is exactly the cascade of data-consistency steps.
template <typename T>
UnrolledModel<T> init_model(const ModelSpec& spec, std::uint64_t seed) {
    if (spec.channels < 1) throw ConfigError("channels must be >= 1");
    if (spec.variant == Variant::vanilla && spec.kernel_size % 2 == 0)
        throw ConfigError("kernel_size must be odd, got " + std::to_string(spec.kernel_size));
    if (!std::isfinite(spec.initial_eta())) throw ConfigError("eta init must be finite");
    UnrolledModel<T> m;
    m.spec = spec;
    if (spec.variant == Variant::scale_eq)
        m.basis = std::make_shared<const SteerableBasis>(hermite_gaussian_basis(
            spec.steer_kernel_size, spec.basis_order, spec.sigma(), spec.scale_factor, spec.n_scales));
    const std::size_t C = spec.channels;
    for (std::size_t k = 0; k < spec.unrolls; ++k) {
        ProximalBlock<T> b;
        b.variant = spec.variant;
        b.padding = spec.padding;
        const std::uint64_t s = mix_seed(seed, k);
        if (spec.variant == Variant::vanilla) {
            const std::size_t ks = spec.kernel_size;
            b.w1 = Var<T>::param(detail::kaiming<T>({C, 2, ks, ks}, 2 * ks * ks, s));
            b.b1 = Var<T>::param(Tensor<T>({C}));
            b.w2 = Var<T>::param(Tensor<T>({2, C, ks, ks}));
            b.b2 = Var<T>::param(Tensor<T>({2}));
        } else {
            const std::size_t B = spec.basis_order;
            b.lift.v = Var<T>::param(detail::kaiming<T>({C, 2, B}, 2 * B, s));
            b.lift.bias = Var<T>::param(Tensor<T>({C}));
            b.lift.basis = m.basis;
            b.group.v = Var<T>::param(Tensor<T>({2, C, B}));
            b.group.bias = Var<T>::param(Tensor<T>({2}));
            b.group.basis = m.basis;
            b.group.interaction = spec.interaction;
        }
        m.blocks.push_back(std::move(b));
        m.etas.push_back(Var<T>::param(Tensor<T>({1}, {static_cast<T>(spec.initial_eta())})));
    }
    return m;
}

template <typename T>
struct ReconResult {
    ComplexTensor<T> image;
    std::vector<ComplexTensor<T>> per_unroll;  // filled when requested
    std::string model_id;
    std::string sample_id;
};

template <typename T>
ComplexTensor<T> zero_filled_init(const KSpaceSample<T>& s) {
    return adjoint_A(s.y, s.maps, s.mask);
}

namespace ad {

/// Differentiable unrolled pass from planar x0 and y with a prepared operator.
/// `trace`, when given, receives every intermediate x^(k).
template <typename T>
Var<T> unrolled_forward(const Var<T>& x0, const Var<T>& y, const ForwardOperator<T>& op, const UnrolledModel<T>& model,
                        std::vector<Var<T>>* trace = nullptr) {
    Var<T> x = x0;
    for (std::size_t k = 0; k < model.unrolls(); ++k) {
        auto z = data_consistency_step(x, y, op, model.etas[k]);
        x = model.blocks[k].apply(z);
        if (!x.value().all_finite()) throw NumericError("non-finite activation in unroll " + std::to_string(k + 1));
        if (trace) trace->push_back(x);
    }
    return x;
}

} // namespace ad

template <typename T>
ReconResult<T> unrolled_forward(const KSpaceSample<T>& s, const UnrolledModel<T>& model, bool keep_intermediates = false,
                                const std::string& model_id = "") {
    const ForwardOperator<T> op(s.maps, s.mask);
    auto y = Var<T>::constant(pack_planar(s.y));
    auto x0 = ad::adjoint_A(y, op);
    std::vector<Var<T>> trace;
    auto x = ad::unrolled_forward(x0, y, op, model, keep_intermediates ? &trace : nullptr);
    ReconResult<T> r;
    r.image = unpack_planar(x.value());
    for (auto& t : trace) r.per_unroll.push_back(unpack_planar(t.value()));
    r.model_id = model_id;
    r.sample_id = s.id;
    return r;
}

/// Mean smoothed complex magnitude error (delta = 1e-8).
template <typename T>
Var<T> complex_l1_loss(const Var<T>& xhat, const ComplexTensor<T>& xstar) {
    return ad::complex_l1(xhat, pack_planar(xstar));
}

/// Shrinks each pixel's magnitude by tau (floored at zero), keeping its phase.
template <typename T>
ComplexTensor<T> soft_threshold(const ComplexTensor<T>& x, double tau) {
    if (!(tau >= 0)) throw DomainError("soft_threshold: tau must be >= 0");
    ComplexTensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = x.re[i], im = x.im[i], mag = std::hypot(r, im);
        if (mag <= tau) continue;
        const double f = (mag - tau) / mag;
        out.re[i] = static_cast<T>(r * f);
        out.im[i] = static_cast<T>(im * f);
    }
    return out;
}

template <typename T>
struct PgdResult {
    ReconResult<T> recon;
    std::vector<double> objective;  // after each iteration
    double initial_objective = 0;
};

/// ||Ax - y||^2 + lambda * sum |x|.
template <typename T>
double l1_objective(const ComplexTensor<T>& x, const KSpaceSample<T>& s, double lambda) {
    auto r = forward_A(x, s.maps, s.mask);
    double f = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        const double dr = double(r.re[i]) - double(s.y.re[i]), di = double(r.im[i]) - double(s.y.im[i]);
        f += dr * dr + di * di;
    }
    double l1 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) l1 += std::hypot(double(x.re[i]), double(x.im[i]));
    return f + lambda * l1;
}

/// Proximal gradient descent on ||Ax - y||^2 + lambda ||x||_1 in the image
/// domain, started from the zero-filled image. The gradient step uses the
/// exact factor 2, i.e. x <- soft(x - 2 step A^H(Ax - y), step lambda).
template <typename T>
PgdResult<T> pgd_l1_reference(const KSpaceSample<T>& s, double lambda, std::size_t iters, double step) {
    if (!(step > 0)) throw DomainError("pgd step must be > 0");
    if (iters < 1) throw DomainError("pgd needs at least one iteration");
    if (!(lambda >= 0)) throw DomainError("lambda must be >= 0");
    PgdResult<T> out;
    auto x = zero_filled_init(s);
    out.initial_objective = l1_objective(x, s, lambda);
    for (std::size_t it = 0; it < iters; ++it) {
        x = soft_threshold(data_consistency_step(x, s, 2.0 * step), step * lambda);
        const double obj = l1_objective(x, s, lambda);
        out.objective.push_back(obj);
        if (!std::isfinite(obj) || obj > 10.0 * out.initial_objective)
            throw NumericError("pgd diverged at iteration " + std::to_string(it + 1) + " (objective " + std::to_string(obj) + ")");
    }
    out.recon.image = std::move(x);
    out.recon.model_id = "pgd_l1";
    out.recon.sample_id = s.id;
    return out;
}

/// Channel width for `variant` whose total parameter count is closest to the
/// reference's (ties go to the smaller width). Counts must agree within 5%.
inline std::size_t match_parameter_budget(const ModelSpec& reference, Variant variant, std::size_t max_width = 8192) {
    const double target = double(parameter_count(reference));
    ModelSpec cand = reference;
    cand.variant = variant;
    std::size_t best = 0;
    double best_diff = std::numeric_limits<double>::infinity();
    for (std::size_t w = 1; w <= max_width; ++w) {
        cand.channels = w;
        const double d = std::abs(double(parameter_count(cand)) - target);
        if (d < best_diff) {
            best_diff = d;
            best = w;
        }
    }
    if (best_diff / target >= 0.05) {
        std::string msg = "no " + to_string(variant) + " width within 5% of " + std::to_string(std::size_t(target)) +
                          " parameters; nearest candidates:";
        for (std::size_t w : {best > 1 ? best - 1 : best, best, best + 1}) {
            cand.channels = w;
            msg += " width " + std::to_string(w) + " -> " + std::to_string(parameter_count(cand));
        }
        throw ConfigError(msg);
    }
    return best;
}

} // namespace equirecon
