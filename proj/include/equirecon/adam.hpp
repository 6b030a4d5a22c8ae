#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "autodiff.hpp"

namespace equirecon {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::uint64_t t = 0;
};

/// One bias-corrected Adam update over `params` using their accumulated
/// gradients. Rejects the whole step (nothing is modified) when any gradient
/// is non-finite.
template <typename T>
void adam_step(std::vector<Var<T>>& params, AdamState<T>& state, const AdamOptions& opt) {
    for (const auto& p : params)
        if (p.has_grad())
            for (T g : p.node()->grad)
                if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");

    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.shape());
            state.v.emplace_back(p.shape());
        }
    }
    if (state.m.size() != params.size()) throw StateError("adam_step: optimizer state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require_shape(state.m[i].shape, params[i].shape(), "adam first moment");
        require_shape(state.v[i].shape, params[i].shape(), "adam second moment");
    }

    state.t += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(opt.beta2, double(state.t));
    const T b1 = T(opt.beta1), b2 = T(opt.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].mutable_value().data;
        auto& m = state.m[i].data;
        auto& v = state.v[i].data;
        const bool has = params[i].has_grad();
        const auto& g = params[i].node()->grad;
        for (std::size_t j = 0; j < w.size(); ++j) {
            const T gj = has ? g[j] : T(0);
            m[j] = b1 * m[j] + (T(1) - b1) * gj;
            v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
            const double mhat = double(m[j]) / bc1;
            const double vhat = double(v[j]) / bc2;
            w[j] = static_cast<T>(double(w[j]) - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
        }
    }
}

} // namespace equirecon
