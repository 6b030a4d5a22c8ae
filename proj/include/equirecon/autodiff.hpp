#pragma once

// Reverse-mode differentiation over dense real tensors.
//
// A Var is a shared handle to a graph node. Leaves created with Var::param
// accumulate gradients; Var::constant leaves never do. Every operation whose
// inputs carry requires_grad records its parents and a closure that pushes
// the node's gradient back to them. backward() runs those closures in
// reverse topological order and then releases the interior of the graph.

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "kernels.hpp"
#include "tensor.hpp"

namespace equirecon {

template <typename T>
struct Node {
    Tensor<T> value;
    std::vector<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    bool is_leaf = true;
    bool consumed = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;

    static Var constant(Tensor<T> value) {
        Var v;
        v.node_ = std::make_shared<Node<T>>();
        v.node_->value = std::move(value);
        return v;
    }

    static Var param(Tensor<T> value) {
        Var v = constant(std::move(value));
        v.node_->requires_grad = true;
        return v;
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    /// Gradient as a tensor (zeros when nothing has flowed in yet).
    Tensor<T> grad() const {
        if (node_->grad.empty()) return Tensor<T>(shape());
        return Tensor<T>(shape(), node_->grad);
    }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& ptr() const { return node_; }

    /// Builds a result node. When no input requires a gradient the backward
    /// closure is dropped and the result is a constant.
    static Var make(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node<T>&)> fn) {
        Var out = constant(std::move(value));
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (!any) return out;
        out.node_->requires_grad = true;
        out.node_->is_leaf = false;
        for (auto& in : inputs) out.node_->parents.push_back(in.node_);
        out.node_->backward_fn = std::move(fn);
        return out;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Reverse pass from a scalar loss. Leaves keep their accumulated gradient;
/// interior nodes are released and the loss is marked consumed.
template <typename T>
void backward(const Var<T>& loss) {
    if (!loss.defined()) throw StateError("backward on an undefined value");
    if (loss.node()->consumed) throw StateError("backward called on an already consumed graph");
    if (loss.size() != 1) throw DimensionError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw StateError("loss does not depend on any differentiable leaf");

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                if (p->consumed) throw StateError("graph contains a consumed node");
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->is_leaf) continue;
        if (!n->grad.empty() && n->backward_fn) n->backward_fn(*n);
    }
    for (Node<T>* n : order) {
        if (n->is_leaf) continue;
        n->backward_fn = nullptr;
        n->parents.clear();
        n->grad.clear();
        n->grad.shrink_to_fit();
        n->consumed = true;
    }
}

namespace ad {

namespace detail {
template <typename T>
std::vector<T>& gbuf(Node<T>& parent_of, std::size_t i) {
    return parent_of.parents[i]->grad_buffer();
}
template <typename T>
bool wants(Node<T>& n, std::size_t i) {
    return n.parents[i]->requires_grad;
}
} // namespace detail

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    if (numel(shape) != x.size())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor<T> v(std::move(shape), x.value().data);
    return Var<T>::make(std::move(v), {x}, [](Node<T>& n) {
        auto& g = detail::gbuf(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_shape(b.shape(), a.shape(), "add");
    Tensor<T> v(a.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
    return Var<T>::make(std::move(v), {a, b}, [](Node<T>& n) {
        for (std::size_t p = 0; p < 2; ++p)
            if (detail::wants(n, p)) {
                auto& g = detail::gbuf(n, p);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
            }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_shape(b.shape(), a.shape(), "sub");
    Tensor<T> v(a.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
    return Var<T>::make(std::move(v), {a, b}, [](Node<T>& n) {
        if (detail::wants(n, 0)) {
            auto& g = detail::gbuf(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (detail::wants(n, 1)) {
            auto& g = detail::gbuf(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

/// Elementwise product of two same-shape values.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_shape(b.shape(), a.shape(), "mul");
    Tensor<T> v(a.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
    return Var<T>::make(std::move(v), {a, b}, [](Node<T>& n) {
        const auto& av = n.parents[0]->value;
        const auto& bv = n.parents[1]->value;
        if (detail::wants(n, 0)) {
            auto& g = detail::gbuf(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (detail::wants(n, 1)) {
            auto& g = detail::gbuf(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
    Tensor<T> v(x.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = c * x.value()[i];
    return Var<T>::make(std::move(v), {x}, [c](Node<T>& n) {
        auto& g = detail::gbuf(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
    });
}

/// x multiplied by a single-element value s (e.g. a learnable step size).
template <typename T>
Var<T> scale_by(const Var<T>& x, const Var<T>& s) {
    if (s.size() != 1) throw DimensionError("scale_by needs a single-element factor, got " + shape_str(s.shape()));
    const T c = s.value()[0];
    Tensor<T> v(x.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = c * x.value()[i];
    return Var<T>::make(std::move(v), {x, s}, [](Node<T>& n) {
        const auto& xv = n.parents[0]->value;
        const T c = n.parents[1]->value[0];
        if (detail::wants(n, 0)) {
            auto& g = detail::gbuf(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
        }
        if (detail::wants(n, 1)) {
            T acc = 0;
            for (std::size_t i = 0; i < xv.size(); ++i) acc += n.grad[i] * xv[i];
            detail::gbuf(n, 1)[0] += acc;
        }
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> v(x.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
    return Var<T>::make(std::move(v), {x}, [](Node<T>& n) {
        const auto& xv = n.parents[0]->value;
        auto& g = detail::gbuf(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > T(0)) g[i] += n.grad[i];
    });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T acc = 0;
    for (T v : x.value().data) acc += v;
    return Var<T>::make(Tensor<T>({1}, {acc}), {x}, [](Node<T>& n) {
        auto& g = detail::gbuf(n, 0);
        const T gv = n.grad[0];
        for (auto& gi : g) gi += gv;
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Sum of equally shaped values (e.g. per-sample losses).
template <typename T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw DimensionError("add_n of an empty list");
    Tensor<T> v(xs[0].shape());
    for (const auto& x : xs) {
        require_shape(x.shape(), v.shape, "add_n");
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += x.value()[i];
    }
    return Var<T>::make(std::move(v), xs, [](Node<T>& n) {
        for (std::size_t p = 0; p < n.parents.size(); ++p)
            if (detail::wants(n, p)) {
                auto& g = detail::gbuf(n, p);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
            }
    });
}

/// Adds b[c] to every element of channel c of x, where x is [N, C, ...].
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
    if (x.value().ndim() < 2 || b.size() != x.shape()[1])
        throw DimensionError("add_channel_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
    const std::size_t N = x.shape()[0], C = x.shape()[1], inner = x.size() / (N * C);
    Tensor<T> v = x.value();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            T* p = v.data.data() + (n * C + c) * inner;
            const T bc = b.value()[c];
            for (std::size_t i = 0; i < inner; ++i) p[i] += bc;
        }
    return Var<T>::make(std::move(v), {x, b}, [N, C, inner](Node<T>& n) {
        if (detail::wants(n, 0)) {
            auto& g = detail::gbuf(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (detail::wants(n, 1)) {
            auto& g = detail::gbuf(n, 1);
            for (std::size_t b = 0; b < N; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const T* p = n.grad.data() + (b * C + c) * inner;
                    T acc = 0;
                    for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                    g[c] += acc;
                }
        }
    });
}

/// "Same" 2D cross-correlation, stride 1: input [N,Cin,H,W], kernel [Cout,Cin,k,k].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, Padding pad = Padding::zero) {
    const Shape& is = input.shape();
    const Shape& ks = kernel.shape();
    if (is.size() != 4 || ks.size() != 4)
        throw DimensionError("conv2d expects 4-d input and kernel, got " + shape_str(is) + " and " + shape_str(ks));
    if (ks[1] != is[1])
        throw DimensionError("conv2d channel mismatch: input " + shape_str(is) + ", kernel " + shape_str(ks));
    if (ks[2] != ks[3] || ks[2] % 2 == 0) throw DimensionError("conv2d needs an odd square kernel, got " + shape_str(ks));
    const std::size_t N = is[0], Cin = is[1], H = is[2], W = is[3], Cout = ks[0], k = ks[2];
    const std::size_t plane = H * W, kk = k * k;
    Tensor<T> out({N, Cout, H, W});
    const T* x = input.value().data.data();
    const T* w = kernel.value().data.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t ci = 0; ci < Cin; ++ci)
                kernels::correlate_plane(x + (n * Cin + ci) * plane, w + (co * Cin + ci) * kk, int(k), int(H), int(W), pad,
                                         out.data.data() + (n * Cout + co) * plane);
    return Var<T>::make(std::move(out), {input, kernel}, [=](Node<T>& nd) {
        const T* xv = nd.parents[0]->value.data.data();
        const T* wv = nd.parents[1]->value.data.data();
        const T* g = nd.grad.data();
        if (detail::wants(nd, 0)) {
            T* gx = detail::gbuf(nd, 0).data();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        kernels::correlate_plane_adj_input(g + (n * Cout + co) * plane, wv + (co * Cin + ci) * kk, int(k),
                                                           int(H), int(W), pad, gx + (n * Cin + ci) * plane);
        }
        if (detail::wants(nd, 1)) {
            T* gw = detail::gbuf(nd, 1).data();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        kernels::correlate_plane_adj_taps(g + (n * Cout + co) * plane, xv + (n * Cin + ci) * plane, int(k),
                                                          int(H), int(W), pad, gw + (co * Cin + ci) * kk);
        }
    });
}

} // namespace ad
} // namespace equirecon
