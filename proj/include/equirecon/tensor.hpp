#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace equirecon {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

inline void require_shape(const Shape& got, const Shape& want, const char* what) {
    if (got != want)
        throw DimensionError(std::string(what) + ": expected shape " + shape_str(want) + ", got " +
                             shape_str(got));
}

/// Dense row-major real array.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel(shape))
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t ndim() const noexcept { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    T& operator[](std::size_t i) noexcept { return data[i]; }
    const T& operator[](std::size_t i) const noexcept { return data[i]; }

    std::span<T> span() noexcept { return data; }
    std::span<const T> span() const noexcept { return data; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const noexcept {
        for (T v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Complex array stored as separate real and imaginary planes of identical shape.
template <typename T>
struct ComplexTensor {
    Tensor<T> re;
    Tensor<T> im;

    ComplexTensor() = default;
    explicit ComplexTensor(const Shape& s) : re(s), im(s) {}
    ComplexTensor(Tensor<T> r, Tensor<T> i) : re(std::move(r)), im(std::move(i)) {
        if (re.shape != im.shape) throw DimensionError("complex tensor re/im shape mismatch");
    }

    const Shape& shape() const noexcept { return re.shape; }
    std::size_t size() const noexcept { return re.size(); }

    template <typename U>
    ComplexTensor<U> cast() const {
        return {re.template cast<U>(), im.template cast<U>()};
    }

    bool all_finite() const noexcept { return re.all_finite() && im.all_finite(); }

    friend bool operator==(const ComplexTensor&, const ComplexTensor&) = default;
};

/// Planar packing: shape [2, ...] with plane 0 = re, plane 1 = im.
template <typename T>
Tensor<T> pack_planar(const ComplexTensor<T>& z) {
    Shape s{2};
    s.insert(s.end(), z.shape().begin(), z.shape().end());
    Tensor<T> out(s);
    std::copy(z.re.data.begin(), z.re.data.end(), out.data.begin());
    std::copy(z.im.data.begin(), z.im.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(z.size()));
    return out;
}

template <typename T>
ComplexTensor<T> unpack_planar(const Tensor<T>& t) {
    if (t.ndim() < 1 || t.shape[0] != 2)
        throw DimensionError("planar complex tensor needs leading dimension 2, got " + shape_str(t.shape));
    Shape s(t.shape.begin() + 1, t.shape.end());
    ComplexTensor<T> z(s);
    const std::size_t n = z.size();
    std::copy(t.data.begin(), t.data.begin() + static_cast<std::ptrdiff_t>(n), z.re.data.begin());
    std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(n), t.data.end(), z.im.data.begin());
    return z;
}

template <typename T>
double l2_norm_sq(const ComplexTensor<T>& z) {
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i)
        s += double(z.re[i]) * z.re[i] + double(z.im[i]) * z.im[i];
    return s;
}

template <typename T>
double l2_norm_sq(const Tensor<T>& t) {
    double s = 0;
    for (T v : t.data) s += double(v) * v;
    return s;
}

/// Relative l2 distance ||a-b|| / ||b||.
template <typename T>
double relative_l2(const ComplexTensor<T>& a, const ComplexTensor<T>& b) {
    require_shape(a.shape(), b.shape(), "relative_l2");
    double num = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double dr = double(a.re[i]) - b.re[i], di = double(a.im[i]) - b.im[i];
        num += dr * dr + di * di;
    }
    return std::sqrt(num / l2_norm_sq(b));
}

template <typename T>
double relative_l2(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.shape, b.shape, "relative_l2");
    double num = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - b[i];
        num += d * d;
    }
    return std::sqrt(num / l2_norm_sq(b));
}

// splitmix64 finalizer; used to derive independent per-item seeds.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) {
    std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace equirecon
