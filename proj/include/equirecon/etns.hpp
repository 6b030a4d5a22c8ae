#pragma once

// ETNS binary tensor files.
//
//   offset 0  magic "ETNS"
//          4  version (u8, = 1)
//          5  dtype   (u8): 1 real32, 2 real64, 3 complex64, 4 complex128
//          6  ndim    (u8)
//          7  ndim x u32 little-endian dims
//          .. row-major little-endian payload; complex values interleave re, im
//
// complex128 is an extension of the three base codes so that 64-bit complex
// data round-trips bitwise.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace equirecon::etns {

enum class DType : std::uint8_t { real32 = 1, real64 = 2, complex64 = 3, complex128 = 4 };

inline bool is_complex(DType d) { return d == DType::complex64 || d == DType::complex128; }
inline std::size_t scalar_bytes(DType d) { return (d == DType::real32 || d == DType::complex64) ? 4 : 8; }

/// Decoded file contents, widened to double.
struct Array {
    DType dtype = DType::real64;
    Shape shape;
    std::vector<double> re;
    std::vector<double> im;  // empty for real dtypes

    template <typename T>
    Tensor<T> to_tensor() const {
        if (is_complex(dtype)) throw ValidationError("expected a real ETNS tensor, found a complex one");
        Tensor<T> t(shape);
        for (std::size_t i = 0; i < re.size(); ++i) t[i] = static_cast<T>(re[i]);
        return t;
    }

    template <typename T>
    ComplexTensor<T> to_complex() const {
        ComplexTensor<T> z(shape);
        for (std::size_t i = 0; i < re.size(); ++i) {
            z.re[i] = static_cast<T>(re[i]);
            z.im[i] = is_complex(dtype) ? static_cast<T>(im[i]) : T(0);
        }
        return z;
    }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "ETNS I/O assumes a little-endian host");

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename S>
void put_scalar(std::vector<std::uint8_t>& out, S v) {
    std::uint8_t b[sizeof(S)];
    std::memcpy(b, &v, sizeof(S));
    out.insert(out.end(), b, b + sizeof(S));
}

inline std::vector<std::uint8_t> header(DType d, const Shape& shape) {
    if (shape.size() > 255) throw DimensionError("ETNS supports at most 255 dimensions");
    std::vector<std::uint8_t> out{'E', 'T', 'N', 'S', 1, static_cast<std::uint8_t>(d), static_cast<std::uint8_t>(shape.size())};
    for (auto s : shape) {
        if (s > 0xFFFFFFFFull) throw DimensionError("ETNS dimension exceeds u32");
        put_u32(out, static_cast<std::uint32_t>(s));
    }
    return out;
}

} // namespace detail

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t) {
    constexpr DType d = sizeof(T) == 4 ? DType::real32 : DType::real64;
    auto out = detail::header(d, t.shape);
    out.reserve(out.size() + t.size() * sizeof(T));
    for (T v : t.data) detail::put_scalar(out, v);
    return out;
}

template <typename T>
std::vector<std::uint8_t> encode(const ComplexTensor<T>& z) {
    constexpr DType d = sizeof(T) == 4 ? DType::complex64 : DType::complex128;
    auto out = detail::header(d, z.shape());
    out.reserve(out.size() + 2 * z.size() * sizeof(T));
    for (std::size_t i = 0; i < z.size(); ++i) {
        detail::put_scalar(out, z.re[i]);
        detail::put_scalar(out, z.im[i]);
    }
    return out;
}

inline Array decode(const std::vector<std::uint8_t>& buf) {
    if (buf.size() < 4) throw ParseError("ETNS: file too short for magic", buf.size());
    if (std::memcmp(buf.data(), "ETNS", 4) != 0) throw ParseError("ETNS: bad magic", 0);
    if (buf.size() < 7) throw ParseError("ETNS: truncated header", buf.size());
    if (buf[4] != 1) throw ParseError("ETNS: unsupported version " + std::to_string(buf[4]), 4);
    if (buf[5] < 1 || buf[5] > 4) throw ParseError("ETNS: unknown dtype code " + std::to_string(buf[5]), 5);
    Array a;
    a.dtype = static_cast<DType>(buf[5]);
    const std::size_t ndim = buf[6];
    std::size_t off = 7;
    for (std::size_t i = 0; i < ndim; ++i) {
        if (off + 4 > buf.size()) throw ParseError("ETNS: truncated dimension list", off);
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= std::uint32_t(buf[off + b]) << (8 * b);
        a.shape.push_back(v);
        off += 4;
    }
    const std::size_t n = numel(a.shape);
    const std::size_t comps = is_complex(a.dtype) ? 2 : 1;
    const std::size_t sb = scalar_bytes(a.dtype);
    const std::size_t need = n * comps * sb;
    if (buf.size() - off < need)
        throw ParseError("ETNS: truncated payload, expected " + std::to_string(need) + " bytes, found " +
                             std::to_string(buf.size() - off),
                         buf.size());
    if (buf.size() - off > need) throw ParseError("ETNS: trailing bytes after payload", off + need);
    a.re.resize(n);
    if (comps == 2) a.im.resize(n);
    auto read = [&](std::size_t pos) -> double {
        if (sb == 4) {
            float f;
            std::memcpy(&f, buf.data() + pos, 4);
            return f;
        }
        double d;
        std::memcpy(&d, buf.data() + pos, 8);
        return d;
    };
    for (std::size_t i = 0; i < n; ++i) {
        a.re[i] = read(off + i * comps * sb);
        if (comps == 2) a.im[i] = read(off + (i * 2 + 1) * sb);
    }
    return a;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <typename X>
void save(const std::filesystem::path& path, const X& x) {
    write_bytes(path, encode(x));
}

inline Array load(const std::filesystem::path& path) {
    try {
        return decode(read_bytes(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.message(), e.offset());
    }
}

} // namespace equirecon::etns
