#pragma once

// Raw (non-differentiable) numeric kernels shared by the autodiff ops:
// single-plane "same" cross-correlation and its two adjoints, and a
// centered orthonormal 2D DFT.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <vector>

namespace equirecon {

enum class Padding { zero, circular };

namespace kernels {

/// Row of the input paired with output row y for a vertical tap offset dy, or
/// -1 when it falls outside a zero-padded plane.
inline int source_row(int y, int dy, int H, Padding pad) {
    const int yi = y + dy;
    if (pad == Padding::zero) return (yi < 0 || yi >= H) ? -1 : yi;
    return ((yi % H) + H) % H;
}

/// Calls f(x_out, x_in, len) for the contiguous segments of one row in which
/// out[x_out + i] pairs with in[x_in + i] for a horizontal offset dx.
template <typename F>
inline void row_segments(int W, int dx, Padding pad, F&& f) {
    if (pad == Padding::zero) {
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        if (x1 > x0) f(x0, x0 + dx, x1 - x0);
        return;
    }
    const int sx = ((dx % W) + W) % W;
    if (W - sx > 0) f(0, sx, W - sx);
    if (sx > 0) f(W - sx, 0, sx);
}

/// Dot product with eight interleaved partial sums combined in a fixed order,
/// so the compiler can vectorize it without reassociating.
template <typename T>
T dot(const T* __restrict a, const T* __restrict b, int n) {
    T p[8] = {};
    int i = 0;
    for (; i + 8 <= n; i += 8)
        for (int j = 0; j < 8; ++j) p[j] += a[i + j] * b[i + j];
    for (; i < n; ++i) p[0] += a[i] * b[i];
    return ((p[0] + p[1]) + (p[2] + p[3])) + ((p[4] + p[5]) + (p[6] + p[7]));
}

// The plane kernels walk rows outermost so one output row stays in cache while
// every tap is applied; each element still sees the taps in (a, b) order.

/// out += in (*) w, cross-correlation of one H x W plane with one k x k tap set.
template <typename T>
void correlate_plane(const T* in, const T* w, int k, int H, int W, Padding pad, T* out) {
    const int r = k / 2;
    for (int yo = 0; yo < H; ++yo) {
        T* __restrict orow = out + static_cast<std::ptrdiff_t>(yo) * W;
        for (int a = 0; a < k; ++a) {
            const int yi = source_row(yo, a - r, H, pad);
            if (yi < 0) continue;
            const T* __restrict irow = in + static_cast<std::ptrdiff_t>(yi) * W;
            for (int b = 0; b < k; ++b) {
                const T wv = w[a * k + b];
                if (wv == T(0)) continue;
                row_segments(W, b - r, pad, [&](int xo, int xi, int len) {
                    T* __restrict o = orow + xo;
                    const T* __restrict s = irow + xi;
                    for (int i = 0; i < len; ++i) o[i] += wv * s[i];
                });
            }
        }
    }
}

/// gin += adjoint of correlate_plane w.r.t. its input, applied to gout.
template <typename T>
void correlate_plane_adj_input(const T* gout, const T* w, int k, int H, int W, Padding pad, T* gin) {
    const int r = k / 2;
    for (int yi = 0; yi < H; ++yi) {
        T* __restrict grow = gin + static_cast<std::ptrdiff_t>(yi) * W;
        for (int a = 0; a < k; ++a) {
            // Output row whose source row is yi.
            int yo = yi - (a - r);
            if (pad == Padding::zero) {
                if (yo < 0 || yo >= H) continue;
            } else {
                yo = ((yo % H) + H) % H;
            }
            const T* __restrict srow = gout + static_cast<std::ptrdiff_t>(yo) * W;
            for (int b = 0; b < k; ++b) {
                const T wv = w[a * k + b];
                if (wv == T(0)) continue;
                row_segments(W, b - r, pad, [&](int xo, int xi, int len) {
                    T* __restrict g = grow + xi;
                    const T* __restrict s = srow + xo;
                    for (int i = 0; i < len; ++i) g[i] += wv * s[i];
                });
            }
        }
    }
}

/// gw += adjoint of correlate_plane w.r.t. its taps.
template <typename T>
void correlate_plane_adj_taps(const T* gout, const T* in, int k, int H, int W, Padding pad, T* gw) {
    const int r = k / 2;
    T acc[15 * 15] = {};
    std::vector<T> big;
    T* accp = acc;
    if (k * k > 15 * 15) {
        big.assign(std::size_t(k) * k, T(0));
        accp = big.data();
    }
    for (int yo = 0; yo < H; ++yo) {
        const T* __restrict grow = gout + static_cast<std::ptrdiff_t>(yo) * W;
        for (int a = 0; a < k; ++a) {
            const int yi = source_row(yo, a - r, H, pad);
            if (yi < 0) continue;
            const T* __restrict irow = in + static_cast<std::ptrdiff_t>(yi) * W;
            for (int b = 0; b < k; ++b)
                row_segments(W, b - r, pad, [&](int xo, int xi, int len) {
                    accp[a * k + b] += dot(grow + xo, irow + xi, len);
                });
        }
    }
    for (int t = 0; t < k * k; ++t) gw[t] += accp[t];
}

// ---------------------------------------------------------------------------
// FFT

/// Precomputed 1D transform of a fixed length: iterative radix-2 for powers of
/// two, recursive mixed radix otherwise.
template <typename T>
class Fft1d {
public:
    explicit Fft1d(std::size_t n) : n_(n) {
        pow2_ = n > 0 && (n & (n - 1)) == 0;
        if (pow2_) {
            cos_.resize(n / 2);
            sin_.resize(n / 2);
            for (std::size_t i = 0; i < n / 2; ++i) {
                const double ang = -2.0 * std::numbers::pi * double(i) / double(n);
                cos_[i] = static_cast<T>(std::cos(ang));
                sin_[i] = static_cast<T>(std::sin(ang));
            }
            rev_.resize(n);
            std::size_t bits = 0;
            while ((std::size_t{1} << bits) < n) ++bits;
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t r = 0;
                for (std::size_t b = 0; b < bits; ++b)
                    if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
                rev_[i] = r;
            }
        } else {
            cos_.resize(n);
            sin_.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double ang = -2.0 * std::numbers::pi * double(i) / double(n);
                cos_[i] = static_cast<T>(std::cos(ang));
                sin_[i] = static_cast<T>(std::sin(ang));
            }
            std::size_t m = n, pmax = 1;
            for (std::size_t f = 2; m > 1; ++f)
                while (m % f == 0) {
                    factors_.push_back(f);
                    pmax = std::max(pmax, f);
                    m /= f;
                }
            tmp_re_.resize(pmax);
            tmp_im_.resize(pmax);
        }
    }

    std::size_t size() const noexcept { return n_; }

    /// Unnormalized in-place transform of contiguous re/im arrays.
    void run(T* re, T* im, bool inverse) const {
        const T sgn = inverse ? T(-1) : T(1);
        if (pow2_) {
            for (std::size_t i = 0; i < n_; ++i)
                if (rev_[i] > i) {
                    std::swap(re[i], re[rev_[i]]);
                    std::swap(im[i], im[rev_[i]]);
                }
            for (std::size_t len = 2; len <= n_; len <<= 1) {
                const std::size_t half = len / 2, step = n_ / len;
                for (std::size_t s = 0; s < n_; s += len)
                    for (std::size_t j = 0; j < half; ++j) {
                        const T wr = cos_[j * step], wi = sgn * sin_[j * step];
                        const std::size_t p = s + j, q = p + half;
                        const T tr = re[q] * wr - im[q] * wi;
                        const T ti = re[q] * wi + im[q] * wr;
                        re[q] = re[p] - tr;
                        im[q] = im[p] - ti;
                        re[p] += tr;
                        im[p] += ti;
                    }
            }
            return;
        }
        scratch_re_.assign(re, re + n_);
        scratch_im_.assign(im, im + n_);
        mixed_radix(scratch_re_.data(), scratch_im_.data(), 1, re, im, n_, 1, sgn, 0);
    }

private:
    // Decimation in time over the prime factors of n: DFTs of the p strided
    // subsequences, then one p-point butterfly per output residue.
    void mixed_radix(const T* ir, const T* ii, std::size_t stride, T* orr, T* oi, std::size_t n, std::size_t tw, T sgn,
                     std::size_t level) const {
        if (n == 1) {
            orr[0] = ir[0];
            oi[0] = ii[0];
            return;
        }
        const std::size_t p = factors_[level], m = n / p;
        for (std::size_t r = 0; r < p; ++r)
            mixed_radix(ir + r * stride, ii + r * stride, stride * p, orr + r * m, oi + r * m, m, tw * p, sgn, level + 1);
        T* tr = tmp_re_.data();
        T* ti = tmp_im_.data();
        for (std::size_t k = 0; k < m; ++k) {
            for (std::size_t r = 0; r < p; ++r) {
                tr[r] = orr[r * m + k];
                ti[r] = oi[r * m + k];
            }
            for (std::size_t q = 0; q < p; ++q) {
                const std::size_t idx = k + q * m;
                T ar = 0, ai = 0;
                for (std::size_t r = 0; r < p; ++r) {
                    const std::size_t e = ((r * idx) % n) * tw;
                    const T wr = cos_[e], wi = sgn * sin_[e];
                    ar += tr[r] * wr - ti[r] * wi;
                    ai += tr[r] * wi + ti[r] * wr;
                }
                orr[idx] = ar;
                oi[idx] = ai;
            }
        }
    }

    std::size_t n_;
    bool pow2_ = false;
    std::vector<T> cos_, sin_;
    std::vector<std::size_t> rev_;
    std::vector<std::size_t> factors_;
    mutable std::vector<T> scratch_re_, scratch_im_, tmp_re_, tmp_im_;
};

template <typename T>
const Fft1d<T>& fft_plan(std::size_t n) {
    thread_local std::map<std::size_t, Fft1d<T>> plans;
    auto it = plans.find(n);
    if (it == plans.end()) it = plans.emplace(n, Fft1d<T>(n)).first;
    return it->second;
}

/// Centered orthonormal 2D DFT of one H x W plane pair, in place.
/// Forward: fftshift(fft2(ifftshift(x))) / sqrt(HW); inverse analogously.
template <typename T>
void fft2c_plane(T* re, T* im, std::size_t H, std::size_t W, bool inverse) {
    const auto& prow = fft_plan<T>(W);
    const auto& pcol = fft_plan<T>(H);
    std::vector<T> br(std::max(H, W)), bi(std::max(H, W));
    // ifftshift gathers with offset floor(n/2), fftshift with ceil(n/2). The
    // inverse uses the same pair since fftshift and ifftshift are mutual inverses.
    const std::size_t wi_in = W / 2, wi_out = (W + 1) / 2;
    for (std::size_t y = 0; y < H; ++y) {
        T* rr = re + y * W;
        T* ri = im + y * W;
        for (std::size_t i = 0; i < W; ++i) {
            br[i] = rr[(i + wi_in) % W];
            bi[i] = ri[(i + wi_in) % W];
        }
        prow.run(br.data(), bi.data(), inverse);
        for (std::size_t i = 0; i < W; ++i) {
            rr[i] = br[(i + wi_out) % W];
            ri[i] = bi[(i + wi_out) % W];
        }
    }
    const std::size_t hi_in = H / 2, hi_out = (H + 1) / 2;
    for (std::size_t x = 0; x < W; ++x) {
        for (std::size_t i = 0; i < H; ++i) {
            br[i] = re[((i + hi_in) % H) * W + x];
            bi[i] = im[((i + hi_in) % H) * W + x];
        }
        pcol.run(br.data(), bi.data(), inverse);
        for (std::size_t i = 0; i < H; ++i) {
            re[i * W + x] = br[(i + hi_out) % H];
            im[i * W + x] = bi[(i + hi_out) % H];
        }
    }
    const T scale = static_cast<T>(1.0 / std::sqrt(double(H) * double(W)));
    for (std::size_t i = 0; i < H * W; ++i) {
        re[i] *= scale;
        im[i] *= scale;
    }
}

} // namespace kernels
} // namespace equirecon
