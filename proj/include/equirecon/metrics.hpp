#pragma once

// Image quality metrics (magnitude SSIM, complex PSNR) and evaluation reports.

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace equirecon {

struct SsimOptions {
    std::size_t window = 7;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

namespace detail {

inline std::vector<double> magnitude(const ComplexTensor<double>& x) {
    std::vector<double> m(x.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::hypot(x.re[i], x.im[i]);
    return m;
}

/// Mirror index without repeating the edge sample (d c b | a b c d | c b a).
inline std::size_t reflect_index(long i, long n) {
    if (n == 1) return 0;
    const long period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return std::size_t(i < n ? i : period - i);
}

/// Separable normalized Gaussian filter with reflect padding.
inline std::vector<double> gaussian_filter(const std::vector<double>& img, std::size_t H, std::size_t W,
                                           const std::vector<double>& g) {
    const long r = long(g.size() / 2);
    std::vector<double> tmp(H * W), out(H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (long t = -r; t <= r; ++t) acc += g[std::size_t(t + r)] * img[y * W + reflect_index(long(x) + t, long(W))];
            tmp[y * W + x] = acc;
        }
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (long t = -r; t <= r; ++t) acc += g[std::size_t(t + r)] * tmp[reflect_index(long(y) + t, long(H)) * W + x];
            out[y * W + x] = acc;
        }
    return out;
}

inline std::vector<double> gaussian_taps(std::size_t n, double sigma) {
    std::vector<double> g(n);
    const double c = double(n / 2);
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += g[i] = std::exp(-(double(i) - c) * (double(i) - c) / (2 * sigma * sigma));
    for (auto& v : g) v /= s;
    return g;
}

inline double peak_of(const ComplexTensor<double>& xstar, const char* what) {
    double peak = 0;
    for (std::size_t i = 0; i < xstar.size(); ++i) peak = std::max(peak, std::hypot(xstar.re[i], xstar.im[i]));
    if (!(peak > 0)) throw DomainError(std::string(what) + ": reference image is identically zero, dynamic range undefined");
    return peak;
}

} // namespace detail

/// Mean local SSIM of |xhat| against |xstar| with a Gaussian window and
/// dynamic range L = max |xstar|. Works on the trailing H x W of 2-d images.
inline double ssim_magnitude(const ComplexTensor<double>& xhat, const ComplexTensor<double>& xstar, const SsimOptions& o = {}) {
    require_shape(xhat.shape(), xstar.shape(), "ssim_magnitude");
    if (xstar.shape().size() != 2) throw DimensionError("ssim_magnitude expects H x W images");
    const std::size_t H = xstar.shape()[0], W = xstar.shape()[1];
    if (H <= o.window / 2 || W <= o.window / 2) throw DimensionError("image smaller than the SSIM window radius");
    const double L = detail::peak_of(xstar, "ssim_magnitude");
    const double c1 = (o.k1 * L) * (o.k1 * L), c2 = (o.k2 * L) * (o.k2 * L);
    const auto a = detail::magnitude(xhat), b = detail::magnitude(xstar);
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto g = detail::gaussian_taps(o.window, o.sigma);
    const auto ma = detail::gaussian_filter(a, H, W, g), mb = detail::gaussian_filter(b, H, W, g);
    const auto saa = detail::gaussian_filter(aa, H, W, g), sbb = detail::gaussian_filter(bb, H, W, g);
    const auto sab = detail::gaussian_filter(ab, H, W, g);
    double total = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double va = saa[i] - ma[i] * ma[i], vb = sbb[i] - mb[i] * mb[i], cov = sab[i] - ma[i] * mb[i];
        total += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    return total / double(a.size());
}

constexpr double kPsnrClampDb = 300.0;

/// 20 log10(max|xstar| / RMSE) with the RMSE over complex differences,
/// clamped to 300 dB.
inline double cpsnr_db(const ComplexTensor<double>& xhat, const ComplexTensor<double>& xstar) {
    require_shape(xhat.shape(), xstar.shape(), "cpsnr_db");
    const double peak = detail::peak_of(xstar, "cpsnr_db");
    double se = 0;
    for (std::size_t i = 0; i < xstar.size(); ++i) {
        const double dr = xhat.re[i] - xstar.re[i], di = xhat.im[i] - xstar.im[i];
        se += dr * dr + di * di;
    }
    const double rmse = std::sqrt(se / double(xstar.size()));
    if (rmse == 0) return kPsnrClampDb;
    return std::min(kPsnrClampDb, 20.0 * std::log10(peak / rmse));
}

template <typename T>
double ssim_magnitude(const ComplexTensor<T>& xhat, const ComplexTensor<T>& xstar) {
    return ssim_magnitude(xhat.template cast<double>(), xstar.template cast<double>());
}
template <typename T>
double cpsnr_db(const ComplexTensor<T>& xhat, const ComplexTensor<T>& xstar) {
    return cpsnr_db(xhat.template cast<double>(), xstar.template cast<double>());
}

struct MetricStats {
    double mean = 0;
    double std = 0;  // population standard deviation
};

inline MetricStats stats_of(const std::vector<double>& v) {
    MetricStats s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= double(v.size());
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / double(v.size()));
    return s;
}

struct EvalRow {
    std::string sample_id;
    double ssim = 0;
    double cpsnr_db = 0;
    std::optional<double> delta;
};

struct EvalReport {
    std::string model_id;
    std::string split;
    double scale = 1.0;
    std::vector<EvalRow> rows;

    MetricStats ssim() const { return column([](const EvalRow& r) { return r.ssim; }); }
    MetricStats cpsnr() const { return column([](const EvalRow& r) { return r.cpsnr_db; }); }
    std::optional<MetricStats> delta() const {
        std::vector<double> v;
        for (const auto& r : rows)
            if (r.delta) v.push_back(*r.delta);
        if (v.empty()) return std::nullopt;
        return stats_of(v);
    }

    std::string to_csv() const {
        std::string out = "sample_id,ssim,cpsnr_db,delta\n";
        for (const auto& r : rows)
            out += r.sample_id + "," + fmt(r.ssim) + "," + fmt(r.cpsnr_db) + "," + (r.delta ? fmt(*r.delta) : "") + "\n";
        return out;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "model: " << model_id << "\nsplit: " << split << "\nscale: " << fmt(scale) << "\nsamples: " << rows.size() << "\n";
        const auto s = ssim(), p = cpsnr();
        os << "ssim: mean " << fmt(s.mean) << " std " << fmt(s.std) << "\n";
        os << "cpsnr_db: mean " << fmt(p.mean) << " std " << fmt(p.std) << "\n";
        if (auto d = delta()) os << "delta: mean " << fmt(d->mean) << " std " << fmt(d->std) << "\n";
        os << "peak: max |x*| per sample\n";
        return os.str();
    }

    static std::string fmt(double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.10g", v);
        return buf;
    }

private:
    template <typename F>
    MetricStats column(F f) const {
        std::vector<double> v;
        for (const auto& r : rows) v.push_back(f(r));
        return stats_of(v);
    }
};

/// Pearson correlation coefficient; NaN when either side has zero variance.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw DimensionError("pearson needs two equal-length series of length >= 2");
    const auto sx = stats_of(x), sy = stats_of(y);
    double c = 0;
    for (std::size_t i = 0; i < x.size(); ++i) c += (x[i] - sx.mean) * (y[i] - sy.mean);
    c /= double(x.size());
    return c / (sx.std * sy.std);
}

} // namespace equirecon
