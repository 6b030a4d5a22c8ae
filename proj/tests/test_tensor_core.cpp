#include <gtest/gtest.h>

#include <cmath>
#include <complex>

#include <equirecon/adam.hpp>
#include <equirecon/autodiff.hpp>
#include <equirecon/complex_ops.hpp>
#include <equirecon/etns.hpp>
#include <equirecon/resample.hpp>

#include "oracles.hpp"

using namespace equirecon;
using oracle::random_tensor;

namespace {

Tensor<double> circshift(const Tensor<double>& x, long dy, long dx) {
    const auto H = long(x.shape[x.ndim() - 2]), W = long(x.shape[x.ndim() - 1]);
    Tensor<double> out(x.shape);
    const std::size_t planes = x.size() / std::size_t(H * W);
    for (std::size_t p = 0; p < planes; ++p)
        for (long y = 0; y < H; ++y)
            for (long xx = 0; xx < W; ++xx) {
                const long sy = ((y + dy) % H + H) % H, sx = ((xx + dx) % W + W) % W;
                out[p * H * W + sy * W + sx] = x[p * H * W + y * W + xx];
            }
    return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

ComplexTensor<double> gaussian_bump(std::size_t H, std::size_t W, double sigma) {
    ComplexTensor<double> z({H, W});
    const double cy = (double(H) - 1) / 2, cx = (double(W) - 1) / 2;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            z.re[y * W + x] = std::exp(-r2 / (2 * sigma * sigma));
            z.im[y * W + x] = 0.5 * std::exp(-r2 / (2 * sigma * sigma)) * std::cos(0.1 * double(x));
        }
    return z;
}

} // namespace

// ---------------------------------------------------------------- conv2d

TEST(Conv2d, DeltaKernelIsIdentity) {
    auto x = random_tensor({2, 1, 7, 6}, 1);
    Tensor<double> w({1, 1, 3, 3});
    w[4] = 1.0;
    auto y = ad::conv2d(Var<double>::constant(x), Var<double>::constant(w));
    EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, MatchesQuadrupleLoopZeroPadding) {
    auto x = random_tensor({1, 1, 4, 4}, 11);
    auto w = random_tensor({1, 1, 3, 3}, 12);
    auto y = ad::conv2d(Var<double>::constant(x), Var<double>::constant(w), Padding::zero);
    EXPECT_LT(max_abs_diff(y.value(), oracle::conv2d_loops(x, w, false)), 1e-14);
}

TEST(Conv2d, MatchesLoopsMultiChannelBothPaddings) {
    auto x = random_tensor({2, 3, 6, 5}, 13);
    auto w = random_tensor({4, 3, 5, 5}, 14);
    for (bool circ : {false, true}) {
        auto y = ad::conv2d(Var<double>::constant(x), Var<double>::constant(w), circ ? Padding::circular : Padding::zero);
        EXPECT_LT(max_abs_diff(y.value(), oracle::conv2d_loops(x, w, circ)), 1e-13);
    }
}

TEST(Conv2d, CircularPaddingCommutesWithShifts) {
    auto x = random_tensor({1, 2, 8, 7}, 21);
    auto w = random_tensor({3, 2, 3, 3}, 22);
    auto base = ad::conv2d(Var<double>::constant(x), Var<double>::constant(w), Padding::circular).value();
    for (long dy = -8; dy <= 8; dy += 3)
        for (long dx = -7; dx <= 7; dx += 2) {
            auto shifted = ad::conv2d(Var<double>::constant(circshift(x, dy, dx)), Var<double>::constant(w), Padding::circular);
            EXPECT_LT(max_abs_diff(shifted.value(), circshift(base, dy, dx)), 1e-12) << dy << "," << dx;
        }
}

TEST(Conv2d, ChannelMismatchIsDimensionError) {
    auto x = Var<double>::constant(Tensor<double>({1, 2, 4, 4}));
    auto w = Var<double>::constant(Tensor<double>({1, 3, 3, 3}));
    EXPECT_THROW(ad::conv2d(x, w), DimensionError);
    auto even = Var<double>::constant(Tensor<double>({1, 2, 2, 2}));
    EXPECT_THROW(ad::conv2d(x, even), DimensionError);
}

// ---------------------------------------------------------------- fft2c

TEST(Fft2c, CenteredDeltaGivesFlatSpectrum) {
    for (auto [H, W] : {std::pair{8ul, 8ul}, std::pair{6ul, 5ul}, std::pair{7ul, 4ul}}) {
        ComplexTensor<double> d({H, W});
        d.re[(H / 2) * W + W / 2] = 1.0;
        auto k = fft2c(d);
        const double expect = 1.0 / std::sqrt(double(H * W));
        for (std::size_t i = 0; i < k.size(); ++i) {
            EXPECT_NEAR(k.re[i], expect, 1e-14);
            EXPECT_NEAR(k.im[i], 0.0, 1e-14);
        }
    }
}

TEST(Fft2c, MatchesNaiveDft) {
    for (auto [H, W] : {std::pair{6ul, 5ul}, std::pair{8ul, 8ul}, std::pair{3ul, 7ul}, std::pair{1ul, 4ul}}) {
        auto re = random_tensor({H, W}, 31), im = random_tensor({H, W}, 32);
        ComplexTensor<double> x(re, im);
        std::vector<oracle::cd> z(H * W);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = {re[i], im[i]};
        for (bool inv : {false, true}) {
            auto ref = oracle::dft2c_naive(z, H, W, inv);
            auto got = inv ? ifft2c(x) : fft2c(x);
            for (std::size_t i = 0; i < z.size(); ++i) {
                EXPECT_NEAR(got.re[i], ref[i].real(), 1e-10);
                EXPECT_NEAR(got.im[i], ref[i].imag(), 1e-10);
            }
        }
    }
}

TEST(Fft2c, MixedRadixLengthsMatchNaiveDft) {
    // Composite non-power-of-two and prime lengths take the mixed-radix path.
    for (auto [H, W] : {std::pair{20ul, 15ul}, std::pair{12ul, 49ul}, std::pair{17ul, 10ul}}) {
        auto re = random_tensor({H, W}, 33), im = random_tensor({H, W}, 34);
        ComplexTensor<double> x(re, im);
        std::vector<oracle::cd> z(H * W);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = {re[i], im[i]};
        for (bool inv : {false, true}) {
            auto ref = oracle::dft2c_naive(z, H, W, inv);
            auto got = inv ? ifft2c(x) : fft2c(x);
            for (std::size_t i = 0; i < z.size(); ++i) {
                EXPECT_NEAR(got.re[i], ref[i].real(), 1e-12);
                EXPECT_NEAR(got.im[i], ref[i].imag(), 1e-12);
            }
        }
    }
}

TEST(Fft2c, UnitaryAndRoundTrip) {
    for (auto [H, W] : {std::pair{16ul, 16ul}, std::pair{9ul, 12ul}}) {
        ComplexTensor<double> x(random_tensor({3, H, W}, 41), random_tensor({3, H, W}, 42));
        auto k = fft2c(x);
        EXPECT_NEAR(std::sqrt(l2_norm_sq(k)), std::sqrt(l2_norm_sq(x)), 1e-10);
        auto back = ifft2c(k);
        EXPECT_LT(relative_l2(back, x), 1e-10);
    }
}

// ---------------------------------------------------------------- resample_scale

TEST(ResampleScale, UnitScaleIsExactIdentity) {
    auto x = random_tensor({2, 9, 10}, 51);
    EXPECT_EQ(resample_scale(x, 1.0), x);
}

TEST(ResampleScale, ConstantInteriorIsExact) {
    const std::size_t H = 32, W = 32;
    const double c = 0.7123456789, s = 0.9;
    Tensor<double> x({H, W}, c);
    auto y = resample_scale(x, s);
    const double half = s * (double(H) - 1) / 2;
    const double cy = (double(H) - 1) / 2;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
            if (std::abs(i - cy) <= half - 2 && std::abs(j - cy) <= half - 2) {
                EXPECT_EQ(y[i * W + j], c);
                ++checked;
            }
    EXPECT_GT(checked, 400u);
}

TEST(ResampleScale, RoundTripOnSmoothBump) {
    const std::size_t H = 64, W = 64;
    auto f = gaussian_bump(H, W, 8.0);
    auto back = resample_scale(resample_scale(f, 0.9), 1.0 / 0.9);
    // Interior: central disc well inside the 0.9-shrunk support.
    ComplexTensor<double> a({H, W}), b({H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            if (std::hypot(y - 31.5, x - 31.5) < 24) {
                a.re[y * W + x] = back.re[y * W + x];
                a.im[y * W + x] = back.im[y * W + x];
                b.re[y * W + x] = f.re[y * W + x];
                b.im[y * W + x] = f.im[y * W + x];
            }
    EXPECT_LT(relative_l2(a, b), 0.02);
}

TEST(ResampleScale, NonPositiveScaleIsDomainError) {
    Tensor<double> x({4, 4});
    EXPECT_THROW(resample_scale(x, 0.0), DomainError);
    EXPECT_THROW(resample_scale(x, -1.0), DomainError);
}

// ---------------------------------------------------------------- backward

TEST(Backward, SumGivesOnes) {
    auto x = Var<double>::param(random_tensor({3, 4}, 61));
    backward(ad::sum(x));
    EXPECT_EQ(x.grad(), Tensor<double>({3, 4}, 1.0));
}

TEST(Backward, ConvEnergyKernelGradientMatchesFiniteDifferences) {
    auto x = Var<double>::constant(random_tensor({2, 3, 6, 6}, 71));
    auto w = Var<double>::param(random_tensor({2, 3, 3, 3}, 72));
    auto loss = [&] {
        auto y = ad::conv2d(x, w);
        return ad::sum(ad::mul(y, y));
    };
    EXPECT_LT(oracle::gradcheck(w, loss), 1e-6);
}

TEST(Backward, SecondCallOnConsumedGraphIsStateError) {
    auto x = Var<double>::param(random_tensor({3}, 81));
    auto loss = ad::sum(ad::mul(x, x));
    backward(loss);
    EXPECT_THROW(backward(loss), StateError);
}

TEST(Backward, NonScalarLossRejected) {
    auto x = Var<double>::param(random_tensor({3}, 82));
    EXPECT_THROW(backward(ad::mul(x, x)), DimensionError);
}

// Every differentiable primitive, random shapes up to 8x8, five seeds.
TEST(Backward, EveryPrimitivePassesFiniteDifferenceCheck) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        const std::size_t H = 3 + rng() % 6, W = 3 + rng() % 6, C = 1 + rng() % 3;
        const std::size_t k = (rng() % 2) ? 3 : 5;
        auto r = [&](Shape s, std::uint64_t off) { return random_tensor(std::move(s), seed * 100 + off); };
        auto wsum = Var<double>::constant(r({2, C, H, W}, 99));
        auto weigh = [&](const Var<double>& v) { return ad::sum(ad::mul(v, wsum)); };

        auto a = Var<double>::param(r({2, C, H, W}, 1));
        auto b = Var<double>::param(r({2, C, H, W}, 2));
        auto s = Var<double>::param(r({1}, 3));
        EXPECT_LT(oracle::gradcheck(a, [&] { return weigh(ad::add(a, b)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(b, [&] { return weigh(ad::sub(a, b)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(a, [&] { return weigh(ad::mul(a, b)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(a, [&] { return weigh(ad::scale(a, 1.7)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(s, [&] { return weigh(ad::scale_by(a, s)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(a, [&] { return weigh(ad::scale_by(a, s)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(a, [&] { return weigh(ad::relu(a)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(a, [&] { return ad::mean(ad::mul(a, a)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(a, [&] { return weigh(ad::reshape(ad::reshape(a, {2 * C, H * W}), {2, C, H, W})); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(a, [&] { return ad::sum(ad::add_n(std::vector{ad::mul(a, a), b, a})); }), 1e-4);

        auto x4 = Var<double>::param(r({2, C, H, W}, 4));
        auto bias = Var<double>::param(r({C}, 5));
        EXPECT_LT(oracle::gradcheck(bias, [&] { return weigh(ad::add_channel_bias(x4, bias)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(x4, [&] { return weigh(ad::add_channel_bias(x4, bias)); }), 1e-4);

        auto kern = Var<double>::param(r({2, C, k, k}, 6));
        auto wconv = Var<double>::constant(r({2, 2, H, W}, 7));
        for (Padding pad : {Padding::zero, Padding::circular}) {
            auto lf = [&] { return ad::sum(ad::mul(ad::conv2d(x4, kern, pad), wconv)); };
            EXPECT_LT(oracle::gradcheck(kern, lf), 1e-4);
            EXPECT_LT(oracle::gradcheck(x4, lf), 1e-4);
        }

        // Complex-valued primitives on planar [2, C, H, W] data.
        auto maps = r({2, C, H, W}, 8);
        auto mask = random_tensor({H, W}, seed * 100 + 9, 0, 1);
        auto img = Var<double>::param(r({2, H, W}, 10));
        auto coils = Var<double>::param(r({2, C, H, W}, 11));
        auto wimg = Var<double>::constant(r({2, H, W}, 12));
        EXPECT_LT(oracle::gradcheck(coils, [&] { return weigh(ad::fft2c(coils)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(coils, [&] { return weigh(ad::ifft2c(coils)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(img, [&] { return weigh(ad::coil_expand(img, maps)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(coils, [&]() -> Var<double> { return ad::sum(ad::mul(ad::coil_combine(coils, maps), wimg)); }), 1e-4);
        EXPECT_LT(oracle::gradcheck(coils, [&] { return weigh(ad::apply_mask(coils, mask)); }), 1e-4);
        auto target = r({2, H, W}, 13);
        EXPECT_LT(oracle::gradcheck(img, [&] { return ad::complex_l1(img, target); }), 1e-4);
    }
}

// ---------------------------------------------------------------- adam

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    auto p = Var<double>::param(random_tensor({5}, 91));
    const auto before = p.value();
    p.node()->grad.assign(5, 0.0);
    std::vector<Var<double>> ps{p};
    AdamState<double> st;
    adam_step(ps, st, {});
    EXPECT_EQ(p.value(), before);
    EXPECT_EQ(st.t, 1u);
}

TEST(Adam, SingleStepMatchesHandEvaluation) {
    auto p = Var<double>::param(Tensor<double>({1}, {1.0}));
    p.node()->grad = {0.5};
    std::vector<Var<double>> ps{p};
    AdamState<double> st;
    adam_step(ps, st, {1e-3, 0.9, 0.999, 1e-8});
    // m = 0.05, v = 0.00025; mhat = 0.5, vhat = 0.25; w' = 1 - 1e-3 * 0.5 / (0.5 + 1e-8).
    const double expect = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
    EXPECT_NEAR(p.value()[0], expect, 1e-15);
    EXPECT_NEAR(p.value()[0], 0.999, 1e-10);
}

TEST(Adam, ConstantGradientMovesMonotonically) {
    auto p = Var<double>::param(Tensor<double>({2}, {0.3, -0.2}));
    std::vector<Var<double>> ps{p};
    AdamState<double> st;
    std::vector<double> prev = p.value().data;
    for (int step = 0; step < 2; ++step) {
        p.node()->grad = {0.7, -0.4};
        adam_step(ps, st, {});
        EXPECT_LT(p.value()[0], prev[0]);
        EXPECT_GT(p.value()[1], prev[1]);
        prev = p.value().data;
    }
    EXPECT_EQ(st.t, 2u);
}

TEST(Adam, NonFiniteGradientRejectsStep) {
    auto p = Var<double>::param(Tensor<double>({2}, {1.0, 2.0}));
    p.node()->grad = {0.1, std::nan("")};
    std::vector<Var<double>> ps{p};
    AdamState<double> st;
    EXPECT_THROW(adam_step(ps, st, {}), NumericError);
    EXPECT_EQ(p.value()[0], 1.0);
    EXPECT_EQ(st.t, 0u);
}

// ---------------------------------------------------------------- ETNS

TEST(Etns, HeaderLayoutIsBitExact) {
    Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    auto bytes = etns::encode(t);
    ASSERT_EQ(bytes.size(), 4u + 3u + 2 * 4u + 6 * 4u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ETNS");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 1);
    EXPECT_EQ(bytes[6], 2);
    EXPECT_EQ(bytes[7], 2);
    EXPECT_EQ(bytes[8], 0);
    EXPECT_EQ(bytes[11], 3);
    float f;
    std::memcpy(&f, bytes.data() + 15, 4);
    EXPECT_EQ(f, 1.0f);
}

TEST(Etns, RoundTripPreservesBitsForEveryDtype) {
    auto d = random_tensor({3, 2, 5}, 101);
    EXPECT_EQ(etns::decode(etns::encode(d)).to_tensor<double>(), d);
    auto f = d.cast<float>();
    EXPECT_EQ(etns::decode(etns::encode(f)).to_tensor<float>(), f);
    ComplexTensor<double> z(random_tensor({4, 4}, 102), random_tensor({4, 4}, 103));
    auto a = etns::decode(etns::encode(z));
    EXPECT_EQ(a.dtype, etns::DType::complex128);
    EXPECT_EQ(a.to_complex<double>(), z);
    auto zf = z.cast<float>();
    auto af = etns::decode(etns::encode(zf));
    EXPECT_EQ(af.dtype, etns::DType::complex64);
    EXPECT_EQ(af.to_complex<float>(), zf);
}

TEST(Etns, MalformedInputsRaiseParseErrorsWithOffsets) {
    auto bytes = etns::encode(random_tensor({4, 4}, 104));
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    try {
        etns::decode(truncated);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), truncated.size());
    }
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(etns::decode(bad), ParseError);
    bad = bytes;
    bad[5] = 9;
    try {
        etns::decode(bad);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 5u);
    }
    EXPECT_THROW(etns::decode({'E', 'T', 'N'}), ParseError);
}
