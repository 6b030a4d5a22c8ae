#include <gtest/gtest.h>

#include <complex>

#include <equirecon/mri_forward.hpp>

#include "oracles.hpp"

using namespace equirecon;
using cd = std::complex<double>;

namespace {

ComplexTensor<double> random_complex(Shape s, std::uint64_t seed) {
    return {oracle::random_tensor(s, seed), oracle::random_tensor(s, seed + 7919)};
}

cd inner(const ComplexTensor<double>& a, const ComplexTensor<double>& b) {
    cd acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::conj(cd(a.re[i], a.im[i])) * cd(b.re[i], b.im[i]);
    return acc;
}

SamplingMask random_mask(std::size_t H, std::size_t W, std::uint64_t seed) {
    SamplingMask m;
    m.grid = oracle::random_tensor({H, W}, seed, 0, 1);
    for (auto& v : m.grid.data) v = v < 0.4 ? 0.0 : 1.0;
    m.recount();
    return m;
}

double max_abs_diff(const ComplexTensor<double>& a, const ComplexTensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max({m, std::abs(a.re[i] - b.re[i]), std::abs(a.im[i] - b.im[i])});
    return m;
}

} // namespace

TEST(ForwardA, ZeroImageGivesZeroKSpace) {
    auto maps = synth_sensitivity_maps(8, 8, 3, 0.5, 1);
    auto y = forward_A(ComplexTensor<double>({8, 8}), maps, random_mask(8, 8, 2));
    for (double v : y.re.data) EXPECT_EQ(v, 0.0);
    for (double v : y.im.data) EXPECT_EQ(v, 0.0);
}

TEST(ForwardA, SingleUnitCoilFullMaskIsFft) {
    SensitivityMaps<double> maps{ComplexTensor<double>({1, 6, 8})};
    maps.maps.re.data.assign(48, 1.0);
    SamplingMask full;
    full.grid = Tensor<double>({6, 8}, 1.0);
    auto x = random_complex({6, 8}, 3);
    auto y = forward_A(x, maps, full);
    auto f = fft2c(x);
    EXPECT_LT(max_abs_diff(unpack_planar(Tensor<double>({2, 6, 8}, pack_planar(y).data)), f), 1e-14);
}

TEST(ForwardA, MatchesNaiveDftTwoCoils) {
    const std::size_t H = 6, W = 6, C = 2;
    auto maps = synth_sensitivity_maps(H, W, C, 0.4, 11);
    auto mask = random_mask(H, W, 12);
    auto x = random_complex({H, W}, 13);
    auto y = forward_A(x, maps, mask);
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<cd> coil(H * W);
        for (std::size_t p = 0; p < H * W; ++p)
            coil[p] = cd(maps.maps.re[c * H * W + p], maps.maps.im[c * H * W + p]) * cd(x.re[p], x.im[p]);
        auto k = oracle::dft2c_naive(coil, H, W);
        for (std::size_t p = 0; p < H * W; ++p) {
            const cd want = k[p] * mask.grid[p];
            EXPECT_NEAR(y.re[c * H * W + p], want.real(), 1e-12);
            EXPECT_NEAR(y.im[c * H * W + p], want.imag(), 1e-12);
        }
    }
}

TEST(ForwardA, ShapeMismatchThrows) {
    auto maps = synth_sensitivity_maps(8, 8, 2, 0.5, 1);
    EXPECT_THROW(forward_A(ComplexTensor<double>({8, 6}), maps, random_mask(8, 8, 1)), DimensionError);
    EXPECT_THROW(forward_A(ComplexTensor<double>({8, 8}), maps, random_mask(8, 6, 1)), DimensionError);
    EXPECT_THROW(adjoint_A(ComplexTensor<double>({3, 8, 8}), maps, random_mask(8, 8, 1)), DimensionError);
}

TEST(AdjointA, ZeroMeasurementsGiveZeroImage) {
    auto maps = synth_sensitivity_maps(8, 8, 3, 0.5, 1);
    auto x = adjoint_A(ComplexTensor<double>({3, 8, 8}), maps, random_mask(8, 8, 2));
    for (double v : x.re.data) EXPECT_EQ(v, 0.0);
}

TEST(AdjointA, InnerProductIdentityAcrossFixtures) {
    struct Fixture {
        std::size_t H, W, C;
    };
    const Fixture fx[] = {{8, 8, 1}, {8, 8, 4}, {6, 10, 2}, {16, 16, 8}, {7, 5, 3}};
    int cases = 0;
    for (const auto& f : fx)
        for (std::uint64_t seed = 0; seed < 2; ++seed) {
            auto maps = synth_sensitivity_maps(f.H, f.W, f.C, 0.3, 100 + seed);
            auto mask = random_mask(f.H, f.W, 200 + seed);
            auto x = random_complex({f.H, f.W}, 300 + seed);
            auto y = random_complex({f.C, f.H, f.W}, 400 + seed);
            const cd lhs = inner(forward_A(x, maps, mask), y);
            const cd rhs = inner(x, adjoint_A(y, maps, mask));
            EXPECT_LT(std::abs(lhs - rhs) / std::abs(lhs), 1e-10);
            ++cases;
        }
    EXPECT_EQ(cases, 10);
}

TEST(AdjointA, UnitaryCompositionSingleCoil) {
    SensitivityMaps<double> maps{ComplexTensor<double>({1, 8, 8})};
    maps.maps.re.data.assign(64, 1.0);
    SamplingMask full;
    full.grid = Tensor<double>({8, 8}, 1.0);
    auto x = random_complex({8, 8}, 5);
    EXPECT_LT(max_abs_diff(adjoint_A(forward_A(x, maps, full), maps, full), x), 1e-10);
}

TEST(ForwardA, Linearity) {
    auto maps = synth_sensitivity_maps(8, 8, 3, 0.4, 9);
    auto mask = random_mask(8, 8, 10);
    auto x1 = random_complex({8, 8}, 1), x2 = random_complex({8, 8}, 2);
    const double alpha = -1.7;
    ComplexTensor<double> comb({8, 8});
    for (std::size_t i = 0; i < 64; ++i) {
        comb.re[i] = alpha * x1.re[i] + x2.re[i];
        comb.im[i] = alpha * x1.im[i] + x2.im[i];
    }
    auto a1 = forward_A(x1, maps, mask), a2 = forward_A(x2, maps, mask), ac = forward_A(comb, maps, mask);
    for (std::size_t i = 0; i < ac.size(); ++i) {
        EXPECT_NEAR(ac.re[i], alpha * a1.re[i] + a2.re[i], 1e-10);
        EXPECT_NEAR(ac.im[i], alpha * a1.im[i] + a2.im[i], 1e-10);
    }
    auto y1 = random_complex({3, 8, 8}, 3), y2 = random_complex({3, 8, 8}, 4);
    ComplexTensor<double> yc({3, 8, 8});
    for (std::size_t i = 0; i < yc.size(); ++i) {
        yc.re[i] = alpha * y1.re[i] + y2.re[i];
        yc.im[i] = alpha * y1.im[i] + y2.im[i];
    }
    auto b1 = adjoint_A(y1, maps, mask), b2 = adjoint_A(y2, maps, mask), bc = adjoint_A(yc, maps, mask);
    for (std::size_t i = 0; i < bc.size(); ++i) EXPECT_NEAR(bc.re[i], alpha * b1.re[i] + b2.re[i], 1e-10);
}

TEST(ForwardA, MaskIsIdempotent) {
    auto mask = random_mask(8, 8, 4);
    auto y = random_complex({2, 8, 8}, 5);
    auto op = ForwardOperator<double>(synth_sensitivity_maps(8, 8, 2, 0.4, 1), mask);
    auto once = ad::apply_mask(Var<double>::constant(pack_planar(y)), op.mask);
    auto twice = ad::apply_mask(once, op.mask);
    EXPECT_EQ(once.value(), twice.value());
}

TEST(DataConsistency, ZeroStepIsIdentity) {
    auto maps = synth_sensitivity_maps(8, 8, 2, 0.4, 1);
    auto mask = poisson_disc_mask(8, 8, 2.0, {2, 2}, 3);
    auto s = simulate_sample(random_complex({8, 8}, 1), maps, mask, 0.0, 0);
    auto x = random_complex({8, 8}, 2);
    EXPECT_EQ(data_consistency_step(x, s, 0.0), x);
}

TEST(DataConsistency, GroundTruthIsFixedPoint) {
    auto maps = synth_sensitivity_maps(16, 16, 4, 0.4, 1);
    auto mask = poisson_disc_mask(16, 16, 3.0, {4, 4}, 3);
    auto xs = random_complex({16, 16}, 1);
    auto s = simulate_sample(xs, maps, mask, 0.0, 0);
    for (double eta : {0.1, 1.0, 7.5}) EXPECT_LT(max_abs_diff(data_consistency_step(xs, s, eta), xs), 1e-12);
}

TEST(DataConsistency, FromZeroIsScaledAdjoint) {
    auto maps = synth_sensitivity_maps(12, 12, 3, 0.4, 1);
    auto mask = poisson_disc_mask(12, 12, 2.5, {4, 4}, 5);
    auto s = simulate_sample(random_complex({12, 12}, 6), maps, mask, 0.02, 7);
    const double eta = 0.37;
    auto z = data_consistency_step(ComplexTensor<double>({12, 12}), s, eta);
    auto ah = adjoint_A(s.y, maps, mask);
    for (std::size_t i = 0; i < z.size(); ++i) {
        EXPECT_NEAR(z.re[i], eta * ah.re[i], 1e-13);
        EXPECT_NEAR(z.im[i], eta * ah.im[i], 1e-13);
    }
}

TEST(DataConsistency, GradientsInImageAndStep) {
    auto maps = synth_sensitivity_maps(6, 6, 2, 0.4, 1);
    auto mask = random_mask(6, 6, 2);
    ForwardOperator<double> op(maps, mask);
    auto y = Var<double>::constant(pack_planar(random_complex({2, 6, 6}, 3)));
    auto x = Var<double>::param(pack_planar(random_complex({6, 6}, 4)));
    auto eta = Var<double>::param(Tensor<double>({1}, {0.3}));
    auto w = oracle::random_tensor({2, 6, 6}, 5);
    auto loss = [&] { return ad::sum(ad::mul(ad::data_consistency_step(x, y, op, eta), Var<double>::constant(w))); };
    EXPECT_LT(oracle::gradcheck(x, loss), 1e-6);
    EXPECT_LT(oracle::gradcheck(eta, loss), 1e-6);
}

TEST(PoissonDisc, TargetOneIsFullySampled) {
    auto m = poisson_disc_mask(16, 12, 1.0, {4, 4}, 3);
    EXPECT_EQ(m.count(), 16u * 12u);
    EXPECT_EQ(m.acceleration, 1.0);
}

TEST(PoissonDisc, HitsTargetWithCalibration) {
    auto m = poisson_disc_mask(64, 64, 4.0, {8, 8}, 2024);
    EXPECT_GE(m.acceleration, 3.6);
    EXPECT_LE(m.acceleration, 4.4);
    EXPECT_EQ(m.acceleration, 64.0 * 64.0 / double(m.count()));
    for (std::size_t y = 28; y < 36; ++y)
        for (std::size_t x = 28; x < 36; ++x) EXPECT_EQ(m.grid[y * 64 + x], 1.0);
    for (double v : m.grid.data) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(PoissonDisc, PairwiseDistanceAudit) {
    const std::size_t H = 64, W = 64;
    const std::pair<std::size_t, std::size_t> calib{8, 8};
    auto m = poisson_disc_mask(H, W, 4.0, calib, 77);
    ASSERT_GT(m.base_radius, 0.0);
    const double cy = H / 2, cx = W / 2;
    const double dmax = std::hypot(cy, cx);
    auto r = [&](double y, double x) { return m.base_radius * (1 + 2 * std::hypot(y - cy, x - cx) / dmax); };
    std::vector<std::pair<double, double>> pts;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const bool calib_px = y >= 28 && y < 36 && x >= 28 && x < 36;
            if (m.grid[y * W + x] == 1.0 && !calib_px) pts.emplace_back(double(y), double(x));
        }
    std::size_t violations = 0;
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j) {
            const double d = std::hypot(pts[i].first - pts[j].first, pts[i].second - pts[j].second);
            if (d < std::min(r(pts[i].first, pts[i].second), r(pts[j].first, pts[j].second)) - 1e-12) ++violations;
        }
    EXPECT_EQ(violations, 0u);
}

TEST(PoissonDisc, DeterministicInSeed) {
    auto a = poisson_disc_mask(32, 32, 3.0, {4, 4}, 9);
    auto b = poisson_disc_mask(32, 32, 3.0, {4, 4}, 9);
    auto c = poisson_disc_mask(32, 32, 3.0, {4, 4}, 10);
    EXPECT_EQ(a.grid, b.grid);
    EXPECT_NE(a.grid, c.grid);
}

TEST(PoissonDisc, InvalidArguments) {
    EXPECT_THROW(poisson_disc_mask(16, 16, 0.5, {4, 4}, 1), DomainError);
    EXPECT_THROW(poisson_disc_mask(16, 16, 2.0, {20, 4}, 1), ConfigError);
    // A calibration block covering everything cannot be undersampled.
    EXPECT_THROW(poisson_disc_mask(8, 8, 4.0, {8, 8}, 1), GenerationError);
}

TEST(SensitivityMaps, SingleCoilHasUnitMagnitude) {
    auto m = synth_sensitivity_maps(16, 16, 1, 0.3, 4);
    for (std::size_t p = 0; p < 256; ++p) EXPECT_NEAR(std::hypot(m.maps.re[p], m.maps.im[p]), 1.0, 1e-12);
}

TEST(SensitivityMaps, SumOfSquaresIsOne) {
    for (std::size_t C : {2u, 4u, 8u}) {
        auto m = synth_sensitivity_maps(32, 24, C, 0.3, 5);
        for (std::size_t p = 0; p < 32 * 24; ++p) {
            double ss = 0;
            for (std::size_t c = 0; c < C; ++c)
                ss += m.maps.re[c * 768 + p] * m.maps.re[c * 768 + p] + m.maps.im[c * 768 + p] * m.maps.im[c * 768 + p];
            EXPECT_NEAR(ss, 1.0, 1e-6);
        }
    }
}

TEST(SensitivityMaps, SeedControlsOutput) {
    auto a = synth_sensitivity_maps(32, 32, 4, 0.3, 5);
    auto b = synth_sensitivity_maps(32, 32, 4, 0.3, 5);
    auto c = synth_sensitivity_maps(32, 32, 4, 0.3, 6);
    EXPECT_EQ(a.maps, b.maps);
    EXPECT_GT(relative_l2(c.maps, a.maps), 0.1);
}

TEST(SimulateSample, NoiselessEqualsForward) {
    auto maps = synth_sensitivity_maps(16, 16, 4, 0.3, 1);
    auto mask = poisson_disc_mask(16, 16, 2.0, {4, 4}, 2);
    auto x = random_complex({16, 16}, 3);
    auto s = simulate_sample(x, maps, mask, 0.0, 4);
    EXPECT_EQ(s.y, forward_A(x, maps, mask));
}

TEST(SimulateSample, NoiseStatisticsAndMasking) {
    const std::size_t H = 64, W = 64, C = 4;
    auto maps = synth_sensitivity_maps(H, W, C, 0.3, 1);
    auto mask = poisson_disc_mask(H, W, 2.0, {8, 8}, 2);
    auto x = random_complex({H, W}, 3);
    auto s = simulate_sample(x, maps, mask, 0.05, 4);
    auto clean = forward_A(x, maps, mask);
    double ss = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < s.y.size(); ++i) {
        if (mask.grid[i % (H * W)] == 0.0) {
            EXPECT_EQ(s.y.re[i], 0.0);
            EXPECT_EQ(s.y.im[i], 0.0);
            continue;
        }
        const double dr = s.y.re[i] - clean.re[i], di = s.y.im[i] - clean.im[i];
        ss += dr * dr + di * di;
        ++n;
    }
    const double std_complex = std::sqrt(ss / double(n));
    EXPECT_NEAR(std_complex, 0.05, 0.005);
}
