// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
#include <algorithm>
#include <cmath>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <gtest/gtest.h>

#include "qexit/quantizer.hpp"

using namespace qexit;

namespace {

// Independent construction with boost's inverse normal CDF.
std::vector<double> quantile_oracle() {
    const boost::math::normal n;
    const double offset = 0.9677083;
    std::vector<double> v;
    for (int i = 0; i < 8; ++i) v.push_back(boost::math::quantile(n, offset + (0.5 - offset) * i / 8.0));
    for (int i = 0; i < 7; ++i) v.push_back(-boost::math::quantile(n, offset + (0.5 - offset) * i / 7.0));
    v.push_back(0.0);
    const double mx = *std::max_element(v.begin(), v.end());
    for (double& x : v) x /= mx;
    std::sort(v.begin(), v.end());
    return v;
}

double mse(const Matrix<float>& a, const Matrix<float>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    return s / static_cast<double>(a.size());
}

}  // namespace

TEST(Nf4Codebook, EndpointsAndZero) {
    const auto& cb = nf4_codebook();
    EXPECT_EQ(cb.front(), -1.0f);
    EXPECT_EQ(cb.back(), 1.0f);
    EXPECT_EQ(std::count(cb.begin(), cb.end(), 0.0f), 1);
    EXPECT_EQ(cb[kNf4ZeroIndex], 0.0f);
    EXPECT_TRUE(std::is_sorted(cb.begin(), cb.end()));
    EXPECT_EQ(std::adjacent_find(cb.begin(), cb.end()), cb.end());
}

TEST(Nf4Codebook, MatchesInverseCdfOracle) {
    const auto ref = quantile_oracle();
    const auto& cb = nf4_codebook();
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(cb[i], ref[i], 1e-6) << i;
}

TEST(Nf4Codebook, MatchesReferenceTable) {
    // Evaluated separately with scipy.stats.norm.ppf.
    const double table[16] = {-1.0, -0.69619289, -0.52507304, -0.39491749, -0.28444136, -0.18477344,
                              -0.09104999, 0.0, 0.07958033, 0.16093017, 0.24611229, 0.33791519,
                              0.4407098, 0.56261697, 0.72295673, 1.0};
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(nf4_codebook()[i], table[i], 1e-6) << i;
}

TEST(Quantize, ZeroBlock) {
    const Matrix<float> w(1, 64);
    const auto q = quantize(w, 64);
    EXPECT_EQ(q.scales[0], 0.0f);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(q.code(i), kNf4ZeroIndex);
    EXPECT_EQ(dequantize(q), w);
}

TEST(Quantize, GridPointsRoundTripExactly) {
    std::vector<float> data;
    for (float v : nf4_codebook())
        for (int r = 0; r < 4; ++r) data.push_back(2.0f * v);
    const Matrix<float> w(1, 64, data);
    const auto q = quantize(w, 64);
    EXPECT_EQ(q.scales[0], 2.0f);
    EXPECT_EQ(dequantize(q), w);
    EXPECT_EQ(quant_error(w, q).rel_frobenius, 0.0);
}

TEST(Quantize, HalfMapsToNearestCodebookValue) {
    std::vector<float> data(64, 0.0f);
    data[0] = 1.0f;
    data[1] = 0.5f;
    const auto q = quantize(Matrix<float>(1, 64, data), 64);
    std::size_t best = 0;
    for (std::size_t i = 1; i < 16; ++i) {
        if (std::abs(nf4_codebook()[i] - 0.5) < std::abs(nf4_codebook()[best] - 0.5)) best = i;
    }
    EXPECT_EQ(q.code(1), best);
    EXPECT_EQ(best, 12u);  // 0.4407 is closer than 0.5626
}

TEST(Quantize, SingleElementIsExact) {
    const Matrix<float> w(1, 1, {3.0f});
    const auto q = quantize(w, 64);
    EXPECT_EQ(q.scales[0], 3.0f);
    EXPECT_EQ(q.code(0), 15);
    EXPECT_EQ(dequantize(q), w);
}

TEST(Quantize, NonFiniteInputIsDataError) {
    Matrix<float> w(2, 2);
    w(1, 1) = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(quantize(w, 64), DataError);
}

TEST(Quantize, ShortFinalBlock) {
    Rng rng(4);
    const auto w = random_normal<float>(10, 10, 1.0, rng);
    const auto q = quantize(w, 64);
    EXPECT_EQ(q.num_blocks(), 2u);
    EXPECT_EQ(q.scales.size(), 2u);
    EXPECT_EQ(q.code_bytes(), 50u);
}

TEST(Quantize, NearestBinBoundExhaustive) {
    const auto& cb = nf4_codebook();
    Rng rng(5);
    for (int b = 0; b < 2000; ++b) {
        const auto w = random_normal<float>(1, 64, 0.02, rng);
        const auto q = quantize(w, 64);
        const auto dq = dequantize(q);
        const double c = q.scales[0];
        for (std::size_t i = 0; i < 64; ++i) {
            const double t = w[i] / c;
            const auto hi = std::lower_bound(cb.begin(), cb.end(), static_cast<float>(t));
            double gap = 0.0;
            if (hi == cb.begin() || hi == cb.end()) gap = 0.0;
            else gap = *hi - *(hi - 1);
            ASSERT_LE(std::abs(double(dq[i]) - w[i]), 0.5 * gap * c + 1e-7) << "block " << b << " elt " << i;
        }
    }
}

TEST(Quantize, TiesGoToSmallerIndex) {
    const auto& cb = nf4_codebook();
    const double mid = 0.5 * (double(cb[9]) + double(cb[10]));
    EXPECT_EQ(detail::nearest_nf4(mid), 9);
}

TEST(Quantize, Idempotent) {
    Rng rng(6);
    for (auto scheme : {QuantScheme::nf4, QuantScheme::uniform4, QuantScheme::uniform8}) {
        const auto w = random_normal<float>(16, 24, 0.05, rng);
        const auto q = quantize(w, 64, scheme);
        EXPECT_EQ(quantize(dequantize(q), 64, scheme), q);
    }
}

TEST(Quantize, CorruptCodeIsDataError) {
    auto q = quantize_uniform(Matrix<float>(1, 4, {1, 0, -1, 0.5f}), 4, 64);
    q.set_code(2, 15);  // uniform4 uses 15 levels
    EXPECT_THROW(dequantize(q), DataError);
}

TEST(Packing, RoundTrip) {
    Rng rng(8);
    std::vector<std::uint8_t> bytes(33);
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.below(256));
    EXPECT_EQ(pack_nibbles(unpack_nibbles(bytes, 66)), bytes);
    const std::vector<std::uint8_t> codes{1, 2, 15};
    EXPECT_EQ(pack_nibbles(codes), (std::vector<std::uint8_t>{0x21, 0x0f}));
}

TEST(Uniform, EightBitEndpointsExact) {
    const Matrix<float> w(1, 3, {-0.75f, 0.0f, 0.75f});
    EXPECT_EQ(dequantize(quantize_uniform(w, 8, 64)), w);
}

TEST(Uniform, ZeroBlock) {
    const Matrix<float> w(1, 10);
    EXPECT_EQ(dequantize(quantize_uniform(w, 4, 64)), w);
}

TEST(Uniform, TiesRoundTowardZero) {
    // 4-bit grid step is c/7; 1.5 steps sits halfway between levels 1 and 2.
    EXPECT_EQ(detail::nearest_uniform(1.5, 7), 1);
    EXPECT_EQ(detail::nearest_uniform(-1.5, 7), -1);
    EXPECT_EQ(detail::nearest_uniform(1.5000001, 7), 2);
}

TEST(Uniform, RejectsOtherWidths) {
    EXPECT_THROW(quantize_uniform(Matrix<float>(1, 4), 3, 64), StructuralError);
}

TEST(QuantErrorTest, Nf4BeatsUniformOnNormalData) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        const auto w = random_normal<float>(64, 64, 1.0, rng);
        const double e_nf4 = mse(dequantize(quantize(w, 64)), w);
        const double e_uni = mse(dequantize(quantize_uniform(w, 4, 64)), w);
        EXPECT_LT(e_nf4, e_uni) << "seed " << seed;
    }
}

TEST(QuantErrorTest, SmallWeightsBound) {
    Rng rng(21);
    const auto w = random_normal<float>(64, 64, 0.02, rng);
    const auto err = quant_error(w, quantize(w, 64));
    // Measured ~0.08 for this draw.
    EXPECT_LT(err.rel_frobenius, 0.10);
    EXPECT_GT(err.rel_frobenius, 0.0);
}

TEST(QuantErrorTest, ZeroReconstructionGivesOne) {
    Rng rng(22);
    const auto w = random_normal<float>(4, 16, 1.0, rng);
    const auto zero_q = quantize(Matrix<float>(4, 16), 64);
    EXPECT_DOUBLE_EQ(quant_error(w, zero_q).rel_frobenius, 1.0);
}

TEST(QuantErrorTest, ShapeMismatch) {
    EXPECT_THROW(quant_error(Matrix<float>(2, 2), quantize(Matrix<float>(1, 4), 64)), StructuralError);
}
