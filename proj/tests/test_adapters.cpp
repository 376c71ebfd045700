// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
#include <gtest/gtest.h>

#include "qexit/adapters.hpp"
#include "qexit/quantizer.hpp"

using namespace qexit;

TEST(Lora, FreshAdapterIsZeroUpdate) {
    Rng rng(1);
    const auto w = random_normal<float>(8, 8, 1.0, rng);
    const auto q = quantize(w, 64);
    const auto ad = init_lora<float>(8, 8, 2, 16.0, rng);
    EXPECT_EQ(effective_weight(q, ad), dequantize(q));
    EXPECT_EQ(merge_lora(q, ad), dequantize(q));
    double sq = 0.0;
    for (float v : ad.a.data()) sq += double(v) * v;
    EXPECT_NEAR(std::sqrt(sq / 16.0), 0.02, 0.01);
}

TEST(Lora, RankBounds) {
    Rng rng(2);
    EXPECT_NO_THROW(init_lora<float>(6, 4, 4, 16.0, rng));
    EXPECT_THROW(init_lora<float>(6, 4, 5, 16.0, rng), StructuralError);
    EXPECT_THROW(init_lora<float>(6, 4, 0, 16.0, rng), StructuralError);
}

TEST(Lora, UnitOuterProduct) {
    const Matrix<float> base(3, 3);
    const auto q = quantize(base, 64);
    LoraAdapter<float> ad{Matrix<float>(1, 3), Matrix<float>(3, 1), 1, 16.0};
    ad.a(0, 0) = 1.0f;
    ad.b(0, 0) = 0.25f;
    const auto w = effective_weight(q, ad);
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(w[i], i == 0 ? 4.0f : 0.0f);
}

TEST(Lora, MatchesDenseOracle) {
    Rng rng(3);
    const auto base = random_normal<double>(8, 8, 1.0, rng);
    const auto q = quantize(base, 64);
    LoraAdapter<double> ad{random_normal<double>(2, 8, 1.0, rng), random_normal<double>(8, 2, 1.0, rng), 2, 16.0};
    const auto w = effective_weight(q, ad);
    const auto dq = dequantize<double>(q);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            double ba = 0.0;
            for (std::size_t r = 0; r < 2; ++r) ba += ad.b(i, r) * ad.a(r, j);
            EXPECT_NEAR(w(i, j), dq(i, j) + 8.0 * ba, 1e-6);
        }
    EXPECT_EQ(merge_lora(q, ad), w);
}

TEST(Lora, ShapeMismatch) {
    Rng rng(4);
    const auto q = quantize(Matrix<float>(8, 6), 64);
    const auto ad = init_lora<float>(8, 8, 2, 16.0, rng);
    EXPECT_THROW(effective_weight(q, ad), StructuralError);
}

TEST(Lora, MergedRequantizationWithinNearestBinBound) {
    Rng rng(5);
    const auto base = random_normal<float>(8, 8, 0.5, rng);
    const auto q = quantize(base, 64);
    LoraAdapter<float> ad{random_normal<float>(2, 8, 0.1, rng), random_normal<float>(8, 2, 0.1, rng), 2, 16.0};
    const auto merged = merge_lora(q, ad);
    const auto rq = quantize(merged, 64);
    const auto dq = dequantize(rq);
    const auto& cb = nf4_codebook();
    double max_gap = 0.0;
    for (std::size_t i = 1; i < 16; ++i) max_gap = std::max(max_gap, double(cb[i]) - cb[i - 1]);
    for (std::size_t i = 0; i < dq.size(); ++i) {
        EXPECT_LE(std::abs(double(dq[i]) - merged[i]), 0.5 * max_gap * rq.scales[0] + 1e-6);
    }
}
