#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "adjnet/masks.hpp"

using namespace adjnet;

TEST(AlphaMask, KeepsLeadingFilters) {
    const Mask m = build_alpha_mask({8, 1, 1, 2}, 4);
    EXPECT_EQ(m.count_ones(), 4u);
    for (std::size_t i = 0; i < m.numel(); ++i) {
        EXPECT_EQ(m[i], i < 4 ? 1 : 0) << i;
    }
    EXPECT_EQ(surviving_out_channels(m), (std::vector<std::size_t>{0, 1}));
}

TEST(AlphaMask, AlphaOneIsAllOnes) {
    const Mask m = build_alpha_mask({5, 3, 3, 2}, 1);
    EXPECT_EQ(m, Mask::ones({5, 3, 3, 2}));
    EXPECT_DOUBLE_EQ(density(m), 1.0);
    EXPECT_EQ(surviving_out_channels(m).size(), 5u);
}

TEST(AlphaMask, OnesCountMatchesCeilFormula) {
    EXPECT_EQ(build_alpha_mask({6, 3, 3, 4}, 2).count_ones(), 108u);
    for (std::size_t c = 1; c <= 13; ++c) {
        for (std::uint32_t a = 1; a <= c; ++a) {
            const Mask m = build_alpha_mask({c, 3, 3, 2}, a);
            const std::size_t keep = (c + a - 1) / a;
            EXPECT_EQ(m.count_ones(), keep * 18);
            const auto live = surviving_out_channels(m);
            ASSERT_EQ(live.size(), keep);
            for (std::size_t i = 0; i < keep; ++i) EXPECT_EQ(live[i], i);
        }
    }
}

TEST(AlphaMask, AlphaAboveChannelsRejected) {
    EXPECT_THROW(build_alpha_mask({3, 1, 1, 1}, 4), ConfigError);
    EXPECT_THROW(build_alpha_mask({3, 1, 1, 1}, 0), ConfigError);
}

TEST(RandomMask, BetaZeroIsAllOnes) {
    EXPECT_EQ(build_random_mask({4, 3, 3, 2}, 0.0, 9), Mask::ones({4, 3, 3, 2}));
}

TEST(RandomMask, ExactZeroCount) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        EXPECT_EQ(build_random_mask({4, 1, 1, 4}, 0.5, seed).count_zeros(), 8u);
    }
    for (double beta : {0.1, 0.25, 0.33, 0.9, 0.999}) {
        const Mask m = build_random_mask({7, 3, 3, 5}, beta, 3);
        EXPECT_EQ(m.count_zeros(), static_cast<std::size_t>(std::llround(beta * 315)));
    }
}

TEST(RandomMask, DeterministicPerSeed) {
    EXPECT_EQ(build_random_mask({6, 3, 3, 4}, 0.4, 11), build_random_mask({6, 3, 3, 4}, 0.4, 11));
    EXPECT_NE(build_random_mask({6, 3, 3, 4}, 0.4, 11), build_random_mask({6, 3, 3, 4}, 0.4, 12));
}

TEST(RandomMask, PositionsSpreadOverEntries) {
    // Every entry should be zeroed by some seed.
    std::vector<int> hits(32, 0);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Mask m = build_random_mask({4, 1, 1, 8}, 0.5, seed);
        for (std::size_t i = 0; i < m.numel(); ++i) hits[i] += m[i] == 0;
    }
    for (int h : hits) {
        EXPECT_GT(h, 60);
        EXPECT_LT(h, 140);
    }
}

TEST(RandomMask, InvalidBetaRejected) {
    EXPECT_THROW(build_random_mask({2, 1, 1, 2}, 1.0, 0), ConfigError);
    EXPECT_THROW(build_random_mask({2, 1, 1, 2}, -0.1, 0), ConfigError);
}

TEST(Compose, IdentityAndAbsorbingZero) {
    const Mask r = build_random_mask({4, 1, 1, 2}, 0.5, 5);
    const Mask a = build_alpha_mask({4, 1, 1, 2}, 2);
    EXPECT_EQ(compose(r, Mask::ones(r.shape())), r);
    const Mask c = compose(a, r);
    for (std::size_t i = 0; i < c.numel(); ++i) {
        if (a[i] == 0) {
            EXPECT_EQ(c[i], 0);
        }
    }
    EXPECT_LE(c.count_ones(), std::min(a.count_ones(), r.count_ones()));
}

TEST(Compose, CommutativeAndIdempotent) {
    const Mask a = build_random_mask({3, 3, 3, 2}, 0.3, 1);
    const Mask b = build_random_mask({3, 3, 3, 2}, 0.6, 2);
    EXPECT_EQ(compose(a, b), compose(b, a));
    EXPECT_EQ(compose(a, a), a);
}

TEST(Compose, ShapeMismatchRejected) {
    EXPECT_THROW(compose(Mask::ones({2, 1, 1, 2}), Mask::ones({2, 1, 1, 3})), DimensionError);
}

TEST(Compose, MonteCarloDensity) {
    double acc = 0.0;
    const int seeds = 100;
    for (int s = 0; s < seeds; ++s) {
        const Mask m = build_mask({8, 3, 3, 8}, {4, 0.9, static_cast<std::uint64_t>(s)});
        acc += density(m);
        const auto live = surviving_out_channels(m);
        for (auto c : live) EXPECT_LT(c, 2u);
    }
    // Each draw has 576 entries, 58 ones; of the 144 kept entries a
    // hypergeometric share survives. Mean 0.1*0.25 = 0.025 up to rounding.
    const double expected = (576.0 - std::llround(0.9 * 576)) / 576.0 * 0.25;
    EXPECT_NEAR(acc / seeds, expected, 0.003);
}

TEST(Mask, RejectsNonBinaryAndBadShape) {
    EXPECT_THROW(Mask({1, 1, 1, 2}, {1, 2}), ContractError);
    EXPECT_THROW(Mask({1, 1, 2}, {1, 1}), DimensionError);
    EXPECT_THROW(Mask({1, 1, 1, 3}, {1, 1}), DimensionError);
}

TEST(MaskSpec, Validation) {
    EXPECT_NO_THROW((MaskSpec{2, 0.5, 1}.validate()));
    EXPECT_THROW((MaskSpec{0, 0.0, 1}.validate()), ConfigError);
    EXPECT_THROW((MaskSpec{1, 1.0, 1}.validate()), ConfigError);
}
