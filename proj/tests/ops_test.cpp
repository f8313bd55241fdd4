#include <gtest/gtest.h>

#include <cmath>

#include "adjnet/ops.hpp"
#include "test_util.hpp"

using namespace adjnet;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

// Weight layout [C_out, K, K, C_in]; straight six-deep loop.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride, std::size_t pad) {
    const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co = w.dim(0), k = w.dim(1);
    const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
    Tensor<double> y({n, co, ho, wo});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = 0;
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            for (std::size_t c = 0; c < ci; ++c) {
                                const long iy = long(oy * stride + ky) - long(pad);
                                const long ix = long(ox * stride + kx) - long(pad);
                                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                                acc += x[((b * ci + c) * h + iy) * wd + ix] * w[((o * k + ky) * k + kx) * ci + c];
                            }
                    y[((b * co + o) * ho + oy) * wo + ox] = acc;
                }
    return y;
}

}  // namespace

TEST(Conv2d, AllOnesWindowSumsToNine) {
    auto y = conv2d(Tensor<double>({1, 1, 3, 3}, 1.0), Tensor<double>({1, 3, 3, 1}, 1.0), 1, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(y[0], 9.0);
}

TEST(Conv2d, ZeroFilterGivesZeroOutput) {
    auto y = conv2d(random_tensor<double>({2, 3, 6, 6}, 4), Tensor<double>({5, 3, 3, 3}), 1, 1);
    for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesLoopOracle) {
    auto x = random_tensor<double>({1, 2, 5, 5}, 1);
    auto w = random_tensor<double>({3, 3, 3, 2}, 2);
    auto ref = naive_conv(x, w, 1, 1);
    EXPECT_LT(max_abs_diff(conv2d(x, w, 1, 1), ref), 1e-6);
    EXPECT_LT(max_abs_diff(conv2d(x, w, 1, 1, ConvPath::patch_gather), ref), 1e-6);
    EXPECT_LT(max_abs_diff(conv2d_direct(x, w, 1, 1), ref), 1e-6);
}

TEST(Conv2d, StridedAndPointwiseMatchLoopOracle) {
    auto x = random_tensor<double>({3, 4, 9, 7}, 3);
    for (auto [k, s, p] : {std::tuple{3u, 2u, 1u}, std::tuple{1u, 1u, 0u}, std::tuple{1u, 2u, 0u}, std::tuple{5u, 3u, 2u}}) {
        auto w = random_tensor<double>({6, k, k, 4}, 10 + k);
        auto y = conv2d(x, w, s, p);
        auto ref = naive_conv(x, w, s, p);
        ASSERT_EQ(y.shape(), ref.shape());
        EXPECT_LT(max_abs_diff(y, ref), 1e-9) << "k=" << k << " stride=" << s;
    }
}

TEST(Conv2d, OutputExtentFormula) {
    auto y = conv2d(Tensor<float>({1, 2, 11, 8}), Tensor<float>({4, 3, 3, 2}), 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 4, (11 + 2 - 3) / 2 + 1, (8 + 2 - 3) / 2 + 1}));
}

TEST(Conv2d, ShapeErrors) {
    EXPECT_THROW(conv2d(Tensor<float>({1, 3, 5, 5}), Tensor<float>({2, 3, 3, 2}), 1, 0), DimensionError);
    EXPECT_THROW(conv2d(Tensor<float>({1, 1, 2, 2}), Tensor<float>({1, 5, 5, 1}), 1, 1), DimensionError);
    EXPECT_THROW(conv2d(Tensor<float>({1, 1, 5, 5}), Tensor<float>({1, 3, 3, 1}), 0, 0), DimensionError);
}

TEST(Linear, IdentityWeightReturnsInput) {
    auto x = random_tensor<double>({3, 4}, 5);
    Tensor<double> eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    EXPECT_EQ(max_abs_diff(linear(x, eye, Tensor<double>({4})), x), 0.0);
}

TEST(Linear, SmallWorkedCase) {
    auto y = linear(Tensor<double>({1, 2}, std::vector<double>{1, 2}), Tensor<double>({1, 2}, std::vector<double>{3, 4}),
                    Tensor<double>({1}, std::vector<double>{5}));
    EXPECT_DOUBLE_EQ(y[0], 16.0);
}

TEST(Linear, MatchesDotProductOracle) {
    auto x = random_tensor<double>({5, 7}, 6);
    auto w = random_tensor<double>({3, 7}, 7);
    auto b = random_tensor<double>({3}, 8);
    auto y = linear(x, w, b);
    for (std::size_t n = 0; n < 5; ++n)
        for (std::size_t o = 0; o < 3; ++o) {
            double acc = b[o];
            for (std::size_t i = 0; i < 7; ++i) acc += x[n * 7 + i] * w[o * 7 + i];
            EXPECT_NEAR(y[n * 3 + o], acc, 1e-6);
        }
    EXPECT_THROW(linear(x, Tensor<double>({3, 6})), DimensionError);
}

TEST(Pooling, MaxPoolPicksWindowMaximum) {
    Tensor<double> x({1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>((i * 7) % 16);
    auto y = maxpool2d(x, 2, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (std::size_t oy = 0; oy < 2; ++oy)
        for (std::size_t ox = 0; ox < 2; ++ox) {
            double m = -1;
            for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, x[(2 * oy + dy) * 4 + 2 * ox + dx]);
            EXPECT_EQ(y[oy * 2 + ox], m);
        }
    EXPECT_THROW(maxpool2d(x, 5, 1), DimensionError);
}

TEST(Pooling, AdaptiveAvgPoolIsPlaneMean) {
    auto x = random_tensor<double>({2, 3, 4, 5}, 9);
    auto y = adaptive_avgpool(x);
    ASSERT_EQ(y.shape(), (Shape{2, 3, 1, 1}));
    double s = 0;
    for (std::size_t i = 0; i < 20; ++i) s += x[20 + i];
    EXPECT_NEAR(y[1], s / 20.0, 1e-12);
}

TEST(Activations, ReluClampsNegatives) {
    auto y = relu(Tensor<double>({4}, std::vector<double>{-2, -0.0, 0.5, 3}));
    EXPECT_EQ(y.values(), (std::vector<double>{0, 0, 0.5, 3}));
}

TEST(Activations, SoftmaxRowsSumToOneAndSurviveLargeLogits) {
    auto x = random_tensor<double>({6, 10}, 11, 30.0);
    x[0] = 1000.0;
    auto p = softmax(x);
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 10; ++c) s += p[r * 10 + c];
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
    EXPECT_NEAR(p[0], 1.0, 1e-12);
    EXPECT_THROW(softmax(Tensor<double>({2, 3, 4})), DimensionError);
}

TEST(Activations, LogSoftmaxAgreesWithLogOfSoftmax) {
    auto x = random_tensor<double>({3, 5}, 12);
    auto a = log_softmax(x);
    auto b = softmax(x);
    for (std::size_t i = 0; i < 15; ++i) EXPECT_NEAR(a[i], std::log(b[i]), 1e-12);
}

TEST(BatchNorm, TrainModeStandardizesEachChannel) {
    auto x = random_tensor<double>({8, 3, 5, 5}, 13, 4.0);
    for (auto& v : x.values()) v += 2.0;
    BatchNormStats<double> st(3);
    auto y = batchnorm2d(x, Tensor<double>::ones({3}), Tensor<double>::zeros({3}), st, true);
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (std::size_t n = 0; n < 8; ++n)
            for (std::size_t i = 0; i < 25; ++i) m += y[(n * 3 + c) * 25 + i];
        m /= 200;
        for (std::size_t n = 0; n < 8; ++n)
            for (std::size_t i = 0; i < 25; ++i) v += std::pow(y[(n * 3 + c) * 25 + i] - m, 2);
        v /= 200;
        EXPECT_LT(std::abs(m), 1e-5);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(BatchNorm, RunningStatsFollowMomentumAndEvalUsesThem) {
    auto x = random_tensor<double>({4, 1, 3, 3}, 14);
    double mean = 0, var = 0;
    for (auto v : x.data()) mean += v;
    mean /= 36;
    for (auto v : x.data()) var += (v - mean) * (v - mean);
    var /= 35;  // unbiased
    BatchNormStats<double> st(1);
    auto g = Tensor<double>::ones({1}), b = Tensor<double>::zeros({1});
    batchnorm2d(x, g, b, st, true);
    EXPECT_NEAR(st.running_mean[0], 0.1 * mean, 1e-12);
    EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * var, 1e-12);
    auto y = batchnorm2d(x, g, b, st, false);
    EXPECT_NEAR(y[0], (x[0] - st.running_mean[0]) / std::sqrt(st.running_var[0] + 1e-5), 1e-12);
}

TEST(Dropout, KeepOneIsIdentityAndInvertedScalingPreservesMean) {
    auto x = Tensor<double>({20000}, 1.0);
    Rng rng(3);
    EXPECT_EQ(max_abs_diff(dropout(x, 1.0, rng), x), 0.0);
    auto y = dropout(x, 0.5, rng);
    double s = 0;
    for (auto v : y.data()) {
        EXPECT_TRUE(v == 0.0 || v == 2.0);
        s += v;
    }
    EXPECT_NEAR(s / 20000.0, 1.0, 0.05);
    EXPECT_THROW(dropout(x, 0.0, rng), ConfigError);
}
