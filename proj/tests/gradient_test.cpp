#include <gtest/gtest.h>

#include "gradient_cases.hpp"

using namespace adjnet;
using gradcases::kRelTol;

TEST(Gradients, ConvBothOperandsWithStrideAndPadding) {
    EXPECT_LT(gradcases::conv_strided_padded().max_err, kRelTol);
}

TEST(Gradients, PointwiseConvFastPath) { EXPECT_LT(gradcases::conv_pointwise().max_err, kRelTol); }

TEST(Gradients, LinearReluSoftmax) { EXPECT_LT(gradcases::linear_relu_softmax().max_err, kRelTol); }

TEST(Gradients, PoolingAndBatchNorm) { EXPECT_LT(gradcases::pooling_batchnorm().max_err, kRelTol); }

TEST(Gradients, LogSoftmaxCrossEntropyAndMaskedChannels) {
    EXPECT_LT(gradcases::cross_entropy_masked_channels().max_err, kRelTol);
}

TEST(Gradients, SmoothedKlInBothArguments) { EXPECT_LT(gradcases::smoothed_kl_both_arguments().max_err, kRelTol); }

TEST(Gradients, FullAdjointLossThroughAdjoinedNetwork) {
    const auto c = gradcases::full_adjoint_loss();
    EXPECT_GE(c.params, 200u);
    EXPECT_LT(c.max_err, kRelTol);
}

TEST(Gradients, FiniteDiffRejectsNonPositiveStep) {
    auto t = Tensor<double>({2}, 1.0);
    EXPECT_THROW(finite_diff_grad([](const Tensor<double>&) { return 0.0; }, t, 0.0), ContractError);
}

TEST(Gradients, RelativeErrorFloor) {
    EXPECT_NEAR(relative_error(1.0, 1.1, 1e-7), 0.1 / 1.1, 1e-15);
    EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0, 1e-7), 1e-2);
}
