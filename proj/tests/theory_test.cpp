#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "adjnet/theory.hpp"
#include "test_util.hpp"

using namespace adjnet;
using namespace adjnet::theory;

namespace {

ProbeSpec identity_single_layer() {
    return {2, 3, 3, {3}, 4, Activation::identity, {1, 0.4, 5}};
}

Tensor<double> probe_input(const ProbeSpec& s, std::uint64_t seed) {
    return testutil::random_tensor<double>({1, s.in_channels, s.height, s.width}, seed);
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST(ProbeDerivatives, UnsharedSlotLeavesSmallBranchExactlyConstant) {
    auto fixtures = make_probe_fixtures(3);
    std::size_t seen = 0;
    for (auto& fx : fixtures) {
        for (std::size_t l = 0; l < fx.net.conv_layers() && seen < 30; ++l) {
            for (std::size_t i = 0; i < fx.net.layer_size(l) && seen < 30; ++i) {
                if (fx.net.is_shared(l, i)) continue;
                const auto b = probe_derivatives(fx.net, fx.input, {l, i, false});
                EXPECT_FALSE(b.shared);
                for (std::size_t k = 0; k < b.q.size(); ++k) {
                    EXPECT_EQ(b.dq[k], 0.0);
                    EXPECT_EQ(b.d2q[k], 0.0);
                }
                ++seen;
            }
        }
    }
    EXPECT_EQ(seen, 30u);
}

TEST(ProbeDerivatives, DerivativesOfDistributionSumToZero) {
    auto fixtures = make_probe_fixtures(4);
    for (auto& fx : fixtures) {
        for (std::size_t l = 0; l <= fx.net.conv_layers(); ++l) {
            for (std::size_t i = 0; i < fx.net.layer_size(l); i += 7) {
                const auto b = probe_derivatives(fx.net, fx.input, {l, i, fx.net.is_shared(l, i)});
                EXPECT_LT(std::abs(sum(b.dp)), 1e-6);
                EXPECT_LT(std::abs(sum(b.d2p)), 1e-6);
                EXPECT_LT(std::abs(sum(b.dq)), 1e-6);
            }
        }
    }
}

TEST(ProbeDerivatives, ClassificationFollowsMaskBit) {
    ProbeNet net({2, 4, 4, {4, 4}, 5, Activation::relu, {2, 0.3, 9}}, 1);
    for (std::size_t l = 0; l < net.conv_layers(); ++l)
        for (std::size_t i = 0; i < net.layer_size(l); ++i) EXPECT_EQ(net.is_shared(l, i), net.mask(l)[i] == 1);
    for (std::size_t i = 0; i < net.layer_size(net.conv_layers()); ++i) EXPECT_TRUE(net.is_shared(2, i));
}

TEST(ProbeDerivatives, HeadSlotMatchesSoftmaxHessian) {
    const auto spec = identity_single_layer();
    ProbeNet net(spec, 11);
    const auto x = probe_input(spec, 12);
    // Features of the big branch: one 3x3 pad-1 conv, identity activation.
    const auto& w = net.weight(0);
    const std::size_t cout = 3, cin = 2, H = 3, W = 3;
    std::vector<double> feat(cout * H * W, 0.0);
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
                for (std::size_t ky = 0; ky < 3; ++ky)
                    for (std::size_t kx = 0; kx < 3; ++kx)
                        for (std::size_t c = 0; c < cin; ++c) {
                            const long yy = static_cast<long>(i + ky) - 1, xx = static_cast<long>(j + kx) - 1;
                            if (yy < 0 || xx < 0 || yy >= 3 || xx >= 3) continue;
                            feat[(o * H + i) * W + j] +=
                                x[(c * H + static_cast<std::size_t>(yy)) * W + static_cast<std::size_t>(xx)] *
                                w[((o * 3 + ky) * 3 + kx) * cin + c];
                        }
    const std::size_t features = feat.size(), classes = 4;
    std::vector<double> z(classes);
    for (std::size_t k = 0; k < classes; ++k) {
        z[k] = net.head_bias()[k];
        for (std::size_t j = 0; j < features; ++j) z[k] += net.head_weight()[k * features + j] * feat[j];
    }
    std::vector<double> p(classes);
    const double mx = *std::max_element(z.begin(), z.end());
    double zs = 0.0;
    for (std::size_t k = 0; k < classes; ++k) zs += p[k] = std::exp(z[k] - mx);
    for (auto& v : p) v /= zs;

    for (std::size_t slot : {0ul, 5ul, 13ul, 20ul, 31ul, 35ul}) {
        const std::size_t k = slot / features, j = slot % features;
        const double h = feat[j];
        const auto b = probe_derivatives(net, x, {1, slot, true});
        for (std::size_t i = 0; i < classes; ++i) {
            const double d = (i == k ? 1.0 : 0.0) - p[k];
            const double dp = p[i] * d * h;
            const double d2p = h * h * (p[i] * d * d - p[i] * p[k] * (1.0 - p[k]));
            EXPECT_NEAR(b.p[i], p[i], 1e-12);
            EXPECT_NEAR(b.dp[i], dp, 1e-8);
            EXPECT_NEAR(b.d2p[i], d2p, 1e-6);
        }
    }
}

TEST(ProbeDerivatives, DegenerateStepRejected) {
    const auto spec = identity_single_layer();
    ProbeNet net(spec, 1);
    const auto x = probe_input(spec, 2);
    EXPECT_THROW(probe_derivatives(net, x, {0, 0, true}, 0.0), ContractError);
    EXPECT_THROW(probe_derivatives(net, x, {0, 0, true}, -1e-3), ContractError);
    EXPECT_THROW(probe_derivatives(net, x, {0, 0, true}, 1e-300), ContractError);
}

TEST(Formulas, EqualDistributionsGiveZeroFirstDerivative) {
    DerivativeBundle b;
    b.p = b.q = {0.2, 0.3, 0.5};
    b.dp = {0.1, -0.04, -0.06};
    b.dq = {-0.02, 0.05, -0.03};
    b.d2p = b.d2q = {0, 0, 0};
    EXPECT_NEAR(analytic_D1(b, true), 0.0, 1e-15);
    EXPECT_NEAR(analytic_D1(b, false), 0.0, 1e-15);
}

TEST(Formulas, UnsharedFirstDerivativeReducesToLogRatio) {
    DerivativeBundle b;
    b.p = {0.2, 0.3, 0.5};
    b.q = {0.4, 0.4, 0.2};
    b.dp = {0.1, -0.04, -0.06};
    b.dq = {0.0, 0.0, 0.0};
    double ref = 0.0;
    for (int i = 0; i < 3; ++i) ref += b.dp[i] * std::log(b.p[i] / b.q[i]);
    EXPECT_NEAR(analytic_D1(b, false), ref, 1e-15);
}

TEST(Formulas, HandEvaluatedPenalty) {
    DerivativeBundle b;
    b.p = b.q = {0.5, 0.5};
    b.dp = {0.1, -0.1};
    b.dq = {0.0, 0.0};
    EXPECT_NEAR(simplified_penalty(b, false), 0.04, 1e-15);
}

TEST(Formulas, MatchingLogDerivativesGiveZeroPenalty) {
    DerivativeBundle b;
    b.p = {0.2, 0.8};
    b.q = {0.4, 0.6};
    b.dp = {0.02, -0.02};
    b.dq = {0.04, -0.015};
    EXPECT_NEAR(simplified_penalty(b, true), 0.0, 1e-15);
}

TEST(Formulas, ConstantNetworkHasZeroCurvature) {
    DerivativeBundle b;
    b.p = {0.1, 0.9};
    b.q = {0.3, 0.7};
    b.dp = b.dq = b.d2p = b.d2q = {0.0, 0.0};
    EXPECT_EQ(analytic_full_D2(b, true), 0.0);
    EXPECT_EQ(analytic_full_D2(b, false), 0.0);
}

TEST(Formulas, PenaltyNonnegativeAndDecompositionExact) {
    Rng rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        DerivativeBundle b;
        const std::size_t k = 2 + rng.below(8);
        auto simplex = [&] {
            std::vector<double> v(k);
            double s = 0.0;
            for (auto& e : v) s += e = std::exp(rng.normal());
            for (auto& e : v) e /= s;
            return v;
        };
        b.p = simplex();
        b.q = simplex();
        for (auto* v : {&b.dp, &b.dq, &b.d2p, &b.d2q}) {
            v->resize(k);
            for (auto& e : *v) e = 0.1 * rng.normal();
        }
        for (bool shared : {true, false}) {
            EXPECT_GE(simplified_penalty(b, shared), 0.0);
            // full = penalty + dropped, as an algebraic identity.
            EXPECT_NEAR(analytic_full_D2(b, shared), simplified_penalty(b, shared) + dropped_terms(b, shared),
                        1e-10);
        }
    }
}

TEST(VerifyTheorem, PassesOnDefaultFixtures) {
    auto fixtures = make_probe_fixtures(7);
    Tolerances tol;
    tol.min_engineered_unshared = 20;
    const auto rep = verify_theorem(fixtures, 25, tol, 7);
    EXPECT_TRUE(rep.passed) << rep.failure;
    EXPECT_GE(rep.engineered_unshared, 20u);
    EXPECT_LT(rep.max_d1_err, 1e-4);
    EXPECT_LT(rep.max_d2_err, 1e-3);
    EXPECT_LT(rep.max_penalty_err, 1e-6);
    EXPECT_LT(rep.max_abs_dropped_engineered, 1e-6);
    EXPECT_GT(rep.shared_slots, 0u);
    EXPECT_GT(rep.unshared_slots, 0u);
    for (const auto& r : rep.rows) {
        EXPECT_NEAR(r.residual, r.fd_D2 - r.simplified_penalty - r.dropped_terms, 1e-12);
        EXPECT_GE(r.simplified_penalty, 0.0);
    }
}

TEST(VerifyTheorem, AllOnesMaskHasNoUnsharedSlots) {
    std::vector<ProbeFixture> fx;
    ProbeSpec s{2, 4, 4, {4}, 5, Activation::relu, {1, 0.0, 0}};
    fx.push_back({"ones", ProbeNet(s, 3), probe_input(s, 4), false});
    const auto rep = verify_theorem(fx, 10, Tolerances{}, 1);
    EXPECT_TRUE(rep.passed) << rep.failure;
    EXPECT_EQ(rep.unshared_slots, 0u);
    EXPECT_GT(rep.shared_slots, 0u);
}

TEST(VerifyTheorem, ZeroToleranceFails) {
    auto fixtures = make_probe_fixtures(7);
    Tolerances tol;
    tol.d1_rel = tol.d2_rel = tol.penalty_abs = tol.residual_rel = 0.0;
    const auto rep = verify_theorem(fixtures, 3, tol, 7);
    EXPECT_FALSE(rep.passed);
    EXPECT_FALSE(rep.failure.empty());
}

TEST(VerifyTheorem, QuotaShortfallFails) {
    auto fixtures = make_probe_fixtures(7);
    Tolerances tol;
    tol.min_engineered_unshared = 1000;
    const auto rep = verify_theorem(fixtures, 2, tol, 7);
    EXPECT_FALSE(rep.passed);
    EXPECT_NE(rep.failure.find("engineered"), std::string::npos);
}
