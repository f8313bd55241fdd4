#include <gtest/gtest.h>

#include <cmath>

#include "adjnet/trainer.hpp"

using namespace adjnet;

namespace {

TrainConfig tiny_config(TrainMode mode, std::size_t epochs) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.epochs = epochs;
    cfg.batch_size = 10;
    cfg.seed = 5;
    cfg.net.stem = {4};
    cfg.net.stages = {{4, 1, {2, 0.0, 1}}, {8, 1, {2, 0.0, 1}}};
    return cfg;
}

const Dataset& train_set() {
    static const Dataset ds = synthetic_dataset(3, 11);
    return ds;
}

const Dataset& val_set() {
    static const Dataset ds = synthetic_dataset(2, 12);
    return ds;
}

}  // namespace

TEST(Train, AdjointMetricsShape) {
    const auto res = train(tiny_config(TrainMode::adjoint, 4), train_set(), val_set());
    ASSERT_FALSE(res.aborted) << res.abort_reason;
    ASSERT_EQ(res.metrics.size(), 4u);
    const double lambdas[] = {0.0, 0.25, 1.0, 1.0};
    for (std::size_t e = 0; e < 4; ++e) {
        const auto& r = res.metrics[e];
        EXPECT_EQ(r.epoch, e + 1);
        EXPECT_DOUBLE_EQ(r.lambda, lambdas[e]);
        EXPECT_TRUE(std::isfinite(r.train_total_loss));
        EXPECT_GE(r.val_top1_big, 0.0);
        EXPECT_LE(r.val_top1_big, r.val_top5_big);
        EXPECT_LE(r.val_top1_small, r.val_top5_small);
        EXPECT_LE(r.val_top5_small, 100.0);
    }
    EXPECT_LT(res.metrics.back().lr, 1e-3);
    EXPECT_EQ(res.clock.current_epoch, 4u);
}

TEST(Train, StandardModeLeavesSmallColumnsEmpty) {
    const auto res = train(tiny_config(TrainMode::standard, 2), train_set(), val_set());
    ASSERT_EQ(res.metrics.size(), 2u);
    for (const auto& r : res.metrics) {
        EXPECT_TRUE(std::isnan(r.lambda));
        EXPECT_TRUE(std::isnan(r.val_top1_small));
        EXPECT_FALSE(std::isnan(r.val_top1_big));
    }
    EXPECT_NE(res.metrics[0].csv().find("nan"), std::string::npos);
}

TEST(Train, EvalEveryLeavesGaps) {
    auto cfg = tiny_config(TrainMode::standard, 3);
    cfg.eval_every = 2;
    const auto res = train(cfg, train_set(), val_set());
    EXPECT_TRUE(std::isnan(res.metrics[0].val_top1_big));
    EXPECT_FALSE(std::isnan(res.metrics[1].val_top1_big));
    EXPECT_FALSE(std::isnan(res.metrics[2].val_top1_big));
}

TEST(Train, ZeroLambdaAdjointMatchesStandardBigBranch) {
    // One epoch at t = 0: the KL term carries weight 0 throughout.
    auto a = train(tiny_config(TrainMode::adjoint, 1), train_set(), val_set());
    auto s = train(tiny_config(TrainMode::standard, 1), train_set(), val_set());
    auto sp = s.net.parameters();
    std::size_t j = 0;
    for (auto& p : a.net.parameters()) {
        if (p.name.find("bn_small") != std::string::npos) continue;
        ASSERT_EQ(p.name, sp[j].name);
        EXPECT_EQ(p.tensor.values(), sp[j].tensor.values()) << p.name;
        ++j;
    }
    EXPECT_EQ(j, sp.size());
    EXPECT_EQ(a.metrics[0].val_top1_big, s.metrics[0].val_top1_big);
}

TEST(Train, Deterministic) {
    const auto a = train(tiny_config(TrainMode::adjoint, 2), train_set(), val_set());
    const auto b = train(tiny_config(TrainMode::adjoint, 2), train_set(), val_set());
    for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(a.metrics[e].csv(), b.metrics[e].csv());
}

TEST(Train, TeacherStudentTwoPhases) {
    const auto res = train(tiny_config(TrainMode::teacher_student, 2), train_set(), val_set());
    ASSERT_TRUE(res.teacher.has_value());
    ASSERT_EQ(res.metrics.size(), 4u);
    for (std::size_t e = 0; e < 4; ++e) EXPECT_EQ(res.metrics[e].epoch, e + 1);
    EXPECT_TRUE(std::isnan(res.metrics[0].lambda));
    EXPECT_TRUE(std::isnan(res.metrics[1].val_top1_small));
    EXPECT_EQ(res.metrics[2].lambda, 1.0);
    EXPECT_FALSE(std::isnan(res.metrics[3].val_top1_small));
    // Teacher accuracy is carried into the student rows.
    EXPECT_EQ(res.metrics[3].val_top1_big, res.metrics[1].val_top1_big);
}

TEST(Train, DropoutModeRuns) {
    auto cfg = tiny_config(TrainMode::dropout, 1);
    cfg.dropout_keep = 0.75;
    const auto res = train(cfg, train_set(), val_set());
    EXPECT_EQ(res.net.spec().dropout_keep, 0.75);
    EXPECT_EQ(res.net.mode(), NetMode::standard);
}

TEST(Train, DivergenceRestoresLastGoodState) {
    auto cfg = tiny_config(TrainMode::standard, 6);
    cfg.base_lr = 1e30;
    cfg.warmup_fraction = 0.0;
    auto res = train(cfg, train_set(), val_set());
    ASSERT_TRUE(res.aborted);
    EXPECT_NE(res.abort_reason.find("non-finite"), std::string::npos);
    for (auto& p : res.net.parameters())
        for (float v : p.tensor.values()) ASSERT_TRUE(std::isfinite(v)) << p.name;
}

TEST(Train, InvalidConfigsRejected) {
    auto cfg = tiny_config(TrainMode::adjoint, 0);
    EXPECT_THROW(train(cfg, train_set(), val_set()), ConfigError);
    cfg = tiny_config(TrainMode::dropout, 1);
    cfg.dropout_keep = 1.0;
    EXPECT_THROW(train(cfg, train_set(), val_set()), ConfigError);
    cfg = tiny_config(TrainMode::adjoint, 1);
    EXPECT_THROW(train(cfg, Dataset{}, val_set()), ConfigError);
    EXPECT_THROW(train(cfg, synthetic_dataset(1, 1, 5), val_set()), ConfigError);
    EXPECT_THROW(parse_train_mode("mixup"), ConfigError);
    EXPECT_EQ(parse_train_mode("teacher-student"), TrainMode::teacher_student);
}

TEST(EvalAccumulator, PerfectAndUniformPredictors) {
    const std::vector<std::size_t> labels{0, 3, 7, 9};
    std::vector<double> perfect(40, 0.0), uniform(40, 0.1);
    for (std::size_t r = 0; r < 4; ++r) perfect[r * 10 + labels[r]] = 1.0;
    EvalAccumulator a;
    a.add<double>(perfect, labels, 10);
    EXPECT_EQ(a.result().top1, 100.0);
    EXPECT_EQ(a.result().top5, 100.0);
    EXPECT_EQ(a.result().mean_ce, 0.0);

    // Ties rank lower indices first: label k has rank k.
    EvalAccumulator u;
    u.add<double>(uniform, labels, 10);
    EXPECT_EQ(u.result().top1, 25.0);
    EXPECT_EQ(u.result().top5, 50.0);
    EXPECT_NEAR(u.result().mean_ce, std::log(10.0), 1e-12);
}

TEST(Evaluate, AgreesWithManualForward) {
    auto cfg = tiny_config(TrainMode::adjoint, 1);
    Network<float> net(cfg.net, NetMode::adjoined, 3);
    const auto& ds = val_set();
    const auto r = evaluate(net, ds, Branch::small, 7);
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto b = normalize<float>(gather(ds, idx), 10);
    net.set_training(false);
    NoGradGuard ng;
    const auto p = softmax(net.logits_small(b.images));
    EvalAccumulator acc;
    acc.add<float>(p.data(), b.classes, 10);
    EXPECT_EQ(r.top1, acc.result().top1);
    EXPECT_NEAR(r.mean_ce, acc.result().mean_ce, 1e-5);
}

TEST(MetricsRow, CsvFormat) {
    MetricsRow r;
    r.epoch = 3;
    r.train_total_loss = 1.5;
    r.lr = 1e-4;
    EXPECT_EQ(r.csv(), "3,1.5,nan,nan,nan,nan,nan,nan,0.0001");
    EXPECT_EQ(MetricsRow::csv_header().find("epoch,"), 0u);
}
