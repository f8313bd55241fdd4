#pragma once

// Training loops for the four modes (standard, standard + dropout, adjoint,
// two-phase teacher-student) and evaluation of either branch.

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "loss.hpp"
#include "network.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "rng.hpp"

namespace adjnet {

enum class TrainMode { standard, dropout, adjoint, teacher_student };

inline const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::standard: return "standard";
        case TrainMode::dropout: return "dropout";
        case TrainMode::adjoint: return "adjoint";
        case TrainMode::teacher_student: return "teacher-student";
    }
    return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
    if (s == "standard") return TrainMode::standard;
    if (s == "dropout") return TrainMode::dropout;
    if (s == "adjoint") return TrainMode::adjoint;
    if (s == "teacher-student" || s == "teacher_student") return TrainMode::teacher_student;
    throw ConfigError("unknown training mode '" + std::string(s) + "'");
}

struct TrainConfig {
    TrainMode mode = TrainMode::adjoint;
    std::size_t epochs = 1;
    std::size_t batch_size = 64;
    double base_lr = 1e-3;
    double warmup_fraction = 0.1;
    std::uint64_t seed = 0;
    LossConfig loss;
    double dropout_keep = 0.5;
    NetworkSpec net = NetworkSpec::desk_default();
    bool augment = true;
    std::size_t eval_every = 1;
    std::size_t eval_batch = 250;

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
            throw ConfigError("train: warmup_fraction must be in [0,1)");
        }
        if (!(base_lr > 0.0)) throw ConfigError("train: base_lr must be > 0");
        if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
        if (mode == TrainMode::dropout && !(dropout_keep > 0.0 && dropout_keep < 1.0)) {
            throw ConfigError("train: dropout keep must be in (0,1)");
        }
        loss.validate();
        net.validate();
    }
};

inline constexpr double nan_v = std::numeric_limits<double>::quiet_NaN();

/// One line of metrics.csv. Fields that do not apply to a mode hold NaN.
struct MetricsRow {
    std::size_t epoch = 0;
    double train_total_loss = nan_v;
    double val_ce_loss = nan_v;
    double val_top1_big = nan_v;
    double val_top5_big = nan_v;
    double val_top1_small = nan_v;
    double val_top5_small = nan_v;
    double lambda = nan_v;
    double lr = nan_v;

    static std::string csv_header() {
        return "epoch,train_total_loss,val_ce_loss,val_top1_big,val_top5_big,val_top1_small,val_top5_small,"
               "lambda,lr";
    }

    std::string csv() const {
        auto f = [](double v) {
            if (std::isnan(v)) return std::string("nan");
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.9g", v);
            return std::string(buf);
        };
        return std::to_string(epoch) + "," + f(train_total_loss) + "," + f(val_ce_loss) + "," +
               f(val_top1_big) + "," + f(val_top5_big) + "," + f(val_top1_small) + "," + f(val_top5_small) +
               "," + f(lambda) + "," + f(lr);
    }
};

struct EvalResult {
    double top1 = 0.0;
    double top5 = 0.0;
    double mean_ce = 0.0;
};

/// Accuracy and mean cross-entropy from probability rows. A class's rank
/// counts strictly larger entries plus equal entries at lower indices.
struct EvalAccumulator {
    std::size_t seen = 0, hit1 = 0, hit5 = 0;
    double ce = 0.0;

    template <class T>
    void add(std::span<const T> probs, std::span<const std::size_t> labels, std::size_t classes) {
        for (std::size_t r = 0; r < labels.size(); ++r) {
            const T* row = probs.data() + r * classes;
            const std::size_t l = labels[r];
            std::size_t rank = 0;
            for (std::size_t i = 0; i < classes; ++i) {
                if (row[i] > row[l] || (row[i] == row[l] && i < l)) {
                    ++rank;
                }
            }
            hit1 += rank < 1 ? 1 : 0;
            hit5 += rank < 5 ? 1 : 0;
            ce -= std::log(std::max(static_cast<double>(row[l]), 1e-300));
            ++seen;
        }
    }

    EvalResult result() const {
        if (seen == 0) return {};
        const double n = static_cast<double>(seen);
        return {100.0 * static_cast<double>(hit1) / n, 100.0 * static_cast<double>(hit5) / n, ce / n};
    }
};

/// Eval-mode accuracy of one branch. Branch::big on a standard network is
/// the standard forward pass.
template <class T>
EvalResult evaluate(Network<T>& net, const Dataset& ds, Branch branch, std::size_t batch = 250) {
    if (ds.num_classes != net.spec().num_classes) {
        throw ConfigError("evaluate: dataset has " + std::to_string(ds.num_classes) + " classes, network " +
                          std::to_string(net.spec().num_classes));
    }
    NoGradGuard no_grad;
    const bool was_training = net.training();
    net.set_training(false);
    EvalAccumulator acc;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < ds.size(); start += batch) {
        idx.resize(std::min(batch, ds.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const auto b = normalize<T>(gather(ds, idx), ds.num_classes);
        const Tensor<T> logits = branch == Branch::big ? net.logits_standard(b.images) : net.logits_small(b.images);
        const Tensor<T> p = softmax(logits);
        acc.add<T>(p.data(), b.classes, ds.num_classes);
    }
    net.set_training(was_training);
    return acc.result();
}

struct TrainResult {
    Network<float> net;                    // trained model (student in teacher-student mode)
    std::optional<Network<float>> teacher;  // teacher-student mode only
    std::vector<MetricsRow> metrics;
    TrainClock clock;
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

inline void check_dataset(const Dataset& ds, const NetworkSpec& spec, const char* what) {
    if (ds.size() == 0) {
        throw ConfigError(std::string("train: ") + what + " set is empty");
    }
    if (ds.num_classes != spec.num_classes || ds.channels != spec.in_channels) {
        throw ConfigError(std::string("train: ") + what + " set (" + std::to_string(ds.channels) + " channels, " +
                          std::to_string(ds.num_classes) + " classes) does not match the network spec");
    }
}

/// Runs `epochs` epochs, calling step(batch, clock, lr) for each batch and
/// finish(epoch, mean_loss, lambda, lr) at every epoch end. Returns false
/// if a non-finite loss or gradient stopped the run.
template <class Step, class Finish>
bool run_epochs(const TrainConfig& cfg, const Dataset& train, TrainClock& clock, Rng& shuffle_rng, Rng& aug_rng,
                Step&& step, Finish&& finish) {
    const std::size_t steps = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = steps * cfg.epochs;
    clock.total_epochs = cfg.epochs;
    clock.steps_per_epoch = steps;
    const AugmentPolicy policy = AugmentPolicy::for_dataset(train.name);
    std::vector<std::size_t> order(train.size());
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        clock.current_epoch = e;
        clock.current_step = 0;
        const double lam = lambda_value(cfg.loss, clock.t(Granularity::epoch));
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        double lr = 0.0;
        for (std::size_t s = 0; s < steps; ++s) {
            clock.current_step = s;
            const std::size_t lo = s * cfg.batch_size;
            const std::size_t hi = std::min(lo + cfg.batch_size, train.size());
            const RawBatch raw = gather(train, std::span<const std::size_t>(order.data() + lo, hi - lo));
            const DatasetBatch<float> batch =
                cfg.augment ? augment<float>(raw, aug_rng, policy, train.num_classes)
                            : normalize<float>(raw, train.num_classes, policy);
            lr = cosine_warmup_lr(e * steps + s, total, cfg.base_lr, cfg.warmup_fraction);
            double loss = 0.0;
            try {
                loss = step(batch, clock, lr);
            } catch (const TrainingError&) {
                return false;  // non-finite gradient, nothing was updated
            }
            if (!std::isfinite(loss)) {
                return false;
            }
            loss_sum += loss;
        }
        finish(e, loss_sum / static_cast<double>(steps), lam, lr);
    }
    clock.current_epoch = cfg.epochs;
    clock.current_step = 0;
    return true;
}

}  // namespace detail

/// Trains according to cfg.mode. On a non-finite loss or gradient the returned network is
/// the last state that completed an epoch, and `aborted` is set.
inline TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& val_set) {
    cfg.validate();
    detail::check_dataset(train_set, cfg.net, "training");
    detail::check_dataset(val_set, cfg.net, "validation");

    NetworkSpec spec = cfg.net;
    spec.dropout_keep = cfg.mode == TrainMode::dropout ? cfg.dropout_keep : 1.0;
    const NetMode net_mode =
        (cfg.mode == TrainMode::adjoint || cfg.mode == TrainMode::teacher_student) ? NetMode::adjoined
                                                                                     : NetMode::standard;
    TrainResult res{Network<float>(spec, net_mode, cfg.seed), std::nullopt, {}, {}, false, {}};
    Rng shuffle_rng(derive_seed(cfg.seed, stream::shuffle));
    Rng aug_rng(derive_seed(cfg.seed, stream::augment));
    const float eps = static_cast<float>(cfg.loss.epsilon);

    auto eval_due = [&](std::size_t e) { return (e + 1) % cfg.eval_every == 0 || e + 1 == cfg.epochs; };

    auto abort_with = [&](Network<float>& live, Network<float>& good, const std::string& phase) {
        live.copy_state_from(good);
        res.aborted = true;
        res.abort_reason = "non-finite loss or gradient during " + phase + " epoch " +
                           std::to_string(res.clock.current_epoch + 1) + " step " +
                           std::to_string(res.clock.current_step) + "; restored last good state";
    };

    if (cfg.mode != TrainMode::teacher_student) {
        Network<float>& net = res.net;
        Network<float> good = net.clone();
        AdamState opt;
        auto step = [&](const DatasetBatch<float>& b, const TrainClock& clock, double lr) {
            net.zero_grad();
            net.set_training(true);
            Tensor<float> loss;
            if (cfg.mode == TrainMode::adjoint) {
                const auto out = forward_adjoined(net, b.images);
                loss = adjoint_loss<float>(b.classes, out, clock, cfg.loss).total;
            } else {
                loss = cross_entropy_logits(net.logits_standard(b.images), std::span<const std::size_t>(b.classes));
            }
            const double v = loss.item();
            if (!std::isfinite(v)) return v;
            backward(loss);
            auto params = net.parameters();
            adam_step(params, opt, lr);
            return v;
        };
        auto finish = [&](std::size_t e, double mean_loss, double lam, double lr) {
            MetricsRow row;
            row.epoch = e + 1;
            row.train_total_loss = mean_loss;
            row.lr = lr;
            if (cfg.mode == TrainMode::adjoint) row.lambda = lam;
            if (eval_due(e)) {
                const EvalResult big = evaluate(net, val_set, Branch::big, cfg.eval_batch);
                row.val_ce_loss = big.mean_ce;
                row.val_top1_big = big.top1;
                row.val_top5_big = big.top5;
                if (cfg.mode == TrainMode::adjoint) {
                    const EvalResult small = evaluate(net, val_set, Branch::small, cfg.eval_batch);
                    row.val_top1_small = small.top1;
                    row.val_top5_small = small.top5;
                }
            }
            res.metrics.push_back(row);
            good.copy_state_from(net);
        };
        if (!detail::run_epochs(cfg, train_set, res.clock, shuffle_rng, aug_rng, step, finish)) {
            abort_with(net, good, "training");
        }
        return res;
    }

    // Phase 1: the full network alone with cross-entropy.
    NetworkSpec teacher_spec = spec;
    for (auto& st : teacher_spec.stages) st.mask = {};
    res.teacher.emplace(teacher_spec, NetMode::standard, derive_seed(cfg.seed, 1001));
    Network<float>& teacher = *res.teacher;
    Network<float>& student = res.net;
    EvalResult teacher_eval;
    {
        Network<float> good = teacher.clone();
        AdamState opt;
        auto step = [&](const DatasetBatch<float>& b, const TrainClock&, double lr) {
            teacher.zero_grad();
            teacher.set_training(true);
            Tensor<float> loss =
                cross_entropy_logits(teacher.logits_standard(b.images), std::span<const std::size_t>(b.classes));
            const double v = loss.item();
            if (!std::isfinite(v)) return v;
            backward(loss);
            auto params = teacher.parameters();
            adam_step(params, opt, lr);
            return v;
        };
        auto finish = [&](std::size_t e, double mean_loss, double, double lr) {
            MetricsRow row;
            row.epoch = e + 1;
            row.train_total_loss = mean_loss;
            row.lr = lr;
            if (eval_due(e)) {
                teacher_eval = evaluate(teacher, val_set, Branch::big, cfg.eval_batch);
                row.val_ce_loss = teacher_eval.mean_ce;
                row.val_top1_big = teacher_eval.top1;
                row.val_top5_big = teacher_eval.top5;
            }
            res.metrics.push_back(row);
            good.copy_state_from(teacher);
        };
        if (!detail::run_epochs(cfg, train_set, res.clock, shuffle_rng, aug_rng, step, finish)) {
            abort_with(teacher, good, "teacher");
            return res;
        }
    }

    // Phase 2: frozen teacher, small branch of the student with CE + KL.
    teacher.set_training(false);
    Network<float> good = student.clone();
    AdamState opt;
    auto step = [&](const DatasetBatch<float>& b, const TrainClock&, double lr) {
        Tensor<float> p_teacher;
        {
            NoGradGuard no_grad;
            p_teacher = softmax(teacher.logits_standard(b.images));
        }
        student.zero_grad();
        student.set_training(true);
        const Tensor<float> lq = student.logits_small(b.images);
        Tensor<float> loss = add(cross_entropy_logits(lq, std::span<const std::size_t>(b.classes)),
                                 kl_smoothed(p_teacher, softmax(lq), eps));
        const double v = loss.item();
        if (!std::isfinite(v)) return v;
        backward(loss);
        auto params = student.parameters();
        adam_step(params, opt, lr);
        return v;
    };
    const std::size_t offset = cfg.epochs;
    auto finish = [&](std::size_t e, double mean_loss, double, double lr) {
        MetricsRow row;
        row.epoch = offset + e + 1;
        row.train_total_loss = mean_loss;
        row.lambda = 1.0;
        row.lr = lr;
        if (eval_due(e)) {
            row.val_ce_loss = teacher_eval.mean_ce;
            row.val_top1_big = teacher_eval.top1;
            row.val_top5_big = teacher_eval.top5;
            const EvalResult small = evaluate(student, val_set, Branch::small, cfg.eval_batch);
            row.val_top1_small = small.top1;
            row.val_top5_small = small.top5;
        }
        res.metrics.push_back(row);
        good.copy_state_from(student);
    };
    if (!detail::run_epochs(cfg, train_set, res.clock, shuffle_rng, aug_rng, step, finish)) {
        abort_with(student, good, "student");
    }
    return res;
}

}  // namespace adjnet
