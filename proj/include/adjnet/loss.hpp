#pragma once

// Adjoint loss: cross-entropy of the big branch plus a time-weighted,
// epsilon-smoothed KL divergence between the big (p) and small (q) outputs.
//
//     L(y, p, q) = -y log p + lambda(t) * sum_i p_i log((p_i + eps) / (q_i + eps))

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "network.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace adjnet {

enum class Schedule { quadratic, linear, one_minus_cos, exp_minus_one, constant };
enum class Granularity { epoch, step };

inline const char* to_string(Schedule s) {
    switch (s) {
        case Schedule::quadratic: return "quadratic";
        case Schedule::linear: return "linear";
        case Schedule::one_minus_cos: return "one_minus_cos";
        case Schedule::exp_minus_one: return "exp_minus_one";
        case Schedule::constant: return "constant";
    }
    return "?";
}

inline Schedule parse_schedule(std::string_view s) {
    if (s == "quadratic") return Schedule::quadratic;
    if (s == "linear") return Schedule::linear;
    if (s == "one_minus_cos") return Schedule::one_minus_cos;
    if (s == "exp_minus_one") return Schedule::exp_minus_one;
    if (s == "constant") return Schedule::constant;
    throw ConfigError("unknown schedule '" + std::string(s) + "'");
}

inline const char* to_string(Granularity g) { return g == Granularity::epoch ? "epoch" : "step"; }

inline Granularity parse_granularity(std::string_view s) {
    if (s == "epoch") return Granularity::epoch;
    if (s == "step") return Granularity::step;
    throw ConfigError("unknown granularity '" + std::string(s) + "'");
}

struct LossConfig {
    Schedule schedule = Schedule::quadratic;
    double c = 1.0;
    double epsilon = 1e-6;
    Granularity granularity = Granularity::epoch;

    void validate() const {
        if (!(epsilon > 0.0)) {
            throw ConfigError("loss: epsilon must be > 0");
        }
        if (!(c >= 0.0)) {
            throw ConfigError("loss: c must be >= 0");
        }
    }
};

/// Training progress. t is current_epoch / total_epochs at epoch granularity,
/// or global_step / total_steps at step granularity.
struct TrainClock {
    std::size_t current_epoch = 0;
    std::size_t total_epochs = 1;
    std::size_t current_step = 0;  // within the epoch
    std::size_t steps_per_epoch = 1;

    double t(Granularity g) const {
        if (g == Granularity::epoch) {
            return std::min(1.0, static_cast<double>(current_epoch) / static_cast<double>(total_epochs));
        }
        const double total = static_cast<double>(total_epochs * steps_per_epoch);
        const double done = static_cast<double>(current_epoch * steps_per_epoch + current_step);
        return std::min(1.0, done / total);
    }
};

/// c * f(t) for the configured schedule f.
inline double lambda_value(const LossConfig& cfg, double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw ContractError("lambda_value: t must lie in [0,1], got " + std::to_string(t));
    }
    double f = 0.0;
    switch (cfg.schedule) {
        case Schedule::quadratic: f = std::min(4.0 * t * t, 1.0); break;
        case Schedule::linear: f = t; break;
        case Schedule::one_minus_cos: f = 1.0 - std::cos(t); break;
        case Schedule::exp_minus_one: f = std::exp(t) - 1.0; break;
        case Schedule::constant: f = 1.0; break;
    }
    return cfg.c * f;
}

namespace detail {

template <class T>
void require_probability_rows(std::span<const T> v, const char* op) {
    for (auto x : v) {
        if (x < T(0) || !std::isfinite(static_cast<double>(x))) {
            throw ContractError(std::string(op) + ": probability entries must be finite and >= 0");
        }
    }
}

inline std::vector<std::size_t> onehot_labels(std::span<const double> y, std::size_t n, std::size_t k) {
    std::vector<std::size_t> labels(n);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t ones = 0;
        for (std::size_t i = 0; i < k; ++i) {
            const double v = y[r * k + i];
            if (v == 1.0) {
                labels[r] = i;
                ++ones;
            } else if (v != 0.0) {
                ones = 2;
            }
        }
        if (ones != 1) {
            throw ContractError("cross_entropy: row " + std::to_string(r) + " of y is not one-hot");
        }
    }
    return labels;
}

}  // namespace detail

/// Batch mean of sum_i p_i log((p_i + eps) / (q_i + eps)); differentiable in
/// both p and q.
template <class T>
Tensor<T> kl_smoothed(const Tensor<T>& p, const Tensor<T>& q, T eps) {
    detail::require_rank(p.shape(), 2, "kl_smoothed");
    detail::require_same(p.shape(), q.shape(), "kl_smoothed");
    detail::require_probability_rows<T>(p.data(), "kl_smoothed");
    detail::require_probability_rows<T>(q.data(), "kl_smoothed");
    const std::size_t n = p.dim(0);
    T acc = T(0);
    for (std::size_t i = 0; i < p.numel(); ++i) {
        acc += p[i] * std::log((p[i] + eps) / (q[i] + eps));
    }
    const T inv_n = T(1) / static_cast<T>(n);
    Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
    if (needs_grad({&p, &q})) {
        record(out, "kl_smoothed", {p, q}, [eps, inv_n](TapeNode<T>& self) {
            auto& pn = *self.inputs[0];
            auto& qn = *self.inputs[1];
            const T go = self.grad[0] * inv_n;
            if (pn.requires_grad) {
                auto& g = pn.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const T pe = pn.data[i] + eps;
                    g[i] += go * (std::log(pe / (qn.data[i] + eps)) + pn.data[i] / pe);
                }
            }
            if (qn.requires_grad) {
                auto& g = qn.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] -= go * pn.data[i] / (qn.data[i] + eps);
                }
            }
        });
    }
    return out;
}

/// Plain-value smoothed KL of one or more rows (row-mean).
inline double kl_smoothed_value(std::span<const double> p, std::span<const double> q, std::size_t classes,
                                double eps) {
    if (p.size() != q.size() || classes == 0 || p.size() % classes != 0) {
        throw DimensionError("kl_smoothed_value: shape mismatch");
    }
    detail::require_probability_rows<double>(p, "kl_smoothed_value");
    detail::require_probability_rows<double>(q, "kl_smoothed_value");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i] * std::log((p[i] + eps) / (q[i] + eps));
    }
    return acc / static_cast<double>(p.size() / classes);
}

/// Batch mean of -log p[label] from logits, via a stable log-softmax.
template <class T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::span<const std::size_t> labels) {
    detail::require_rank(logits.shape(), 2, "cross_entropy_logits");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) {
        throw DimensionError("cross_entropy_logits: " + std::to_string(labels.size()) +
                             " labels for batch of " + std::to_string(n));
    }
    for (auto l : labels) {
        if (l >= k) {
            throw ContractError("cross_entropy_logits: label " + std::to_string(l) + " >= classes");
        }
    }
    Tensor<T> logp = log_softmax(logits);
    std::vector<T> pick(logp.numel(), T(0));
    for (std::size_t r = 0; r < n; ++r) {
        pick[r * k + labels[r]] = T(-1) / static_cast<T>(n);
    }
    return sum(mul(logp, Tensor<T>(logp.shape(), std::move(pick))));
}

/// Batch mean of -sum_i y_i log p_i for one-hot y and probability rows p.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& y, const Tensor<T>& p) {
    detail::require_rank(p.shape(), 2, "cross_entropy");
    detail::require_same(y.shape(), p.shape(), "cross_entropy");
    detail::require_probability_rows<T>(p.data(), "cross_entropy");
    const std::size_t n = p.dim(0), k = p.dim(1);
    std::vector<double> yd(y.data().begin(), y.data().end());
    const auto labels = detail::onehot_labels(yd, n, k);
    T acc = T(0);
    for (std::size_t r = 0; r < n; ++r) {
        acc -= std::log(p[r * k + labels[r]]);
    }
    const T inv_n = T(1) / static_cast<T>(n);
    Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
    if (needs_grad({&p})) {
        record(out, "cross_entropy", {p}, [labels, n, k, inv_n](TapeNode<T>& self) {
            auto& pn = *self.inputs[0];
            auto& g = pn.ensure_grad();
            for (std::size_t r = 0; r < n; ++r) {
                const std::size_t i = r * k + labels[r];
                g[i] -= self.grad[0] * inv_n / pn.data[i];
            }
        });
    }
    return out;
}

template <class T>
struct AdjointLossTerms {
    Tensor<T> total;
    double ce = 0.0;
    double kl = 0.0;
    double lambda = 0.0;
};

/// total = CE(y, p) + lambda(t) * KL_eps(p, q); CE uses the big branch only.
template <class T>
AdjointLossTerms<T> adjoint_loss(std::span<const std::size_t> labels, const AdjoinedOutput<T>& out,
                                 const TrainClock& clock, const LossConfig& cfg) {
    cfg.validate();
    const double lam = lambda_value(cfg, clock.t(cfg.granularity));
    Tensor<T> ce = cross_entropy_logits(out.logits_p, labels);
    Tensor<T> kl = kl_smoothed(out.p, out.q, static_cast<T>(cfg.epsilon));
    Tensor<T> total = add(ce, scale(kl, static_cast<T>(lam)));
    return {total, static_cast<double>(ce.item()), static_cast<double>(kl.item()), lam};
}

}  // namespace adjnet
