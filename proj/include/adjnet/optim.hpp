#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "network.hpp"
#include "tensor.hpp"

namespace adjnet {

/// Linear warmup from 0 to base_lr over floor(warmup_fraction * total_steps)
/// steps, then half-cosine decay to 0 at total_steps.
inline double cosine_warmup_lr(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction) {
    if (step > total_steps) {
        throw ContractError("cosine_warmup_lr: step " + std::to_string(step) + " > total " +
                            std::to_string(total_steps));
    }
    const auto warmup = static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (total_steps == warmup) {
        return base_lr;
    }
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moment estimates for one parameter tensor.
struct AdamSlot {
    std::vector<double> m;
    std::vector<double> v;
};

struct AdamState {
    std::vector<AdamSlot> slots;
    std::size_t step = 0;
};

/// One bias-corrected Adam update over `params`, using each tensor's current
/// gradient (a tensor with no gradient is treated as having a zero one).
template <class T>
void adam_step(std::vector<NamedTensor<T>>& params, AdamState& state, double lr, const AdamConfig& cfg = {}) {
    if (state.slots.empty()) {
        state.slots.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.slots[i].m.assign(params[i].tensor.numel(), 0.0);
            state.slots[i].v.assign(params[i].tensor.numel(), 0.0);
        }
    }
    if (state.slots.size() != params.size()) {
        throw DimensionError("adam: state holds " + std::to_string(state.slots.size()) + " slots for " +
                             std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.slots[i].m.size() != params[i].tensor.numel()) {
            throw DimensionError("adam: state shape mismatch for " + params[i].name);
        }
        if (!params[i].tensor.has_grad()) {
            continue;
        }
        for (auto g : params[i].tensor.grad()) {
            if (!std::isfinite(static_cast<double>(g))) {
                throw TrainingError("adam: non-finite gradient in " + params[i].name);
            }
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& t = params[i].tensor;
        auto& s = state.slots[i];
        const bool has = t.has_grad();
        auto data = t.data();
        const std::span<T> grad = has ? t.grad() : std::span<T>{};
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = has ? static_cast<double>(grad[j]) : 0.0;
            s.m[j] = cfg.beta1 * s.m[j] + (1.0 - cfg.beta1) * g;
            s.v[j] = cfg.beta2 * s.v[j] + (1.0 - cfg.beta2) * g * g;
            const double mhat = s.m[j] / c1;
            const double vhat = s.v[j] / c2;
            data[j] = static_cast<T>(static_cast<double>(data[j]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

}  // namespace adjnet
