#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace adjnet {

/// Central differences of a scalar function with respect to every element of
/// theta. theta is perturbed in place (and restored), so f may read it either
/// through its argument or through shared state such as a network parameter.
/// The step for element i is `h`, or `h * (1 + |theta_i|)` when `relative`.
template <class T, class F>
Tensor<T> finite_diff_grad(F&& f, Tensor<T>& theta, T h, bool relative = false) {
    if (!(h > T(0))) {
        throw ContractError("finite_diff_grad: step must be positive");
    }
    NoGradGuard no_grad;
    Tensor<T> g(theta.shape());
    for (std::size_t i = 0; i < theta.numel(); ++i) {
        const T orig = theta[i];
        const T step = relative ? h * (T(1) + std::abs(orig)) : h;
        theta[i] = orig + step;
        const T fp = static_cast<T>(f(theta));
        theta[i] = orig - step;
        const T fm = static_cast<T>(f(theta));
        theta[i] = orig;
        g[i] = (fp - fm) / (T(2) * step);
    }
    return g;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero derivatives from
/// being judged on rounding noise alone.
inline double relative_error(double a, double b, double floor) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace adjnet
