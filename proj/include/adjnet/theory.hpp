#pragma once

// Numerical check of the induced-penalty result for adjoined networks built
// only from convolution and linear layers (relu or identity activations, no
// batch norm).
//
// For one scalar parameter theta write D(theta) = sum_i p_i (log p_i - log q_i).
// Differentiating twice gives, for a shared parameter (q depends on theta):
//
//   D'  = sum_i p_i' (log p_i - log q_i) + p_i' - q_i' p_i / q_i
//   D'' = sum_i p_i (p_i'/p_i - q_i'/q_i)^2                       (penalty)
//       + sum_i p_i'' (log p_i - log q_i) + p_i'' - q_i'' p_i / q_i   (dropped)
//
// and for an unshared parameter (q constant) the same with q_i' = q_i'' = 0.
// The "dropped" part vanishes wherever p == q, so there the penalty is the
// exact curvature. The probe measures p_i, q_i and their derivatives by
// five-point finite differences of the forward pass and checks both facts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "gradcheck.hpp"
#include "masks.hpp"
#include "network.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace adjnet::theory {

enum class Activation { relu, identity };

struct ProbeSpec {
    std::size_t in_channels = 2;
    std::size_t height = 5;
    std::size_t width = 5;
    std::vector<std::size_t> conv_widths{4, 4};
    std::size_t num_classes = 6;
    Activation activation = Activation::relu;
    MaskSpec mask{2, 0.3, 0};
};

/// Location of one scalar weight. `layer == conv_layers` addresses the head.
struct ParamSlot {
    std::size_t layer = 0;
    std::size_t index = 0;
    bool shared = true;
};

/// Plain conv stack + linear head in double precision, adjoined through
/// per-layer masks on the conv weights. The head is shared by both branches.
class ProbeNet {
public:
    ProbeNet(ProbeSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
        if (spec_.conv_widths.empty() || spec_.num_classes < 2) {
            throw ConfigError("probe net: needs >= 1 conv layer and >= 2 classes");
        }
        Rng rng(derive_seed(seed, stream::init));
        std::size_t c = spec_.in_channels;
        for (std::size_t l = 0; l < spec_.conv_widths.size(); ++l) {
            const std::size_t w = spec_.conv_widths[l];
            Tensor<double> weight(Shape{w, 3, 3, c});
            const double sd = std::sqrt(2.0 / static_cast<double>(9 * c));
            for (auto& v : weight.values()) {
                v = rng.normal() * sd;
            }
            MaskSpec ms = spec_.mask;
            ms.seed = derive_seed(spec_.mask.seed, l);
            masks_.push_back(build_mask(weight.shape(), ms));
            mask_tensors_.push_back(masks_.back().as_tensor<double>());
            weights_.push_back(std::move(weight));
            c = w;
        }
        const std::size_t features = c * spec_.height * spec_.width;
        head_w_ = Tensor<double>(Shape{spec_.num_classes, features});
        head_b_ = Tensor<double>(Shape{spec_.num_classes});
        const double sd = std::sqrt(2.0 / static_cast<double>(features));
        for (auto& v : head_w_.values()) {
            v = rng.normal() * sd;
        }
        for (auto& v : head_b_.values()) {
            v = 0.1 * rng.normal();
        }
    }

    const ProbeSpec& spec() const { return spec_; }
    std::size_t conv_layers() const { return weights_.size(); }
    const Mask& mask(std::size_t layer) const { return masks_.at(layer); }
    const Tensor<double>& weight(std::size_t layer) const { return weights_.at(layer); }
    const Tensor<double>& head_weight() const { return head_w_; }
    const Tensor<double>& head_bias() const { return head_b_; }

    std::size_t layer_size(std::size_t layer) const {
        return layer == conv_layers() ? head_w_.numel() : weights_.at(layer).numel();
    }

    bool is_shared(std::size_t layer, std::size_t index) const {
        return layer == conv_layers() || masks_.at(layer)[index] == 1;
    }

    double& value(const ParamSlot& s) {
        return s.layer == conv_layers() ? head_w_[s.index] : weights_.at(s.layer)[s.index];
    }

    /// Sets every masked weight to 0 so that p == q for every input.
    void zero_masked_weights() {
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            for (std::size_t i = 0; i < weights_[l].numel(); ++i) {
                if (masks_[l][i] == 0) {
                    weights_[l][i] = 0.0;
                }
            }
        }
    }

    /// Class probabilities of one branch for a [1,C,H,W] input. `pattern`, if
    /// given, receives the relu on/off state of every unit.
    std::vector<double> probs(const Tensor<double>& x, Branch branch,
                              std::vector<std::uint8_t>* pattern = nullptr) const {
        NoGradGuard no_grad;
        Tensor<double> h = x;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            const Tensor<double> w =
                branch == Branch::small ? mul(weights_[l], mask_tensors_[l]) : weights_[l];
            h = conv2d(h, w, 1, 1);
            if (spec_.activation == Activation::relu) {
                if (pattern != nullptr) {
                    for (auto v : h.data()) {
                        pattern->push_back(v > 0.0 ? 1 : 0);
                    }
                }
                h = relu(h);
            }
        }
        h = reshape(h, {h.dim(0), h.numel() / h.dim(0)});
        Tensor<double> p = softmax(linear(h, head_w_, head_b_));
        return p.values();
    }

private:
    ProbeSpec spec_;
    std::vector<Tensor<double>> weights_;
    std::vector<Mask> masks_;
    std::vector<Tensor<double>> mask_tensors_;
    Tensor<double> head_w_;
    Tensor<double> head_b_;
};

/// Values and finite-difference derivatives of p and q with respect to one
/// slot, plus the finite-difference derivatives of the unsmoothed KL itself.
struct DerivativeBundle {
    std::vector<double> p, q, dp, dq, d2p, d2q;
    double fd_d1 = 0.0;
    double fd_d2 = 0.0;
    double step = 0.0;
    bool shared = true;
    bool kink_free = true;  // no relu changed state across the stencil
};

inline double kl_unsmoothed(const std::vector<double>& p, const std::vector<double>& q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            acc += p[i] * (std::log(p[i]) - std::log(q[i]));
        }
    }
    return acc;
}

namespace detail {
// Stencil helpers written so that five identical samples give exactly 0.
inline double d1_5pt(double m2, double m1, double p1, double p2, double h) {
    return (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
}
inline double d2_5pt(double m2, double m1, double c, double p1, double p2, double h) {
    return ((16.0 * (p1 + m1) - (p2 + m2)) - 30.0 * c) / (12.0 * h * h);
}
}  // namespace detail

/// Five-point central differences with step h = rel_step * (1 + |theta|).
inline DerivativeBundle probe_derivatives(ProbeNet& net, const Tensor<double>& input,
                                          const ParamSlot& slot, double rel_step = 1e-3) {
    if (!(rel_step > 0.0) || !std::isfinite(rel_step)) {
        throw ContractError("probe_derivatives: step must be positive and finite");
    }
    double& theta = net.value(slot);
    const double orig = theta;
    const double h = rel_step * (1.0 + std::abs(orig));
    if (!(orig + h != orig)) {
        throw ContractError("probe_derivatives: step vanishes at theta = " + std::to_string(orig));
    }
    const double offsets[5] = {-2.0, -1.0, 0.0, 1.0, 2.0};
    std::vector<double> ps[5], qs[5];
    std::vector<std::uint8_t> base_pattern;
    bool kink_free = true;
    for (int k = 0; k < 5; ++k) {
        theta = orig + offsets[k] * h;
        std::vector<std::uint8_t> pattern;
        ps[k] = net.probs(input, Branch::big, &pattern);
        qs[k] = net.probs(input, Branch::small, &pattern);
        if (k == 0) {
            base_pattern = pattern;
        } else if (pattern != base_pattern) {
            kink_free = false;
        }
    }
    theta = orig;

    DerivativeBundle b;
    b.step = h;
    b.shared = net.is_shared(slot.layer, slot.index);
    b.kink_free = kink_free;
    b.p = ps[2];
    b.q = qs[2];
    const std::size_t n = b.p.size();
    b.dp.resize(n);
    b.dq.resize(n);
    b.d2p.resize(n);
    b.d2q.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        b.dp[i] = detail::d1_5pt(ps[0][i], ps[1][i], ps[3][i], ps[4][i], h);
        b.dq[i] = detail::d1_5pt(qs[0][i], qs[1][i], qs[3][i], qs[4][i], h);
        b.d2p[i] = detail::d2_5pt(ps[0][i], ps[1][i], ps[2][i], ps[3][i], ps[4][i], h);
        b.d2q[i] = detail::d2_5pt(qs[0][i], qs[1][i], qs[2][i], qs[3][i], qs[4][i], h);
    }
    double kl[5];
    for (int k = 0; k < 5; ++k) {
        kl[k] = kl_unsmoothed(ps[k], qs[k]);
    }
    b.fd_d1 = detail::d1_5pt(kl[0], kl[1], kl[3], kl[4], h);
    b.fd_d2 = detail::d2_5pt(kl[0], kl[1], kl[2], kl[3], kl[4], h);
    return b;
}

inline constexpr double q_floor = 1e-12;

/// First derivative of D from the bundle.
inline double analytic_D1(const DerivativeBundle& b, bool shared) {
    double acc = 0.0;
    for (std::size_t i = 0; i < b.p.size(); ++i) {
        const double q = std::max(b.q[i], q_floor);
        acc += b.dp[i] * (std::log(b.p[i]) - std::log(q)) + b.dp[i];
        if (shared) {
            acc -= b.dq[i] * b.p[i] / q;
        }
    }
    return acc;
}

/// Complete second derivative of D before any simplification.
inline double analytic_full_D2(const DerivativeBundle& b, bool shared) {
    double acc = 0.0;
    for (std::size_t i = 0; i < b.p.size(); ++i) {
        const double p = b.p[i], dp = b.dp[i], d2p = b.d2p[i];
        const double q = std::max(b.q[i], q_floor);
        if (shared) {
            const double dq = b.dq[i], d2q = b.d2q[i];
            acc += d2p * (std::log(p) - std::log(q)) + dp * (dp / p - dq / q) + d2p -
                   (q * dq * dp + q * d2q * p - dq * dq * p) / (q * q);
        } else {
            acc += d2p * (std::log(p) - std::log(q)) + dp * dp / p + d2p;
        }
    }
    return acc;
}

/// sum_i p_i (log' p_i - log' q_i)^2, or sum_i p_i (log' p_i)^2 when unshared.
inline double simplified_penalty(const DerivativeBundle& b, bool shared) {
    double acc = 0.0;
    for (std::size_t i = 0; i < b.p.size(); ++i) {
        const double q = std::max(b.q[i], q_floor);
        const double r = b.dp[i] / b.p[i] - (shared ? b.dq[i] / q : 0.0);
        acc += b.p[i] * r * r;
    }
    return acc;
}

/// The p''/q'' terms that the penalty omits; zero whenever p == q.
inline double dropped_terms(const DerivativeBundle& b, bool shared) {
    double acc = 0.0;
    for (std::size_t i = 0; i < b.p.size(); ++i) {
        const double q = std::max(b.q[i], q_floor);
        acc += b.d2p[i] * (std::log(b.p[i]) - std::log(q)) + b.d2p[i];
        if (shared) {
            acc -= b.d2q[i] * b.p[i] / q;
        }
    }
    return acc;
}

struct ProbeFixture {
    std::string name;
    ProbeNet net;
    Tensor<double> input;
    bool engineered = false;  // masked weights zeroed: p == q
};

struct Tolerances {
    double d1_rel = 1e-4;
    double d2_rel = 1e-3;
    double penalty_abs = 1e-6;   // engineered fixtures, unshared slots
    double residual_rel = 1e-3;  // random fixtures
    double d1_floor = 1e-8;      // relative-error denominators
    double d2_floor = 1e-6;
    double min_prob = 1e-6;      // slots touching smaller probabilities are skipped
    double min_dp = 1e-8;        // |p'| below this counts as "p' == 0"
    std::size_t min_engineered_unshared = 0;
};

struct SlotRow {
    std::string fixture;
    ParamSlot slot;
    bool engineered = false;
    double fd_D1 = 0, analytic_D1 = 0, fd_D2 = 0, analytic_full_D2 = 0;
    double simplified_penalty = 0, dropped_terms = 0, residual = 0;
    double d1_err = 0, d2_err = 0, penalty_err = 0, residual_err = 0;
    bool penalty_checked = false;
    bool passed = true;
};

struct TheoremReport {
    std::vector<SlotRow> rows;
    std::size_t skipped_kink = 0;
    std::size_t skipped_small_prob = 0;
    std::size_t engineered_unshared = 0;  // engineered unshared slots with p' != 0
    std::size_t unshared_slots = 0;
    std::size_t shared_slots = 0;
    double max_d1_err = 0, max_d2_err = 0, max_penalty_err = 0, max_residual_err = 0;
    double max_abs_dropped_engineered = 0;
    bool passed = true;
    std::string failure;  // worst failing slot, when any
};

/// Five random conv/relu fixtures and one engineered p == q fixture.
inline std::vector<ProbeFixture> make_probe_fixtures(std::uint64_t seed) {
    std::vector<ProbeFixture> out;
    Rng rng(derive_seed(seed, stream::probe));
    auto random_input = [&](const ProbeSpec& s) {
        Tensor<double> x(Shape{1, s.in_channels, s.height, s.width});
        for (auto& v : x.values()) {
            v = rng.normal();
        }
        return x;
    };
    const std::vector<ProbeSpec> specs = {
        {2, 5, 5, {4, 4}, 6, Activation::relu, {2, 0.3, 0}},
        {3, 4, 4, {6}, 4, Activation::relu, {2, 0.5, 0}},
        {2, 5, 5, {4, 6, 4}, 10, Activation::relu, {2, 0.2, 0}},
        {1, 6, 6, {4, 4}, 5, Activation::identity, {4, 0.3, 0}},
        {2, 4, 4, {8, 4}, 8, Activation::relu, {4, 0.0, 0}},
    };
    for (std::size_t i = 0; i < specs.size(); ++i) {
        ProbeSpec s = specs[i];
        s.mask.seed = derive_seed(seed, 100 + i);
        ProbeNet net(s, derive_seed(seed, 200 + i));
        Tensor<double> x = random_input(s);
        out.push_back({"random" + std::to_string(i), std::move(net), std::move(x), false});
    }
    ProbeSpec e{2, 5, 5, {6, 4}, 6, Activation::relu, {2, 0.4, derive_seed(seed, 300)}};
    ProbeNet net(e, derive_seed(seed, 301));
    net.zero_masked_weights();
    Tensor<double> x = random_input(e);
    out.push_back({"engineered", std::move(net), std::move(x), true});
    return out;
}

/// Probes up to `n_slots` unshared and `n_slots` shared kink-free slots per
/// fixture and checks every derivative identity against its tolerance. On
/// engineered fixtures only unshared slots with p' != 0 count toward the
/// unshared quota.
inline TheoremReport verify_theorem(std::vector<ProbeFixture>& fixtures, std::size_t n_slots,
                                    const Tolerances& tol, std::uint64_t seed = 0) {
    TheoremReport rep;
    double worst = -1.0;
    Rng rng(derive_seed(seed, stream::probe + 1));
    for (auto& fx : fixtures) {
        ProbeNet& net = fx.net;
        std::vector<ParamSlot> unshared, shared;
        for (std::size_t l = 0; l <= net.conv_layers(); ++l) {
            for (std::size_t i = 0; i < net.layer_size(l); ++i) {
                (net.is_shared(l, i) ? shared : unshared).push_back({l, i, net.is_shared(l, i)});
            }
        }
        rng.shuffle(unshared);
        rng.shuffle(shared);
        for (auto* pool : {&unshared, &shared}) {
            std::size_t accepted = 0;
            for (const auto& slot : *pool) {
                if (accepted == n_slots) {
                    break;
                }
                const DerivativeBundle b = probe_derivatives(net, fx.input, slot);
                if (!b.kink_free) {
                    ++rep.skipped_kink;
                    continue;
                }
                const auto small = [&](double v) { return v < tol.min_prob; };
                if (std::any_of(b.p.begin(), b.p.end(), small) ||
                    std::any_of(b.q.begin(), b.q.end(), small)) {
                    ++rep.skipped_small_prob;
                    continue;
                }
                SlotRow row;
                row.fixture = fx.name;
                row.slot = slot;
                row.engineered = fx.engineered;
                row.fd_D1 = b.fd_d1;
                row.fd_D2 = b.fd_d2;
                row.analytic_D1 = analytic_D1(b, slot.shared);
                row.analytic_full_D2 = analytic_full_D2(b, slot.shared);
                row.simplified_penalty = simplified_penalty(b, slot.shared);
                row.dropped_terms = dropped_terms(b, slot.shared);
                row.residual = row.fd_D2 - row.simplified_penalty - row.dropped_terms;
                row.d1_err = relative_error(row.analytic_D1, row.fd_D1, tol.d1_floor);
                row.d2_err = relative_error(row.analytic_full_D2, row.fd_D2, tol.d2_floor);
                row.residual_err = relative_error(row.fd_D2, row.simplified_penalty + row.dropped_terms,
                                                  tol.d2_floor);
                bool ok = row.d1_err < tol.d1_rel && row.d2_err < tol.d2_rel;
                double badness = std::max(row.d1_err / tol.d1_rel, row.d2_err / tol.d2_rel);
                const double max_dp = std::abs(*std::max_element(
                    b.dp.begin(), b.dp.end(), [](double a, double c) { return std::abs(a) < std::abs(c); }));
                if (fx.engineered) {
                    rep.max_abs_dropped_engineered =
                        std::max(rep.max_abs_dropped_engineered, std::abs(row.dropped_terms));
                    if (!slot.shared && max_dp > tol.min_dp) {
                        row.penalty_checked = true;
                        row.penalty_err = std::abs(row.simplified_penalty - row.fd_D2);
                        ok = ok && row.penalty_err < tol.penalty_abs;
                        badness = std::max(badness, row.penalty_err / tol.penalty_abs);
                        ++rep.engineered_unshared;
                        ++accepted;
                        rep.max_penalty_err = std::max(rep.max_penalty_err, row.penalty_err);
                    }
                } else {
                    ok = ok && row.residual_err < tol.residual_rel;
                    badness = std::max(badness, row.residual_err / tol.residual_rel);
                    rep.max_residual_err = std::max(rep.max_residual_err, row.residual_err);
                }
                if (!(fx.engineered && !slot.shared)) {
                    ++accepted;
                }
                row.passed = ok;
                (slot.shared ? rep.shared_slots : rep.unshared_slots) += 1;
                rep.max_d1_err = std::max(rep.max_d1_err, row.d1_err);
                rep.max_d2_err = std::max(rep.max_d2_err, row.d2_err);
                if (!ok) {
                    rep.passed = false;
                    if (badness > worst) {
                        worst = badness;
                        rep.failure = fx.name + " layer " + std::to_string(slot.layer) + " index " +
                                      std::to_string(slot.index) + (slot.shared ? " (shared)" : " (unshared)");
                    }
                }
                rep.rows.push_back(row);
            }
        }
    }
    if (rep.engineered_unshared < tol.min_engineered_unshared) {
        rep.passed = false;
        rep.failure = "only " + std::to_string(rep.engineered_unshared) +
                      " engineered unshared slots with p' != 0 (need " +
                      std::to_string(tol.min_engineered_unshared) + ")";
    }
    return rep;
}

}  // namespace adjnet::theory
