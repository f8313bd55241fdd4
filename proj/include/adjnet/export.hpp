#pragma once

// Structured export of the small branch, parameter accounting and latency
// measurement.
//
// Export keeps, per stage, the union of output channels that survive any of
// the stage's masks. Every other channel is identically zero in the small
// branch, so removing it (as an output of one layer and as an input of the
// next) leaves the computed function unchanged.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "errors.hpp"
#include "masks.hpp"
#include "network.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace adjnet {

namespace detail {

template <class T>
void export_conv(const AdjoinedConv<T>& src, AdjoinedConv<T>& dst, const std::vector<std::size_t>& outs,
                 const std::vector<std::size_t>& ins) {
    const Tensor<T>& w = src.weight();
    const std::size_t K = src.kernel(), cin = src.in_channels();
    auto& dw = dst.weight();
    for (std::size_t o = 0; o < outs.size(); ++o) {
        for (std::size_t ky = 0; ky < K; ++ky) {
            for (std::size_t kx = 0; kx < K; ++kx) {
                for (std::size_t i = 0; i < ins.size(); ++i) {
                    const std::size_t s = ((outs[o] * K + ky) * K + kx) * cin + ins[i];
                    const std::size_t d = ((o * K + ky) * K + kx) * ins.size() + i;
                    dw[d] = src.adjoined() && src.mask()[s] == 0 ? T(0) : w[s];
                }
            }
        }
    }
    if (!src.use_bn()) {
        return;
    }
    const Branch from = src.adjoined() ? Branch::small : Branch::big;
    const auto& sb = src.bn(from);
    auto& db = dst.bn(Branch::big);
    for (std::size_t o = 0; o < outs.size(); ++o) {
        const std::size_t c = outs[o];
        const bool live = !src.adjoined() || src.live_channels()[c] != T(0);
        db.gamma[o] = live ? sb.gamma[c] : T(0);
        db.beta[o] = live ? sb.beta[c] : T(0);
        db.stats.running_mean[o] = sb.stats.running_mean[c];
        db.stats.running_var[o] = sb.stats.running_var[c];
    }
}

}  // namespace detail

/// Channels of each stage that survive at least one of its masks.
template <class T>
std::vector<std::vector<std::size_t>> kept_channels(Network<T>& net) {
    std::vector<std::vector<std::size_t>> kept;
    for (std::size_t s = 0; s < net.stages().size(); ++s) {
        std::set<std::size_t> acc;
        for (std::size_t b = 0; b < net.stages()[s].size(); ++b) {
            auto& blk = net.stages()[s][b];
            for (auto* c : {&blk.conv1, &blk.conv2, blk.shortcut ? &*blk.shortcut : nullptr}) {
                if (c == nullptr) continue;
                if (!c->adjoined()) {
                    for (std::size_t i = 0; i < c->out_channels(); ++i) acc.insert(i);
                    continue;
                }
                const auto live = surviving_out_channels(c->mask());
                if (live.empty()) {
                    throw ExportError("export: stage " + std::to_string(s) + " block " + std::to_string(b) +
                                      " has a layer with no surviving channels");
                }
                acc.insert(live.begin(), live.end());
            }
        }
        kept.emplace_back(acc.begin(), acc.end());
    }
    return kept;
}

/// Standalone standard network computing exactly the small branch.
template <class T>
Network<T> export_small(Network<T>& net) {
    if (net.mode() != NetMode::adjoined) {
        throw ExportError("export: network is not adjoined");
    }
    const auto kept = kept_channels(net);
    NetworkSpec spec = net.spec();
    spec.dropout_keep = 1.0;
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
        spec.stages[s].width = kept[s].size();
        spec.stages[s].mask = {};
    }
    Network<T> out(spec, NetMode::standard, 0);
    for (std::size_t i = 0; i < net.stem().size(); ++i) {
        std::vector<std::size_t> all_out(net.stem()[i].out_channels()), all_in(net.stem()[i].in_channels());
        std::iota(all_out.begin(), all_out.end(), std::size_t{0});
        std::iota(all_in.begin(), all_in.end(), std::size_t{0});
        detail::export_conv(net.stem()[i], out.stem()[i], all_out, all_in);
    }
    std::vector<std::size_t> prev(net.stem().back().out_channels());
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t s = 0; s < kept.size(); ++s) {
        for (std::size_t b = 0; b < net.stages()[s].size(); ++b) {
            auto& src = net.stages()[s][b];
            auto& dst = out.stages()[s][b];
            const auto& ins = b == 0 ? prev : kept[s];
            detail::export_conv(src.conv1, dst.conv1, kept[s], ins);
            detail::export_conv(src.conv2, dst.conv2, kept[s], kept[s]);
            if (src.shortcut) {
                detail::export_conv(*src.shortcut, *dst.shortcut, kept[s], ins);
            }
        }
        prev = kept[s];
    }
    const std::size_t classes = net.spec().num_classes;
    const std::size_t width = net.head_weight().dim(1);
    for (std::size_t k = 0; k < classes; ++k) {
        for (std::size_t j = 0; j < prev.size(); ++j) {
            out.head_weight()[k * prev.size() + j] = net.head_weight()[k * width + prev[j]];
        }
        out.head_bias()[k] = net.head_bias()[k];
    }
    out.set_training(false);
    return out;
}

/// Parameter count of one layer, split into weights and batch-norm terms.
struct LayerCount {
    std::string name;
    std::size_t weights_full = 0;
    std::size_t weights_small = 0;
    std::size_t bn_full = 0;
    std::size_t bn_small = 0;
};

template <class T>
std::size_t count_nonzero(const Tensor<T>& t) {
    return static_cast<std::size_t>(std::count_if(t.data().begin(), t.data().end(), [](T v) { return v != T(0); }));
}

/// Conv and linear weights (stored zeros excluded unless count_zeros) plus
/// every batch-norm gamma and beta. An adjoined network is counted as its big
/// branch; its small branch is counted through export_small.
template <class T>
std::size_t count_params(Network<T>& net, bool include_head, bool count_zeros) {
    std::size_t n = 0;
    auto conv = [&](AdjoinedConv<T>& c, const std::string&) {
        n += count_zeros ? c.weight().numel() : count_nonzero(c.weight());
        if (c.use_bn()) {
            n += 2 * c.out_channels();
        }
    };
    for (std::size_t i = 0; i < net.stem().size(); ++i) {
        conv(net.stem()[i], "");
    }
    net.for_each_block_conv(conv);
    if (include_head) {
        n += (count_zeros ? net.head_weight().numel() : count_nonzero(net.head_weight())) + net.head_bias().numel();
    }
    return n;
}

struct LatencyStats {
    double median_ms = 0.0;
    double q1_ms = 0.0;
    double q3_ms = 0.0;
    double iqr_ms = 0.0;
    std::size_t runs = 0;
};

struct CompressionReport {
    std::size_t params_full = 0;  // incl. head
    std::size_t params_full_excl_head = 0;
    std::size_t params_small_excl_head = 0;
    std::size_t params_small_incl_head = 0;
    double ratio_excl_head = 1.0;
    double ratio_incl_head = 1.0;
    std::vector<LayerCount> layers;
    double latency_ratio = std::numeric_limits<double>::quiet_NaN();
};

/// Accounting for an adjoined network against its exported small form.
template <class T>
CompressionReport compression_report(Network<T>& net) {
    if (net.mode() != NetMode::adjoined) {
        throw ExportError("report: network is not adjoined");
    }
    Network<T> small = export_small(net);
    CompressionReport r;
    r.params_full = count_params(net, true, false);
    r.params_full_excl_head = count_params(net, false, false);
    r.params_small_incl_head = count_params(small, true, false);
    r.params_small_excl_head = count_params(small, false, false);
    r.ratio_excl_head = static_cast<double>(r.params_full_excl_head) / static_cast<double>(r.params_small_excl_head);
    r.ratio_incl_head = static_cast<double>(r.params_full) / static_cast<double>(r.params_small_incl_head);

    std::vector<std::pair<std::string, AdjoinedConv<T>*>> big, sm;
    for (std::size_t i = 0; i < net.stem().size(); ++i) {
        big.emplace_back("stem." + std::to_string(i), &net.stem()[i]);
        sm.emplace_back("stem." + std::to_string(i), &small.stem()[i]);
    }
    net.for_each_block_conv([&](AdjoinedConv<T>& c, const std::string& name) { big.emplace_back(name, &c); });
    small.for_each_block_conv([&](AdjoinedConv<T>& c, const std::string& name) { sm.emplace_back(name, &c); });
    for (std::size_t i = 0; i < big.size(); ++i) {
        LayerCount lc;
        lc.name = big[i].first;
        lc.weights_full = count_nonzero(big[i].second->weight());
        lc.weights_small = count_nonzero(sm[i].second->weight());
        lc.bn_full = big[i].second->use_bn() ? 2 * big[i].second->out_channels() : 0;
        lc.bn_small = sm[i].second->use_bn() ? 2 * sm[i].second->out_channels() : 0;
        r.layers.push_back(lc);
    }
    r.layers.push_back({"head", count_nonzero(net.head_weight()) + net.head_bias().numel(),
                        count_nonzero(small.head_weight()) + small.head_bias().numel(), 0, 0});
    return r;
}

/// Median and interquartile range of single-batch eval-mode forward passes.
/// An adjoined network is timed on its big branch.
template <class T>
LatencyStats benchmark(Network<T>& net, const Shape& input_shape, std::size_t n_warmup = 10,
                       std::size_t n_runs = 100, std::uint64_t seed = 0) {
    if (n_runs == 0) {
        throw ContractError("benchmark: n_runs must be >= 1");
    }
    Tensor<T> x(input_shape);
    Rng rng(seed);
    for (auto& v : x.values()) {
        v = static_cast<T>(rng.normal());
    }
    NoGradGuard no_grad;
    const bool was_training = net.training();
    net.set_training(false);
    for (std::size_t i = 0; i < n_warmup; ++i) {
        (void)net.logits_standard(x);
    }
    std::vector<double> ms(n_runs);
    for (std::size_t i = 0; i < n_runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        (void)net.logits_standard(x);
        const auto t1 = std::chrono::steady_clock::now();
        ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    net.set_training(was_training);
    std::sort(ms.begin(), ms.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(ms.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, ms.size() - 1);
        return ms[lo] + (pos - static_cast<double>(lo)) * (ms[hi] - ms[lo]);
    };
    LatencyStats st;
    st.median_ms = quantile(0.5);
    st.q1_ms = quantile(0.25);
    st.q3_ms = quantile(0.75);
    st.iqr_ms = st.q3_ms - st.q1_ms;
    st.runs = n_runs;
    return st;
}

}  // namespace adjnet
