#pragma once

// Residual networks whose res-block convolutions can be adjoined: a single
// weight tensor W drives a big branch (conv(x1, W)) and a small branch
// (conv(x2, W * M)), each with its own batch-norm parameters and statistics.
//
// Layout: stem convs (never masked) -> optional 2x2 max-pool -> stages of
// basic residual blocks -> global average pool -> one linear head shared by
// both branches.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "masks.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace adjnet {

enum class NetMode { standard, adjoined };
enum class Branch { big, small };

inline const char* to_string(NetMode m) { return m == NetMode::standard ? "standard" : "adjoined"; }

struct StageSpec {
    std::size_t width = 16;
    std::size_t blocks = 2;
    MaskSpec mask;

    friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct NetworkSpec {
    std::size_t in_channels = 3;
    std::vector<std::size_t> stem{16};  // output widths of 3x3 stem convs
    bool stem_pool = true;
    std::vector<StageSpec> stages{{16, 2, {}}, {32, 2, {}}};
    std::size_t num_classes = 10;
    double dropout_keep = 1.0;  // standard mode only; 1 disables

    void validate() const {
        if (in_channels < 1) {
            throw ConfigError("network: in_channels must be >= 1");
        }
        if (stem.empty()) {
            throw ConfigError("network: stem needs at least one conv");
        }
        for (auto w : stem) {
            if (w < 1) {
                throw ConfigError("network: stem width must be >= 1");
            }
        }
        if (stages.empty()) {
            throw ConfigError("network: at least one stage required");
        }
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const auto& s = stages[i];
            if (s.width < 1) {
                throw ConfigError("network: stage " + std::to_string(i) + " has zero width");
            }
            if (s.blocks < 1) {
                throw ConfigError("network: stage " + std::to_string(i) + " has zero blocks");
            }
            s.mask.validate();
            if (s.mask.alpha > s.width) {
                throw ConfigError("network: stage " + std::to_string(i) + " alpha " +
                                  std::to_string(s.mask.alpha) + " exceeds width " +
                                  std::to_string(s.width));
            }
        }
        if (num_classes < 1) {
            throw ConfigError("network: num_classes must be >= 1");
        }
        if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) {
            throw ConfigError("network: dropout keep must be in (0,1]");
        }
    }

    /// Desk-scale miniature: stem 3->16, stages [16, 32] x 2 blocks, 10 classes.
    static NetworkSpec desk_default(const MaskSpec& mask = {}) {
        NetworkSpec s;
        for (auto& st : s.stages) {
            st.mask = mask;
        }
        return s;
    }

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

template <class T>
struct BatchNorm {
    Tensor<T> gamma;
    Tensor<T> beta;
    BatchNormStats<T> stats;

    BatchNorm() = default;
    explicit BatchNorm(std::size_t channels)
        : gamma(Tensor<T>::ones({channels})), beta(Tensor<T>::zeros({channels})), stats(channels) {
        gamma.set_requires_grad();
        beta.set_requires_grad();
    }

    bool defined() const { return gamma.defined(); }

    Tensor<T> operator()(const Tensor<T>& x, bool training) {
        return batchnorm2d(x, gamma, beta, stats, training);
    }
};

/// Convolution + batch norm. When adjoined it carries a fixed mask and a
/// second, independent batch norm for the small branch.
template <class T>
class AdjoinedConv {
public:
    AdjoinedConv() = default;

    AdjoinedConv(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride,
                 std::size_t pad, bool use_bn = true)
        : stride_(stride), pad_(pad), use_bn_(use_bn),
          weight_(Tensor<T>::zeros({c_out, kernel, kernel, c_in})) {
        weight_.set_requires_grad();
        if (use_bn_) {
            bn_big_ = BatchNorm<T>(c_out);
        }
    }

    /// Attaches a mask; the layer becomes adjoined.
    void set_mask(Mask mask, const MaskSpec& spec) {
        if (mask.shape() != weight_.shape()) {
            throw DimensionError("adjoined conv: mask " + shape_str(mask.shape()) +
                                 " does not match weight " + shape_str(weight_.shape()));
        }
        mask_ = std::move(mask);
        mask_spec_ = spec;
        mask_tensor_ = mask_->template as_tensor<T>();
        live_.assign(out_channels(), T(0));
        for (auto c : surviving_out_channels(*mask_)) {
            live_[c] = T(1);
        }
        if (use_bn_) {
            bn_small_ = BatchNorm<T>(out_channels());
        }
    }

    bool adjoined() const { return mask_.has_value(); }
    bool use_bn() const { return use_bn_; }
    std::size_t stride() const { return stride_; }
    std::size_t pad() const { return pad_; }
    std::size_t kernel() const { return weight_.dim(1); }
    std::size_t in_channels() const { return weight_.dim(3); }
    std::size_t out_channels() const { return weight_.dim(0); }

    Tensor<T>& weight() { return weight_; }
    const Tensor<T>& weight() const { return weight_; }
    const Mask& mask() const { return *mask_; }
    const MaskSpec& mask_spec() const { return mask_spec_; }
    BatchNorm<T>& bn(Branch b) { return b == Branch::big ? bn_big_ : bn_small_; }
    const BatchNorm<T>& bn(Branch b) const { return b == Branch::big ? bn_big_ : bn_small_; }
    /// 1 for output channels that survive the mask, 0 otherwise.
    const std::vector<T>& live_channels() const { return live_; }

    /// Big branch: bn_big(conv(x, W)). Small branch: bn_small(conv(x, W*M)),
    /// with dead output channels pinned to exactly zero.
    Tensor<T> forward(const Tensor<T>& x, Branch branch, bool training) {
        if (branch == Branch::small && adjoined()) {
            Tensor<T> y = conv2d(x, mul(weight_, mask_tensor_), stride_, pad_);
            if (use_bn_) {
                y = bn_small_(y, training);
            }
            return mul_channels(y, live_);
        }
        Tensor<T> y = conv2d(x, weight_, stride_, pad_);
        return use_bn_ ? bn_big_(y, training) : y;
    }

    /// Masked entries of W set to 0, making both branches compute the same map.
    void zero_masked_weights() {
        if (!adjoined()) {
            return;
        }
        for (std::size_t i = 0; i < weight_.numel(); ++i) {
            if ((*mask_)[i] == 0) {
                weight_[i] = T(0);
            }
        }
    }

private:
    std::size_t stride_ = 1;
    std::size_t pad_ = 0;
    bool use_bn_ = true;
    Tensor<T> weight_;
    BatchNorm<T> bn_big_;
    BatchNorm<T> bn_small_;
    std::optional<Mask> mask_;
    MaskSpec mask_spec_;
    Tensor<T> mask_tensor_;
    std::vector<T> live_;
};

/// (y1, y2) = (bn_big(conv(x1, W)), bn_small(conv(x2, W*M))).
template <class T>
std::pair<Tensor<T>, Tensor<T>> adjoined_conv_forward(AdjoinedConv<T>& layer, const Tensor<T>& x1,
                                                      const Tensor<T>& x2, bool training = true) {
    detail::require_same(x1.shape(), x2.shape(), "adjoined_conv_forward");
    return {layer.forward(x1, Branch::big, training), layer.forward(x2, Branch::small, training)};
}

template <class T>
struct ResBlock {
    AdjoinedConv<T> conv1;
    AdjoinedConv<T> conv2;
    std::optional<AdjoinedConv<T>> shortcut;  // 1x1 projection
};

template <class T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

/// Named view of every value a checkpoint must carry.
template <class T>
struct StateEntry {
    std::string name;
    std::span<T> values;
};

/// Class probabilities of both branches (rows sum to 1) plus their logits.
template <class T>
struct AdjoinedOutput {
    Tensor<T> p;
    Tensor<T> q;
    Tensor<T> logits_p;
    Tensor<T> logits_q;
};

template <class T>
class Network {
public:
    /// Builds and initializes the network. `layer_masks`, when given, pins the
    /// per-layer mask specs (used when restoring checkpoints); otherwise each
    /// adjoined layer gets its stage spec with a seed derived from the stage
    /// seed and the layer's index.
    Network(NetworkSpec spec, NetMode mode, std::uint64_t init_seed,
            const std::vector<MaskSpec>* layer_masks = nullptr)
        : spec_(std::move(spec)), mode_(mode), dropout_rng_(derive_seed(init_seed, stream::dropout)) {
        spec_.validate();
        Rng rng(derive_seed(init_seed, stream::init));
        std::size_t c = spec_.in_channels;
        for (auto w : spec_.stem) {
            stem_.emplace_back(c, w, 3, 1, 1);
            init_conv(stem_.back(), rng);
            c = w;
        }
        std::size_t layer_index = 0;
        auto attach = [&](AdjoinedConv<T>& conv, const MaskSpec& stage_mask) {
            if (mode_ != NetMode::adjoined) {
                return;
            }
            MaskSpec ms = stage_mask;
            if (layer_masks != nullptr) {
                if (layer_index >= layer_masks->size()) {
                    throw ConfigError("network: too few layer masks supplied");
                }
                ms = (*layer_masks)[layer_index];
            } else {
                ms.seed = derive_seed(stage_mask.seed, layer_index);
            }
            ++layer_index;
            conv.set_mask(build_mask(conv.weight().shape(), ms), ms);
        };
        for (std::size_t s = 0; s < spec_.stages.size(); ++s) {
            const auto& st = spec_.stages[s];
            std::vector<ResBlock<T>> blocks;
            for (std::size_t b = 0; b < st.blocks; ++b) {
                const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
                ResBlock<T> blk{AdjoinedConv<T>(c, st.width, 3, stride, 1),
                                AdjoinedConv<T>(st.width, st.width, 3, 1, 1), std::nullopt};
                init_conv(blk.conv1, rng);
                init_conv(blk.conv2, rng);
                attach(blk.conv1, st.mask);
                attach(blk.conv2, st.mask);
                // The first block of every stage projects its shortcut so that
                // channels dead in the small branch stay dead after the sum.
                if (b == 0) {
                    blk.shortcut.emplace(c, st.width, 1, stride, 0);
                    init_conv(*blk.shortcut, rng);
                    attach(*blk.shortcut, st.mask);
                }
                blocks.push_back(std::move(blk));
                c = st.width;
            }
            stages_.push_back(std::move(blocks));
        }
        if (layer_masks != nullptr && layer_index != layer_masks->size()) {
            throw ConfigError("network: " + std::to_string(layer_masks->size()) +
                              " layer masks supplied for " + std::to_string(layer_index) +
                              " adjoined layers");
        }
        head_w_ = Tensor<T>::zeros({spec_.num_classes, c});
        head_b_ = Tensor<T>::zeros({spec_.num_classes});
        const double std = std::sqrt(2.0 / static_cast<double>(c));
        for (auto& v : head_w_.values()) {
            v = static_cast<T>(rng.normal() * std);
        }
        head_w_.set_requires_grad();
        head_b_.set_requires_grad();
    }

    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    /// Independent deep copy.
    Network clone() {
        std::vector<MaskSpec> masks = layer_mask_specs();
        Network copy(spec_, mode_, 0, mode_ == NetMode::adjoined ? &masks : nullptr);
        copy.copy_state_from(*this);
        copy.training_ = training_;
        copy.dropout_rng_ = dropout_rng_;
        return copy;
    }

    const NetworkSpec& spec() const { return spec_; }
    NetMode mode() const { return mode_; }
    bool training() const { return training_; }
    void set_training(bool on) { training_ = on; }

    std::vector<AdjoinedConv<T>>& stem() { return stem_; }
    const std::vector<AdjoinedConv<T>>& stem() const { return stem_; }
    std::vector<std::vector<ResBlock<T>>>& stages() { return stages_; }
    const std::vector<std::vector<ResBlock<T>>>& stages() const { return stages_; }
    Tensor<T>& head_weight() { return head_w_; }
    const Tensor<T>& head_weight() const { return head_w_; }
    Tensor<T>& head_bias() { return head_b_; }
    const Tensor<T>& head_bias() const { return head_b_; }

    /// Big-branch logits using full weights and bn_big.
    Tensor<T> logits_standard(const Tensor<T>& x) {
        Tensor<T> h = stem_forward(x);
        for (auto& stage : stages_) {
            for (auto& blk : stage) {
                h = block_forward(blk, h, Branch::big);
            }
            if (mode_ == NetMode::standard && training_ && spec_.dropout_keep < 1.0) {
                h = dropout(h, spec_.dropout_keep, dropout_rng_);
            }
        }
        return head(h);
    }

    /// Small-branch logits (masked weights, bn_small).
    Tensor<T> logits_small(const Tensor<T>& x) {
        require_adjoined();
        Tensor<T> h = stem_forward(x);
        for (auto& stage : stages_) {
            for (auto& blk : stage) {
                h = block_forward(blk, h, Branch::small);
            }
        }
        return head(h);
    }

    /// Both branches from one stem pass.
    std::pair<Tensor<T>, Tensor<T>> logits_adjoined(const Tensor<T>& x) {
        require_adjoined();
        Tensor<T> stem_out = stem_forward(x);
        Tensor<T> h1 = stem_out;
        Tensor<T> h2 = stem_out;
        for (auto& stage : stages_) {
            for (auto& blk : stage) {
                h1 = block_forward(blk, h1, Branch::big);
                h2 = block_forward(blk, h2, Branch::small);
            }
        }
        return {head(h1), head(h2)};
    }

    /// Every adjoined layer in construction order.
    std::vector<AdjoinedConv<T>*> adjoined_layers() {
        std::vector<AdjoinedConv<T>*> out;
        for_each_block_conv([&](AdjoinedConv<T>& c, const std::string&) {
            if (c.adjoined()) {
                out.push_back(&c);
            }
        });
        return out;
    }

    std::vector<MaskSpec> layer_mask_specs() const {
        std::vector<MaskSpec> out;
        const_cast<Network*>(this)->for_each_block_conv([&](AdjoinedConv<T>& c, const std::string&) {
            if (c.adjoined()) {
                out.push_back(c.mask_spec());
            }
        });
        return out;
    }

    void zero_masked_weights() {
        for (auto* c : adjoined_layers()) {
            c->zero_masked_weights();
        }
    }

    /// Trainable tensors, in a fixed order.
    std::vector<NamedTensor<T>> parameters() {
        std::vector<NamedTensor<T>> out;
        auto add_conv = [&](AdjoinedConv<T>& c, const std::string& name) {
            out.push_back({name + ".weight", c.weight()});
            if (c.use_bn()) {
                out.push_back({name + ".bn.gamma", c.bn(Branch::big).gamma});
                out.push_back({name + ".bn.beta", c.bn(Branch::big).beta});
                if (c.adjoined()) {
                    out.push_back({name + ".bn_small.gamma", c.bn(Branch::small).gamma});
                    out.push_back({name + ".bn_small.beta", c.bn(Branch::small).beta});
                }
            }
        };
        for (std::size_t i = 0; i < stem_.size(); ++i) {
            add_conv(stem_[i], "stem." + std::to_string(i));
        }
        for_each_block_conv(add_conv);
        out.push_back({"head.weight", head_w_});
        out.push_back({"head.bias", head_b_});
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto& p : parameters()) {
            n += p.tensor.numel();
        }
        return n;
    }

    /// Parameters followed by batch-norm running statistics.
    std::vector<StateEntry<T>> state() {
        std::vector<StateEntry<T>> out;
        for (auto& p : parameters()) {
            out.push_back({p.name, p.tensor.data()});
        }
        auto add_stats = [&](AdjoinedConv<T>& c, const std::string& name) {
            if (!c.use_bn()) {
                return;
            }
            out.push_back({name + ".bn.running_mean", c.bn(Branch::big).stats.running_mean});
            out.push_back({name + ".bn.running_var", c.bn(Branch::big).stats.running_var});
            if (c.adjoined()) {
                out.push_back({name + ".bn_small.running_mean", c.bn(Branch::small).stats.running_mean});
                out.push_back({name + ".bn_small.running_var", c.bn(Branch::small).stats.running_var});
            }
        };
        for (std::size_t i = 0; i < stem_.size(); ++i) {
            add_stats(stem_[i], "stem." + std::to_string(i));
        }
        for_each_block_conv(add_stats);
        return out;
    }

    void copy_state_from(Network& other) {
        auto dst = state();
        auto src = other.state();
        if (dst.size() != src.size()) {
            throw DimensionError("network: state layouts differ");
        }
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (dst[i].name != src[i].name || dst[i].values.size() != src[i].values.size()) {
                throw DimensionError("network: state entry mismatch at " + dst[i].name);
            }
            std::copy(src[i].values.begin(), src[i].values.end(), dst[i].values.begin());
        }
    }

    void zero_grad() {
        for (auto& p : parameters()) {
            p.tensor.zero_grad();
        }
    }

    /// Calls fn(conv, name) for every res-block conv in construction order.
    template <class Fn>
    void for_each_block_conv(Fn&& fn) {
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            for (std::size_t b = 0; b < stages_[s].size(); ++b) {
                const std::string base = "stage" + std::to_string(s) + ".block" + std::to_string(b);
                auto& blk = stages_[s][b];
                fn(blk.conv1, base + ".conv1");
                fn(blk.conv2, base + ".conv2");
                if (blk.shortcut) {
                    fn(*blk.shortcut, base + ".shortcut");
                }
            }
        }
    }

private:
    static void init_conv(AdjoinedConv<T>& conv, Rng& rng) {
        const double fan_in = static_cast<double>(conv.kernel() * conv.kernel() * conv.in_channels());
        const double std = std::sqrt(2.0 / fan_in);
        for (auto& v : conv.weight().values()) {
            v = static_cast<T>(rng.normal() * std);
        }
    }

    void require_adjoined() const {
        if (mode_ != NetMode::adjoined) {
            throw ConfigError("network: small branch requested on a standard network");
        }
    }

    Tensor<T> stem_forward(const Tensor<T>& x) {
        if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
            throw DimensionError("network: expected input [N," + std::to_string(spec_.in_channels) +
                                 ",H,W], got " + shape_str(x.shape()));
        }
        Tensor<T> h = x;
        for (auto& conv : stem_) {
            h = relu(conv.forward(h, Branch::big, training_));
        }
        if (spec_.stem_pool) {
            h = maxpool2d(h, 2, 2);
        }
        return h;
    }

    Tensor<T> block_forward(ResBlock<T>& blk, const Tensor<T>& x, Branch branch) {
        Tensor<T> h = relu(blk.conv1.forward(x, branch, training_));
        h = blk.conv2.forward(h, branch, training_);
        Tensor<T> s = blk.shortcut ? blk.shortcut->forward(x, branch, training_) : x;
        return relu(add(h, s));
    }

    Tensor<T> head(const Tensor<T>& h) {
        Tensor<T> pooled = adaptive_avgpool(h);
        return linear(reshape(pooled, {pooled.dim(0), pooled.dim(1)}), head_w_, head_b_);
    }

    NetworkSpec spec_;
    NetMode mode_;
    bool training_ = true;
    std::vector<AdjoinedConv<T>> stem_;
    std::vector<std::vector<ResBlock<T>>> stages_;
    Tensor<T> head_w_;
    Tensor<T> head_b_;
    Rng dropout_rng_;
};

template <class T>
Network<T> build_network(const NetworkSpec& spec, NetMode mode, std::uint64_t init_seed) {
    return Network<T>(spec, mode, init_seed);
}

/// Class probabilities of the big branch.
template <class T>
Tensor<T> forward_standard(Network<T>& net, const Tensor<T>& x) {
    return softmax(net.logits_standard(x));
}

template <class T>
AdjoinedOutput<T> forward_adjoined(Network<T>& net, const Tensor<T>& x) {
    auto [lp, lq] = net.logits_adjoined(x);
    return {softmax(lp), softmax(lq), lp, lq};
}

}  // namespace adjnet
