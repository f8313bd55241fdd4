#pragma once

// Fixed binary masks over convolution weights [C_out, K, K, C_in].
//
// a_alpha keeps the first ceil(C_out / alpha) output filters; r_beta zeroes an
// exact round(beta * numel) entries chosen by a seeded shuffle. A layer's mask
// is their elementwise product and never changes after construction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace adjnet {

/// Declarative mask description. The triple fully determines the mask for a
/// given weight shape.
struct MaskSpec {
    std::uint32_t alpha = 1;
    double beta = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (alpha < 1) {
            throw ConfigError("mask: alpha must be >= 1");
        }
        if (!(beta >= 0.0 && beta < 1.0)) {
            throw ConfigError("mask: beta must be in [0,1), got " + std::to_string(beta));
        }
    }

    bool trivial() const { return alpha == 1 && beta == 0.0; }

    friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

class Mask {
public:
    Mask() = default;

    Mask(Shape shape, std::vector<std::uint8_t> bits) : shape_(std::move(shape)), bits_(std::move(bits)) {
        if (shape_.size() != 4) {
            throw DimensionError("mask: shape must be [C_out,K,K,C_in], got " + shape_str(shape_));
        }
        if (shape_numel(shape_) != bits_.size()) {
            throw DimensionError("mask: bit count does not match shape " + shape_str(shape_));
        }
        for (auto b : bits_) {
            if (b > 1) {
                throw ContractError("mask: entries must be 0 or 1");
            }
        }
    }

    static Mask ones(const Shape& shape) { return Mask(shape, std::vector<std::uint8_t>(shape_numel(shape), 1)); }

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return bits_.size(); }
    const std::vector<std::uint8_t>& bits() const { return bits_; }
    std::uint8_t operator[](std::size_t i) const { return bits_[i]; }

    std::size_t count_ones() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }
    std::size_t count_zeros() const { return numel() - count_ones(); }

    /// Number of entries in one output filter (K*K*C_in).
    std::size_t filter_size() const { return shape_[1] * shape_[2] * shape_[3]; }

    template <class T>
    Tensor<T> as_tensor() const {
        std::vector<T> v(bits_.begin(), bits_.end());
        return Tensor<T>(shape_, std::move(v));
    }

    friend bool operator==(const Mask&, const Mask&) = default;

private:
    Shape shape_;
    std::vector<std::uint8_t> bits_;
};

inline void require_weight_shape(const Shape& shape) {
    if (shape.size() != 4 || shape_numel(shape) == 0) {
        throw DimensionError("mask: weight shape must be [C_out,K,K,C_in], got " + shape_str(shape));
    }
}

/// Number of output filters a_alpha keeps: ceil(C_out / alpha).
inline std::size_t alpha_keep(std::size_t c_out, std::uint32_t alpha) {
    return (c_out + alpha - 1) / alpha;
}

inline Mask build_alpha_mask(const Shape& shape, std::uint32_t alpha) {
    require_weight_shape(shape);
    if (alpha < 1 || alpha > shape[0]) {
        throw ConfigError("mask: alpha " + std::to_string(alpha) + " invalid for C_out " +
                          std::to_string(shape[0]));
    }
    const std::size_t filter = shape[1] * shape[2] * shape[3];
    const std::size_t keep = alpha_keep(shape[0], alpha);
    std::vector<std::uint8_t> bits(shape_numel(shape), 0);
    std::fill(bits.begin(), bits.begin() + static_cast<std::ptrdiff_t>(keep * filter), 1);
    return Mask(shape, std::move(bits));
}

inline Mask build_random_mask(const Shape& shape, double beta, std::uint64_t seed) {
    require_weight_shape(shape);
    if (!(beta >= 0.0 && beta < 1.0)) {
        throw ConfigError("mask: beta must be in [0,1), got " + std::to_string(beta));
    }
    const std::size_t n = shape_numel(shape);
    const auto zeros = static_cast<std::size_t>(std::llround(beta * static_cast<double>(n)));
    std::vector<std::uint8_t> bits(n, 1);
    if (zeros > 0) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Rng rng(seed);
        rng.shuffle(idx);
        for (std::size_t i = 0; i < zeros; ++i) {
            bits[idx[i]] = 0;
        }
    }
    return Mask(shape, std::move(bits));
}

inline Mask compose(const Mask& a, const Mask& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mask compose: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    std::vector<std::uint8_t> bits(a.numel());
    for (std::size_t i = 0; i < bits.size(); ++i) {
        bits[i] = static_cast<std::uint8_t>(a[i] & b[i]);
    }
    return Mask(a.shape(), std::move(bits));
}

/// a_alpha composed with r_beta, as described by `spec`.
inline Mask build_mask(const Shape& shape, const MaskSpec& spec) {
    spec.validate();
    Mask m = build_alpha_mask(shape, spec.alpha);
    if (spec.beta > 0.0) {
        m = compose(m, build_random_mask(shape, spec.beta, spec.seed));
    }
    return m;
}

inline double density(const Mask& m) {
    return static_cast<double>(m.count_ones()) / static_cast<double>(m.numel());
}

/// Output filters with at least one surviving entry.
inline std::vector<std::size_t> surviving_out_channels(const Mask& m) {
    std::vector<std::size_t> out;
    const std::size_t filter = m.filter_size();
    for (std::size_t c = 0; c < m.shape()[0]; ++c) {
        const auto first = m.bits().begin() + static_cast<std::ptrdiff_t>(c * filter);
        if (std::find(first, first + static_cast<std::ptrdiff_t>(filter), 1) != first + static_cast<std::ptrdiff_t>(filter)) {
            out.push_back(c);
        }
    }
    return out;
}

}  // namespace adjnet
