#pragma once

// Differentiable operators over Tensor<T>. Every op computes its forward value
// eagerly and, when any input requires grad, records a closure that maps the
// output gradient back onto the inputs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"
#include "kernels.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace adjnet {

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(s));
    }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                             shape_str(b));
    }
}

template <class T>
void add_into(std::vector<T>& dst, const std::vector<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a[i] + b[i];
    }
    if (needs_grad({&a, &b})) {
        record(out, "add", {a, b}, [](TapeNode<T>& self) {
            for (auto& in : self.inputs) {
                if (in->requires_grad) {
                    detail::add_into(in->ensure_grad(), self.grad);
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a.shape(), b.shape(), "sub");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a[i] - b[i];
    }
    if (needs_grad({&a, &b})) {
        record(out, "sub", {a, b}, [](TapeNode<T>& self) {
            if (self.inputs[0]->requires_grad) {
                detail::add_into(self.inputs[0]->ensure_grad(), self.grad);
            }
            if (self.inputs[1]->requires_grad) {
                auto& g = self.inputs[1]->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] -= self.grad[i];
                }
            }
        });
    }
    return out;
}

/// Elementwise product. Used for W*M where M is a constant mask.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a.shape(), b.shape(), "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a[i] * b[i];
    }
    if (needs_grad({&a, &b})) {
        record(out, "mul", {a, b}, [](TapeNode<T>& self) {
            auto& x = *self.inputs[0];
            auto& y = *self.inputs[1];
            if (x.requires_grad) {
                auto& g = x.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i] * y.data[i];
                }
            }
            if (y.requires_grad) {
                auto& g = y.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i] * x.data[i];
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a[i] * s;
    }
    if (needs_grad({&a})) {
        record(out, "scale", {a}, [s](TapeNode<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * s;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = x[i] > T(0) ? x[i] : T(0);
    }
    if (needs_grad({&x})) {
        record(out, "relu", {x}, [](TapeNode<T>& self) {
            auto& in = *self.inputs[0];
            auto& g = in.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (in.data[i] > T(0)) {
                    g[i] += self.grad[i];
                }
            }
        });
    }
    return out;
}

/// Natural log; inputs must be positive.
template <class T>
Tensor<T> log(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = std::log(x[i]);
    }
    if (needs_grad({&x})) {
        record(out, "log", {x}, [](TapeNode<T>& self) {
            auto& in = *self.inputs[0];
            auto& g = in.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] / in.data[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (auto v : x.data()) {
        acc += v;
    }
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (needs_grad({&x})) {
        record(out, "sum", {x}, [](TapeNode<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            const T go = self.grad[0];
            for (auto& v : g) {
                v += go;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Scalar view of one flat element.
template <class T>
Tensor<T> select(const Tensor<T>& x, std::size_t index) {
    if (index >= x.numel()) {
        throw DimensionError("select: index " + std::to_string(index) + " out of range for " +
                             shape_str(x.shape()));
    }
    Tensor<T> out = Tensor<T>::scalar(x[index]);
    if (needs_grad({&x})) {
        record(out, "select", {x}, [index](TapeNode<T>& self) {
            self.inputs[0]->ensure_grad()[index] += self.grad[0];
        });
    }
    return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    Tensor<T> out(std::move(shape), x.values());
    if (needs_grad({&x})) {
        record(out, "reshape", {x}, [](TapeNode<T>& self) {
            detail::add_into(self.inputs[0]->ensure_grad(), self.grad);
        });
    }
    return out;
}

/// Multiplies channel c of an NCHW tensor by the constant factor[c].
template <class T>
Tensor<T> mul_channels(const Tensor<T>& x, const std::vector<T>& factor) {
    detail::require_rank(x.shape(), 4, "mul_channels");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (factor.size() != c) {
        throw DimensionError("mul_channels: " + std::to_string(factor.size()) + " factors for " +
                             std::to_string(c) + " channels");
    }
    Tensor<T> out(x.shape());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                out[base + i] = x[base + i] * factor[ch];
            }
        }
    }
    if (needs_grad({&x})) {
        record(out, "mul_channels", {x}, [factor, n, c, hw](TapeNode<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t base = (b * c + ch) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        g[base + i] += self.grad[base + i] * factor[ch];
                    }
                }
            }
        });
    }
    return out;
}

/// Inverted dropout: kept units are scaled by 1/keep.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double keep, Rng& rng) {
    if (!(keep > 0.0 && keep <= 1.0)) {
        throw ConfigError("dropout: keep probability must be in (0,1], got " + std::to_string(keep));
    }
    if (keep == 1.0) {
        return x;
    }
    std::vector<T> m(x.numel());
    const T s = T(1) / static_cast<T>(keep);
    for (auto& v : m) {
        v = rng.bernoulli(keep) ? s : T(0);
    }
    return mul(x, Tensor<T>(x.shape(), std::move(m)));
}

// ---------------------------------------------------------------------------
// convolution

/// Forward algorithm selection. `patch_gather` always materializes the
/// im2col matrix; `automatic` additionally feeds 1x1/stride-1/pad-0
/// convolutions straight from the input planes.
enum class ConvPath { automatic, patch_gather };

struct ConvGeometry {
    std::size_t n, c_in, h, w, c_out, k, stride, pad, h_out, w_out;

    std::size_t patch() const { return k * k * c_in; }
    std::size_t positions() const { return h_out * w_out; }
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride,
                                  std::size_t pad) {
    detail::require_rank(x, 4, "conv2d input");
    detail::require_rank(w, 4, "conv2d weight");
    if (w[1] != w[2]) {
        throw DimensionError("conv2d: kernel must be square, weight " + shape_str(w));
    }
    if (w[3] != x[1]) {
        throw DimensionError("conv2d: input has " + std::to_string(x[1]) +
                             " channels, weight expects " + std::to_string(w[3]) + " (weight " +
                             shape_str(w) + ")");
    }
    if (stride < 1) {
        throw DimensionError("conv2d: stride must be >= 1");
    }
    const std::size_t k = w[1];
    if (k > x[2] + 2 * pad || k > x[3] + 2 * pad) {
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                             shape_str(x));
    }
    return {x[0],     x[1], x[2], x[3], w[0], k, stride, pad, (x[2] + 2 * pad - k) / stride + 1,
            (x[3] + 2 * pad - k) / stride + 1};
}

namespace detail {

/// col[(kh*K + kw)*C_in + ci][oh*W_out + ow] = x[ci][oh*s - p + kh][ow*s - p + kw]
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
    const std::size_t positions = g.positions();
    for (std::size_t kh = 0; kh < g.k; ++kh) {
        for (std::size_t kw = 0; kw < g.k; ++kw) {
            for (std::size_t ci = 0; ci < g.c_in; ++ci) {
                T* row = col + ((kh * g.k + kw) * g.c_in + ci) * positions;
                const T* plane = x + ci * g.h * g.w;
                for (std::size_t oh = 0; oh < g.h_out; ++oh) {
                    const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
                    T* dst = row + oh * g.w_out;
                    if (ih < 0 || ih >= static_cast<long>(g.h)) {
                        std::fill(dst, dst + g.w_out, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(ih) * g.w;
                    for (std::size_t ow = 0; ow < g.w_out; ++ow) {
                        const long iw =
                            static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
                        dst[ow] = (iw < 0 || iw >= static_cast<long>(g.w))
                                      ? T(0)
                                      : src[static_cast<std::size_t>(iw)];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
    const std::size_t positions = g.positions();
    for (std::size_t kh = 0; kh < g.k; ++kh) {
        for (std::size_t kw = 0; kw < g.k; ++kw) {
            for (std::size_t ci = 0; ci < g.c_in; ++ci) {
                const T* row = col + ((kh * g.k + kw) * g.c_in + ci) * positions;
                T* plane = dx + ci * g.h * g.w;
                for (std::size_t oh = 0; oh < g.h_out; ++oh) {
                    const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
                    if (ih < 0 || ih >= static_cast<long>(g.h)) {
                        continue;
                    }
                    T* dst = plane + static_cast<std::size_t>(ih) * g.w;
                    const T* src = row + oh * g.w_out;
                    for (std::size_t ow = 0; ow < g.w_out; ++ow) {
                        const long iw =
                            static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
                        if (iw >= 0 && iw < static_cast<long>(g.w)) {
                            dst[static_cast<std::size_t>(iw)] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-d cross-correlation of x [N,C_in,H,W] with w [C_out,K,K,C_in].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad,
                 ConvPath path = ConvPath::automatic) {
    const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad);
    const bool direct_input = path == ConvPath::automatic && g.pointwise();
    Tensor<T> out(Shape{g.n, g.c_out, g.h_out, g.w_out});
    const std::size_t in_stride = g.c_in * g.h * g.w;
    const std::size_t out_stride = g.c_out * g.positions();
    parallel_for(g.n, [&](std::size_t b) {
        const T* xb = x.data().data() + b * in_stride;
        T* ob = out.data().data() + b * out_stride;
        if (direct_input) {
            kernels::gemm_nn(g.c_out, g.positions(), g.patch(), w.data().data(), xb, ob, false);
            return;
        }
        std::vector<T> col(g.patch() * g.positions());
        detail::im2col(g, xb, col.data());
        kernels::gemm_nn(g.c_out, g.positions(), g.patch(), w.data().data(), col.data(), ob, false);
    });
    if (needs_grad({&x, &w})) {
        record(out, "conv2d", {x, w}, [g, direct_input, in_stride, out_stride](TapeNode<T>& self) {
            auto& xn = *self.inputs[0];
            auto& wn = *self.inputs[1];
            const std::size_t wsize = wn.data.size();
            std::vector<T> w_partials(wn.requires_grad ? g.n * wsize : 0);
            if (xn.requires_grad) {
                xn.ensure_grad();
            }
            parallel_for(g.n, [&](std::size_t b) {
                const T* gout = self.grad.data() + b * out_stride;
                const T* xb = xn.data.data() + b * in_stride;
                std::vector<T> col;
                if (wn.requires_grad) {
                    const T* colp = xb;
                    if (!direct_input) {
                        col.resize(g.patch() * g.positions());
                        detail::im2col(g, xb, col.data());
                        colp = col.data();
                    }
                    std::vector<T> col_t(g.patch() * g.positions());
                    kernels::transpose(g.patch(), g.positions(), colp, col_t.data());
                    kernels::gemm_nn(g.c_out, g.patch(), g.positions(), gout, col_t.data(),
                                     w_partials.data() + b * wsize, false);
                }
                if (xn.requires_grad) {
                    T* dxb = xn.grad.data() + b * in_stride;
                    if (direct_input) {
                        kernels::gemm_tn(g.patch(), g.positions(), g.c_out, wn.data.data(), gout,
                                         dxb, true);
                    } else {
                        std::vector<T> dcol(g.patch() * g.positions());
                        kernels::gemm_tn(g.patch(), g.positions(), g.c_out, wn.data.data(), gout,
                                         dcol.data(), false);
                        detail::col2im_add(g, dcol.data(), dxb);
                    }
                }
            });
            if (wn.requires_grad) {
                auto& gw = wn.ensure_grad();
                for (std::size_t b = 0; b < g.n; ++b) {
                    const T* part = w_partials.data() + b * wsize;
                    for (std::size_t i = 0; i < wsize; ++i) {
                        gw[i] += part[i];
                    }
                }
            }
        });
    }
    return out;
}

/// Direct six-loop convolution; forward only. Kept as an independent path
/// for cross-checking the patch-gather implementation.
template <class T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                        std::size_t pad) {
    const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad);
    Tensor<T> out(Shape{g.n, g.c_out, g.h_out, g.w_out});
    for (std::size_t b = 0; b < g.n; ++b) {
        for (std::size_t co = 0; co < g.c_out; ++co) {
            for (std::size_t oh = 0; oh < g.h_out; ++oh) {
                for (std::size_t ow = 0; ow < g.w_out; ++ow) {
                    T acc = T(0);
                    for (std::size_t kh = 0; kh < g.k; ++kh) {
                        const long ih =
                            static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
                        if (ih < 0 || ih >= static_cast<long>(g.h)) {
                            continue;
                        }
                        for (std::size_t kw = 0; kw < g.k; ++kw) {
                            const long iw =
                                static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
                            if (iw < 0 || iw >= static_cast<long>(g.w)) {
                                continue;
                            }
                            for (std::size_t ci = 0; ci < g.c_in; ++ci) {
                                acc += x.at(b, ci, static_cast<std::size_t>(ih),
                                            static_cast<std::size_t>(iw)) *
                                       w.at(co, kh, kw, ci);
                            }
                        }
                    }
                    out.at(b, co, oh, ow) = acc;
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// dense

/// y = x w^T + b with x [N,D_in], w [D_out,D_in], b [D_out] (b may be undefined).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    detail::require_rank(x.shape(), 2, "linear input");
    detail::require_rank(w.shape(), 2, "linear weight");
    const std::size_t n = x.dim(0), din = x.dim(1), dout = w.dim(0);
    if (w.dim(1) != din) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(w.shape()));
    }
    if (b.defined() && (b.rank() != 1 || b.dim(0) != dout)) {
        throw DimensionError("linear: bias " + shape_str(b.shape()) + " vs weight " +
                             shape_str(w.shape()));
    }
    std::vector<T> wt(din * dout);
    kernels::transpose(dout, din, w.data().data(), wt.data());
    Tensor<T> out(Shape{n, dout});
    kernels::gemm_nn(n, dout, din, x.data().data(), wt.data(), out.data().data(), false);
    if (b.defined()) {
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t o = 0; o < dout; ++o) {
                out[r * dout + o] += b[o];
            }
        }
    }
    if (needs_grad({&x, &w, &b})) {
        std::vector<Tensor<T>> inputs{x, w};
        if (b.defined()) {
            inputs.push_back(b);
        }
        record(out, "linear", std::move(inputs), [n, din, dout](TapeNode<T>& self) {
            auto& xn = *self.inputs[0];
            auto& wn = *self.inputs[1];
            const T* gy = self.grad.data();
            if (xn.requires_grad) {
                kernels::gemm_nn(n, din, dout, gy, wn.data.data(), xn.ensure_grad().data(), true);
            }
            if (wn.requires_grad) {
                kernels::gemm_tn(dout, din, n, gy, xn.data.data(), wn.ensure_grad().data(), true);
            }
            if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                auto& gb = self.inputs[2]->ensure_grad();
                for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t o = 0; o < dout; ++o) {
                        gb[o] += gy[r * dout + o];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling

template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
    detail::require_rank(x.shape(), 4, "maxpool2d");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (k == 0 || stride == 0 || k > h || k > w) {
        throw DimensionError("maxpool2d: window " + std::to_string(k) + " / stride " +
                             std::to_string(stride) + " invalid for input " + shape_str(x.shape()));
    }
    const std::size_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
    Tensor<T> out(Shape{n, c, ho, wo});
    std::vector<std::size_t> argmax(out.numel());
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t in_base = plane * h * w;
        for (std::size_t oh = 0; oh < ho; ++oh) {
            for (std::size_t ow = 0; ow < wo; ++ow) {
                std::size_t best = in_base + oh * stride * w + ow * stride;
                for (std::size_t i = 0; i < k; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t idx = in_base + (oh * stride + i) * w + ow * stride + j;
                        if (x[idx] > x[best]) {
                            best = idx;
                        }
                    }
                }
                const std::size_t o = (plane * ho + oh) * wo + ow;
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    if (needs_grad({&x})) {
        record(out, "maxpool2d", {x}, [argmax = std::move(argmax)](TapeNode<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t o = 0; o < argmax.size(); ++o) {
                g[argmax[o]] += self.grad[o];
            }
        });
    }
    return out;
}

/// Global average over H and W: [N,C,H,W] -> [N,C,1,1].
template <class T>
Tensor<T> adaptive_avgpool(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 4, "adaptive_avgpool");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out(Shape{n, c, 1, 1});
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t p = 0; p < n * c; ++p) {
        T acc = T(0);
        for (std::size_t i = 0; i < hw; ++i) {
            acc += x[p * hw + i];
        }
        out[p] = acc * inv;
    }
    if (needs_grad({&x})) {
        record(out, "adaptive_avgpool", {x}, [hw, inv](TapeNode<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t p = 0; p < self.grad.size(); ++p) {
                const T go = self.grad[p] * inv;
                for (std::size_t i = 0; i < hw; ++i) {
                    g[p * hw + i] += go;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch norm

/// Running statistics of one batch-norm layer.
template <class T>
struct BatchNormStats {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNormStats() = default;
    explicit BatchNormStats(std::size_t channels)
        : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel normalization of x [N,C,H,W]. In training mode the batch
/// statistics are used and the running statistics are updated (unbiased
/// variance, exponential momentum); otherwise the running statistics are used.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, bool training) {
    detail::require_rank(x.shape(), 4, "batchnorm2d");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c || stats.running_mean.size() != c ||
        stats.running_var.size() != c) {
        throw DimensionError("batchnorm2d: parameters do not match " + std::to_string(c) +
                             " channels");
    }
    const std::size_t count = n * hw;
    std::vector<T> mu(c), inv_std(c);
    if (training) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T s = T(0);
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = x.data().data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    s += p[i];
                }
            }
            const T m = s / static_cast<T>(count);
            T v = T(0);
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = x.data().data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const T d = p[i] - m;
                    v += d * d;
                }
            }
            const T var = v / static_cast<T>(count);
            mu[ch] = m;
            inv_std[ch] = T(1) / std::sqrt(var + stats.eps);
            const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : var;
            stats.running_mean[ch] =
                (T(1) - stats.momentum) * stats.running_mean[ch] + stats.momentum * m;
            stats.running_var[ch] =
                (T(1) - stats.momentum) * stats.running_var[ch] + stats.momentum * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = stats.running_mean[ch];
            inv_std[ch] = T(1) / std::sqrt(stats.running_var[ch] + stats.eps);
        }
    }
    Tensor<T> out(x.shape());
    std::vector<T> xhat(x.numel());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const T xh = (x[base + i] - mu[ch]) * inv_std[ch];
                xhat[base + i] = xh;
                out[base + i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    if (needs_grad({&x, &gamma, &beta})) {
        record(out, "batchnorm2d", {x, gamma, beta},
               [n, c, hw, count, training, inv_std = std::move(inv_std),
                xhat = std::move(xhat)](TapeNode<T>& self) {
                   auto& xn = *self.inputs[0];
                   auto& gn = *self.inputs[1];
                   auto& bn = *self.inputs[2];
                   for (std::size_t ch = 0; ch < c; ++ch) {
                       T sum_dy = T(0), sum_dy_xhat = T(0);
                       for (std::size_t b = 0; b < n; ++b) {
                           const std::size_t base = (b * c + ch) * hw;
                           for (std::size_t i = 0; i < hw; ++i) {
                               sum_dy += self.grad[base + i];
                               sum_dy_xhat += self.grad[base + i] * xhat[base + i];
                           }
                       }
                       if (gn.requires_grad) {
                           gn.ensure_grad()[ch] += sum_dy_xhat;
                       }
                       if (bn.requires_grad) {
                           bn.ensure_grad()[ch] += sum_dy;
                       }
                       if (!xn.requires_grad) {
                           continue;
                       }
                       auto& gx = xn.ensure_grad();
                       const T g = gn.data[ch];
                       const T k = g * inv_std[ch];
                       const T m = static_cast<T>(count);
                       for (std::size_t b = 0; b < n; ++b) {
                           const std::size_t base = (b * c + ch) * hw;
                           for (std::size_t i = 0; i < hw; ++i) {
                               const T dy = self.grad[base + i];
                               if (training) {
                                   gx[base + i] +=
                                       k * (dy - sum_dy / m - xhat[base + i] * sum_dy_xhat / m);
                               } else {
                                   gx[base + i] += k * dy;
                               }
                           }
                       }
                   }
               });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 2, "softmax");
    const std::size_t n = x.dim(0), k = x.dim(1);
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const T* in = x.data().data() + r * k;
        T* o = out.data().data() + r * k;
        const T mx = *std::max_element(in, in + k);
        T z = T(0);
        for (std::size_t i = 0; i < k; ++i) {
            o[i] = std::exp(in[i] - mx);
            z += o[i];
        }
        for (std::size_t i = 0; i < k; ++i) {
            o[i] /= z;
        }
    }
    if (needs_grad({&x})) {
        record(out, "softmax", {x}, [n, k](TapeNode<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t r = 0; r < n; ++r) {
                const T* y = self.data.data() + r * k;
                const T* gy = self.grad.data() + r * k;
                T dot = T(0);
                for (std::size_t i = 0; i < k; ++i) {
                    dot += gy[i] * y[i];
                }
                for (std::size_t i = 0; i < k; ++i) {
                    g[r * k + i] += y[i] * (gy[i] - dot);
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 2, "log_softmax");
    const std::size_t n = x.dim(0), k = x.dim(1);
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const T* in = x.data().data() + r * k;
        T* o = out.data().data() + r * k;
        const T mx = *std::max_element(in, in + k);
        T z = T(0);
        for (std::size_t i = 0; i < k; ++i) {
            z += std::exp(in[i] - mx);
        }
        const T lz = mx + std::log(z);
        for (std::size_t i = 0; i < k; ++i) {
            o[i] = in[i] - lz;
        }
    }
    if (needs_grad({&x})) {
        record(out, "log_softmax", {x}, [n, k](TapeNode<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t r = 0; r < n; ++r) {
                const T* ly = self.data.data() + r * k;
                const T* gy = self.grad.data() + r * k;
                T s = T(0);
                for (std::size_t i = 0; i < k; ++i) {
                    s += gy[i];
                }
                for (std::size_t i = 0; i < k; ++i) {
                    g[r * k + i] += gy[i] - std::exp(ly[i]) * s;
                }
            }
        });
    }
    return out;
}

}  // namespace adjnet
