#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "spider/tensor.hpp"

namespace spider {

// Reverse-mode primitives. Every op takes the tape as first argument; a null
// tape means evaluation-only (no recording, no gradient propagation).
// Outputs are checked for NaN/Inf where overflow is possible.

struct Conv2dOpts {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
};

enum class PoolKind { max, avg };

namespace detail {

template <typename T>
bool track(TapeT<T>* tape, const TensorT<T>& a) {
    return tape != nullptr && a.requires_grad();
}

template <typename T>
TensorT<T> make_output(TapeT<T>* tape, std::vector<int> shape, bool requires_grad) {
    auto out = TensorT<T>::zeros(std::move(shape), tape != nullptr && requires_grad);
    if (tape) tape->add_activations(out.numel());
    return out;
}

inline int conv_out_dim(int in, int k, int stride, int pad, int dil) {
    return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                  const Conv2dOpts& o) {
    if (x.shape().size() != 4 || w.shape().size() != 4)
        throw DimensionError("conv2d expects 4-d input and kernel");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int F = w.dim(0), Cg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
    if (o.groups < 1 || C % o.groups != 0 || F % o.groups != 0)
        throw DimensionError("conv2d: channels not divisible by groups");
    if (Cg != C / o.groups)
        throw DimensionError("conv2d: kernel channel dim does not match input/groups");
    const int OH = detail::conv_out_dim(H, KH, o.stride, o.padding, o.dilation);
    const int OW = detail::conv_out_dim(W, KW, o.stride, o.padding, o.dilation);
    if (OH < 1 || OW < 1) throw DimensionError("conv2d: output dims collapse to zero");

    const int Fg = F / o.groups;
    auto out = detail::make_output<T>(tape, {N, F, OH, OW},
                                      x.requires_grad() || w.requires_grad());
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    T* yd = out.data_mut().data();
    const auto xidx = [C, H, W](int n, int c, int h, int ww) {
        return ((static_cast<int64_t>(n) * C + c) * H + h) * W + ww;
    };
    const auto widx = [Cg, KH, KW](int f, int c, int kh, int kw) {
        return ((static_cast<int64_t>(f) * Cg + c) * KH + kh) * KW + kw;
    };
    int64_t yi = 0;
    for (int n = 0; n < N; ++n) {
        for (int f = 0; f < F; ++f) {
            const int g = f / Fg;
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow, ++yi) {
                    T acc = 0;
                    for (int c = 0; c < Cg; ++c) {
                        const int ci = g * Cg + c;
                        for (int kh = 0; kh < KH; ++kh) {
                            const int ih = oh * o.stride - o.padding + kh * o.dilation;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < KW; ++kw) {
                                const int iw = ow * o.stride - o.padding + kw * o.dilation;
                                if (iw < 0 || iw >= W) continue;
                                acc += xd[xidx(n, ci, ih, iw)] * wd[widx(f, c, kh, kw)];
                            }
                        }
                    }
                    yd[yi] = acc;
                }
            }
        }
    }
    out.check_finite("conv2d");

    if (detail::track(tape, x) || detail::track(tape, w)) {
        TensorT<T> xc = x, wc = w, yc = out;
        Conv2dOpts oc = o;
        tape->record([xc, wc, yc, oc, N, C, H, W, F, Cg, KH, KW, OH, OW, Fg,
                      xidx, widx]() mutable {
            const T* go = yc.grad().data();
            if (yc.grad().empty()) return;
            const bool need_x = xc.requires_grad();
            const bool need_w = wc.requires_grad();
            const T* xd = xc.data().data();
            const T* wd = wc.data().data();
            T* gx = need_x ? xc.grad_mut().data() : nullptr;
            T* gw = need_w ? wc.grad_mut().data() : nullptr;
            int64_t yi = 0;
            for (int n = 0; n < N; ++n) {
                for (int f = 0; f < F; ++f) {
                    const int g = f / Fg;
                    for (int oh = 0; oh < OH; ++oh) {
                        for (int ow = 0; ow < OW; ++ow, ++yi) {
                            const T gy = go[yi];
                            if (gy == T(0)) continue;
                            for (int c = 0; c < Cg; ++c) {
                                const int ci = g * Cg + c;
                                for (int kh = 0; kh < KH; ++kh) {
                                    const int ih = oh * oc.stride - oc.padding + kh * oc.dilation;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int kw = 0; kw < KW; ++kw) {
                                        const int iw = ow * oc.stride - oc.padding + kw * oc.dilation;
                                        if (iw < 0 || iw >= W) continue;
                                        if (need_x) gx[xidx(n, ci, ih, iw)] += gy * wd[widx(f, c, kh, kw)];
                                        if (need_w) gw[widx(f, c, kh, kw)] += gy * xd[xidx(n, ci, ih, iw)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> pool2d(TapeT<T>* tape, const TensorT<T>& x, PoolKind kind, int k,
                  int stride, int padding) {
    if (x.shape().size() != 4) throw DimensionError("pool2d expects 4-d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = (H + 2 * padding - k) / stride + 1;
    const int OW = (W + 2 * padding - k) / stride + 1;
    if (OH < 1 || OW < 1) throw DimensionError("pool2d: no valid window");

    auto out = detail::make_output<T>(tape, {N, C, OH, OW}, x.requires_grad());
    const T* xd = x.data().data();
    T* yd = out.data_mut().data();
    // max pool: remember the winning input index per window; ties go to the
    // first (row-major) occurrence.
    std::vector<int64_t> argmax;
    if (kind == PoolKind::max) argmax.assign(static_cast<size_t>(out.numel()), -1);
    const T inv_area = T(1) / static_cast<T>(k * k);  // padded positions count

    int64_t yi = 0;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const int64_t base = (static_cast<int64_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow, ++yi) {
                    if (kind == PoolKind::max) {
                        T best = -std::numeric_limits<T>::infinity();
                        int64_t besti = -1;
                        for (int kh = 0; kh < k; ++kh) {
                            const int ih = oh * stride - padding + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < k; ++kw) {
                                const int iw = ow * stride - padding + kw;
                                if (iw < 0 || iw >= W) continue;
                                const T v = xd[base + static_cast<int64_t>(ih) * W + iw];
                                if (v > best) {
                                    best = v;
                                    besti = base + static_cast<int64_t>(ih) * W + iw;
                                }
                            }
                        }
                        if (besti < 0) throw DimensionError("pool2d: window has no valid input");
                        yd[yi] = best;
                        argmax[static_cast<size_t>(yi)] = besti;
                    } else {
                        T acc = 0;
                        for (int kh = 0; kh < k; ++kh) {
                            const int ih = oh * stride - padding + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < k; ++kw) {
                                const int iw = ow * stride - padding + kw;
                                if (iw < 0 || iw >= W) continue;
                                acc += xd[base + static_cast<int64_t>(ih) * W + iw];
                            }
                        }
                        yd[yi] = acc * inv_area;
                    }
                }
            }
        }
    }

    if (detail::track(tape, x)) {
        TensorT<T> xc = x, yc = out;
        tape->record([xc, yc, kind, k, stride, padding, N, C, H, W, OH, OW,
                      argmax = std::move(argmax), inv_area]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            T* gx = xc.grad_mut().data();
            if (kind == PoolKind::max) {
                for (int64_t yi = 0; yi < yc.numel(); ++yi)
                    gx[argmax[static_cast<size_t>(yi)]] += go[yi];
                return;
            }
            int64_t yi = 0;
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const int64_t base = (static_cast<int64_t>(n) * C + c) * H * W;
                    for (int oh = 0; oh < OH; ++oh) {
                        for (int ow = 0; ow < OW; ++ow, ++yi) {
                            const T g = go[yi] * inv_area;
                            if (g == T(0)) continue;
                            for (int kh = 0; kh < k; ++kh) {
                                const int ih = oh * stride - padding + kh;
                                if (ih < 0 || ih >= H) continue;
                                for (int kw = 0; kw < k; ++kw) {
                                    const int iw = ow * stride - padding + kw;
                                    if (iw < 0 || iw >= W) continue;
                                    gx[base + static_cast<int64_t>(ih) * W + iw] += g;
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Minibatch-statistics normalization, train and eval alike. No running
// stats, no affine parameters.
template <typename T>
TensorT<T> batch_norm(TapeT<T>* tape, const TensorT<T>& x, T eps) {
    if (x.shape().size() != 4) throw DimensionError("batch_norm expects 4-d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t cnt = static_cast<int64_t>(N) * H * W;
    if (cnt < 2) throw DimensionError("batch_norm needs at least 2 values per channel");

    auto out = detail::make_output<T>(tape, x.shape(), x.requires_grad());
    const T* xd = x.data().data();
    T* yd = out.data_mut().data();
    std::vector<T> inv_std(static_cast<size_t>(C));
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int c = 0; c < C; ++c) {
        T mean = 0;
        for (int n = 0; n < N; ++n) {
            const T* p = xd + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) mean += p[i];
        }
        mean /= static_cast<T>(cnt);
        T var = 0;
        for (int n = 0; n < N; ++n) {
            const T* p = xd + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                const T d = p[i] - mean;
                var += d * d;
            }
        }
        var /= static_cast<T>(cnt);
        const T denom2 = var + eps;
        if (!(denom2 > T(0))) throw NumericError("batch_norm: variance + eps underflowed");
        const T is = T(1) / std::sqrt(denom2);
        inv_std[static_cast<size_t>(c)] = is;
        for (int n = 0; n < N; ++n) {
            const T* p = xd + (static_cast<int64_t>(n) * C + c) * hw;
            T* q = yd + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mean) * is;
        }
    }
    out.check_finite("batch_norm");

    if (detail::track(tape, x)) {
        TensorT<T> xc = x, yc = out;
        tape->record([xc, yc, inv_std = std::move(inv_std), N, C, hw, cnt]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            const T* y = yc.data().data();  // y is x-hat
            T* gx = xc.grad_mut().data();
            for (int c = 0; c < C; ++c) {
                T sum_g = 0, sum_gy = 0;
                for (int n = 0; n < N; ++n) {
                    const int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        sum_g += go[off + i];
                        sum_gy += go[off + i] * y[off + i];
                    }
                }
                const T mg = sum_g / static_cast<T>(cnt);
                const T mgy = sum_gy / static_cast<T>(cnt);
                const T is = inv_std[static_cast<size_t>(c)];
                for (int n = 0; n < N; ++n) {
                    const int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i)
                        gx[off + i] += is * (go[off + i] - mg - y[off + i] * mgy);
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x) {
    auto out = detail::make_output<T>(tape, x.shape(), x.requires_grad());
    const T* xd = x.data().data();
    T* yd = out.data_mut().data();
    for (int64_t i = 0; i < x.numel(); ++i) yd[i] = xd[i] > T(0) ? xd[i] : T(0);
    if (detail::track(tape, x)) {
        TensorT<T> xc = x, yc = out;
        tape->record([xc, yc]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            const T* xd = xc.data().data();
            T* gx = xc.grad_mut().data();
            for (int64_t i = 0; i < xc.numel(); ++i)
                if (xd[i] > T(0)) gx[i] += go[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> linear(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1)
        throw DimensionError("linear expects x[N,I], w[O,I], b[O]");
    const int N = x.dim(0), I = x.dim(1), O = w.dim(0);
    if (w.dim(1) != I || b.dim(0) != O) throw DimensionError("linear: shape mismatch");
    auto out = detail::make_output<T>(
        tape, {N, O}, x.requires_grad() || w.requires_grad() || b.requires_grad());
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    const T* bd = b.data().data();
    T* yd = out.data_mut().data();
    for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) {
            T acc = bd[o];
            for (int i = 0; i < I; ++i)
                acc += xd[static_cast<int64_t>(n) * I + i] * wd[static_cast<int64_t>(o) * I + i];
            yd[static_cast<int64_t>(n) * O + o] = acc;
        }
    }
    out.check_finite("linear");

    if (detail::track(tape, x) || detail::track(tape, w) || detail::track(tape, b)) {
        TensorT<T> xc = x, wc = w, bc = b, yc = out;
        tape->record([xc, wc, bc, yc, N, I, O]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            const T* xd = xc.data().data();
            const T* wd = wc.data().data();
            T* gx = xc.requires_grad() ? xc.grad_mut().data() : nullptr;
            T* gw = wc.requires_grad() ? wc.grad_mut().data() : nullptr;
            T* gb = bc.requires_grad() ? bc.grad_mut().data() : nullptr;
            for (int n = 0; n < N; ++n) {
                for (int o = 0; o < O; ++o) {
                    const T g = go[static_cast<int64_t>(n) * O + o];
                    if (g == T(0)) continue;
                    if (gb) gb[o] += g;
                    for (int i = 0; i < I; ++i) {
                        if (gx) gx[static_cast<int64_t>(n) * I + i] += g * wd[static_cast<int64_t>(o) * I + i];
                        if (gw) gw[static_cast<int64_t>(o) * I + i] += g * xd[static_cast<int64_t>(n) * I + i];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> global_avg_pool(TapeT<T>* tape, const TensorT<T>& x) {
    if (x.shape().size() != 4) throw DimensionError("global_avg_pool expects 4-d input");
    const int N = x.dim(0), C = x.dim(1);
    const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    auto out = detail::make_output<T>(tape, {N, C}, x.requires_grad());
    const T* xd = x.data().data();
    T* yd = out.data_mut().data();
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* p = xd + (static_cast<int64_t>(n) * C + c) * hw;
            T acc = 0;
            for (int64_t i = 0; i < hw; ++i) acc += p[i];
            yd[static_cast<int64_t>(n) * C + c] = acc / static_cast<T>(hw);
        }
    }
    if (detail::track(tape, x)) {
        TensorT<T> xc = x, yc = out;
        tape->record([xc, yc, N, C, hw]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            T* gx = xc.grad_mut().data();
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const T g = go[static_cast<int64_t>(n) * C + c] / static_cast<T>(hw);
                    T* p = gx + (static_cast<int64_t>(n) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) p[i] += g;
                }
            }
        });
    }
    return out;
}

// Sum of equally-shaped tensors. A single operand passes through unchanged
// (no new tensor is materialized).
template <typename T>
TensorT<T> add_n(TapeT<T>* tape, const std::vector<TensorT<T>>& xs) {
    if (xs.empty()) throw UsageError("add_n of zero tensors");
    if (xs.size() == 1) return xs[0];
    bool rg = false;
    for (const auto& x : xs) {
        if (x.shape() != xs[0].shape()) throw DimensionError("add_n: shape mismatch");
        rg = rg || x.requires_grad();
    }
    auto out = detail::make_output<T>(tape, xs[0].shape(), rg);
    T* yd = out.data_mut().data();
    for (const auto& x : xs) {
        const T* xd = x.data().data();
        for (int64_t i = 0; i < out.numel(); ++i) yd[i] += xd[i];
    }
    if (tape && rg) {
        std::vector<TensorT<T>> xc = xs;
        TensorT<T> yc = out;
        tape->record([xc, yc]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            for (auto& x : xc) {
                if (!x.requires_grad()) continue;
                T* gx = x.grad_mut().data();
                for (int64_t i = 0; i < yc.numel(); ++i) gx[i] += go[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T factor) {
    auto out = detail::make_output<T>(tape, x.shape(), x.requires_grad());
    const T* xd = x.data().data();
    T* yd = out.data_mut().data();
    for (int64_t i = 0; i < x.numel(); ++i) yd[i] = xd[i] * factor;
    if (detail::track(tape, x)) {
        TensorT<T> xc = x, yc = out;
        tape->record([xc, yc, factor]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            T* gx = xc.grad_mut().data();
            for (int64_t i = 0; i < xc.numel(); ++i) gx[i] += go[i] * factor;
        });
    }
    return out;
}

template <typename T>
TensorT<T> concat_channels(TapeT<T>* tape, const std::vector<TensorT<T>>& xs) {
    if (xs.empty()) throw UsageError("concat of zero tensors");
    const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    int Ct = 0;
    bool rg = false;
    for (const auto& x : xs) {
        if (x.shape().size() != 4 || x.dim(0) != N || x.dim(2) != H || x.dim(3) != W)
            throw DimensionError("concat_channels: shape mismatch");
        Ct += x.dim(1);
        rg = rg || x.requires_grad();
    }
    auto out = detail::make_output<T>(tape, {N, Ct, H, W}, rg);
    T* yd = out.data_mut().data();
    const int64_t hw = static_cast<int64_t>(H) * W;
    int coff = 0;
    for (const auto& x : xs) {
        const int Cx = x.dim(1);
        const T* xd = x.data().data();
        for (int n = 0; n < N; ++n)
            std::copy_n(xd + static_cast<int64_t>(n) * Cx * hw, static_cast<int64_t>(Cx) * hw,
                        yd + (static_cast<int64_t>(n) * Ct + coff) * hw);
        coff += Cx;
    }
    if (tape && rg) {
        std::vector<TensorT<T>> xc = xs;
        TensorT<T> yc = out;
        tape->record([xc, yc, N, Ct, hw]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            int coff = 0;
            for (auto& x : xc) {
                const int Cx = x.dim(1);
                if (x.requires_grad()) {
                    T* gx = x.grad_mut().data();
                    for (int n = 0; n < N; ++n) {
                        const T* src = go + (static_cast<int64_t>(n) * Ct + coff) * hw;
                        T* dst = gx + static_cast<int64_t>(n) * Cx * hw;
                        for (int64_t i = 0; i < static_cast<int64_t>(Cx) * hw; ++i) dst[i] += src[i];
                    }
                }
                coff += Cx;
            }
        });
    }
    return out;
}

// Spatial stride-2 subsampling (keeps even-index rows/cols). Used as the
// parameter-free skip connection inside reduction cells.
template <typename T>
TensorT<T> subsample2(TapeT<T>* tape, const TensorT<T>& x) {
    if (x.shape().size() != 4) throw DimensionError("subsample2 expects 4-d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = (H + 1) / 2, OW = (W + 1) / 2;
    auto out = detail::make_output<T>(tape, {N, C, OH, OW}, x.requires_grad());
    const T* xd = x.data().data();
    T* yd = out.data_mut().data();
    int64_t yi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const int64_t base = (static_cast<int64_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++yi)
                    yd[yi] = xd[base + static_cast<int64_t>(2 * oh) * W + 2 * ow];
        }
    if (detail::track(tape, x)) {
        TensorT<T> xc = x, yc = out;
        tape->record([xc, yc, N, C, H, W, OH, OW]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            T* gx = xc.grad_mut().data();
            int64_t yi = 0;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const int64_t base = (static_cast<int64_t>(n) * C + c) * H * W;
                    for (int oh = 0; oh < OH; ++oh)
                        for (int ow = 0; ow < OW; ++ow, ++yi)
                            gx[base + static_cast<int64_t>(2 * oh) * W + 2 * ow] += go[yi];
                }
        });
    }
    return out;
}

// Drop the first spatial row and column (x[:, :, 1:, 1:]).
template <typename T>
TensorT<T> crop_tl(TapeT<T>* tape, const TensorT<T>& x) {
    if (x.shape().size() != 4) throw DimensionError("crop_tl expects 4-d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H < 2 || W < 2) throw DimensionError("crop_tl: input too small");
    auto out = detail::make_output<T>(tape, {N, C, H - 1, W - 1}, x.requires_grad());
    const T* xd = x.data().data();
    T* yd = out.data_mut().data();
    int64_t yi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const int64_t base = (static_cast<int64_t>(n) * C + c) * H * W;
            for (int h = 1; h < H; ++h)
                for (int w = 1; w < W; ++w, ++yi) yd[yi] = xd[base + static_cast<int64_t>(h) * W + w];
        }
    if (detail::track(tape, x)) {
        TensorT<T> xc = x, yc = out;
        tape->record([xc, yc, N, C, H, W]() mutable {
            if (yc.grad().empty()) return;
            const T* go = yc.grad().data();
            T* gx = xc.grad_mut().data();
            int64_t yi = 0;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const int64_t base = (static_cast<int64_t>(n) * C + c) * H * W;
                    for (int h = 1; h < H; ++h)
                        for (int w = 1; w < W; ++w, ++yi) gx[base + static_cast<int64_t>(h) * W + w] += go[yi];
                }
        });
    }
    return out;
}

// Zero tensor standing in for the none operation; gradients do not flow
// through it, but it participates in activation accounting.
template <typename T>
TensorT<T> materialize_zeros(TapeT<T>* tape, std::vector<int> shape) {
    auto out = TensorT<T>::zeros(std::move(shape));
    if (tape) tape->add_activations(out.numel());
    return out;
}

// Mean over the batch of -log softmax(logits)[label], max-stabilized.
template <typename T>
TensorT<T> cross_entropy_loss(TapeT<T>* tape, const TensorT<T>& logits,
                              const std::vector<int>& labels) {
    if (logits.shape().size() != 2) throw DimensionError("cross_entropy expects [N,classes]");
    const int N = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != N)
        throw DimensionError("cross_entropy: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= K) throw UsageError("cross_entropy: label out of range");

    auto out = detail::make_output<T>(tape, {1}, logits.requires_grad());
    const T* zd = logits.data().data();
    // softmax probabilities are kept for the backward pass
    std::vector<T> probs(static_cast<size_t>(logits.numel()));
    T total = 0;
    for (int n = 0; n < N; ++n) {
        const T* z = zd + static_cast<int64_t>(n) * K;
        T m = z[0];
        for (int k = 1; k < K; ++k) m = std::max(m, z[k]);
        T denom = 0;
        for (int k = 0; k < K; ++k) denom += std::exp(z[k] - m);
        const T lse = m + std::log(denom);
        total += lse - z[labels[static_cast<size_t>(n)]];
        for (int k = 0; k < K; ++k)
            probs[static_cast<size_t>(n) * K + k] = std::exp(z[k] - m) / denom;
    }
    out.data_mut()[0] = total / static_cast<T>(N);
    out.check_finite("cross_entropy_loss");

    if (detail::track(tape, logits)) {
        TensorT<T> zc = logits, yc = out;
        tape->record([zc, yc, labels, probs = std::move(probs), N, K]() mutable {
            if (yc.grad().empty()) return;
            const T g = yc.grad()[0] / static_cast<T>(N);
            T* gz = zc.grad_mut().data();
            for (int n = 0; n < N; ++n)
                for (int k = 0; k < K; ++k) {
                    T p = probs[static_cast<size_t>(n) * K + k];
                    if (k == labels[static_cast<size_t>(n)]) p -= T(1);
                    gz[static_cast<int64_t>(n) * K + k] += g * p;
                }
        });
    }
    return out;
}

}  // namespace spider
