#pragma once

// Forward and backward kernels for every layer the architecture needs.
// All kernels are pure functions of their arguments; backward kernels
// accumulate (+=) into caller-provided gradient tensors so fan-out sums
// naturally. Reduction order is fixed, so results are bit-reproducible.

#include <cmath>
#include <optional>
#include <vector>

#include "twinlite/tensor.hpp"

namespace twinlite {

struct ConvParams {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
};

inline void check_conv_params(const char* op, const ConvParams& p) {
    require(p.stride >= 1, std::string(op) + ": stride must be >= 1, got " + std::to_string(p.stride));
    require(p.dilation >= 1, std::string(op) + ": dilation must be >= 1, got " + std::to_string(p.dilation));
    require(p.padding >= 0, std::string(op) + ": padding must be >= 0, got " + std::to_string(p.padding));
    require(p.groups >= 1, std::string(op) + ": groups must be >= 1, got " + std::to_string(p.groups));
}

inline int64_t conv_out_dim(int64_t in, int64_t k, int stride, int pad, int dilation) {
    return (in + 2 * static_cast<int64_t>(pad) - static_cast<int64_t>(dilation) * (k - 1) - 1) / stride + 1;
}

// ---------------------------------------------------------------------------
// conv2d: input [N,Cin,H,W], weight [Cout,Cin/groups,Kh,Kw], bias [Cout]
// ---------------------------------------------------------------------------

template <typename T>
void check_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, const ConvParams& p) {
    check_conv_params("conv2d", p);
    require(x.rank() == 4, "conv2d: input must be rank 4, got " + shape_str(x.shape));
    require(w.rank() == 4, "conv2d: weight must be rank 4, got " + shape_str(w.shape));
    const int64_t cin = x.dim(1), cout = w.dim(0);
    require(cin % p.groups == 0,
            "conv2d: input channels (" + std::to_string(cin) + ") not divisible by groups (" +
                std::to_string(p.groups) + ")");
    require(cout % p.groups == 0,
            "conv2d: output channels (" + std::to_string(cout) + ") not divisible by groups (" +
                std::to_string(p.groups) + ")");
    require(w.dim(1) * p.groups == cin,
            "conv2d: weight expects " + std::to_string(w.dim(1) * p.groups) + " input channels, input has " +
                std::to_string(cin));
    if (bias)
        require(bias->numel() == cout,
                "conv2d: bias has " + std::to_string(bias->numel()) + " entries for " + std::to_string(cout) +
                    " output channels");
    const int64_t ho = conv_out_dim(x.dim(2), w.dim(2), p.stride, p.padding, p.dilation);
    const int64_t wo = conv_out_dim(x.dim(3), w.dim(3), p.stride, p.padding, p.dilation);
    require(ho >= 1 && wo >= 1,
            "conv2d: output would be " + std::to_string(ho) + "x" + std::to_string(wo) + " for input " +
                shape_str(x.shape) + " and kernel " + shape_str(w.shape));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, const ConvParams& p) {
    check_conv2d(x, w, bias, p);
    const int64_t n_ = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = conv_out_dim(h, kh, p.stride, p.padding, p.dilation);
    const int64_t wo = conv_out_dim(wd, kw, p.stride, p.padding, p.dilation);
    const int64_t cin_g = cin / p.groups, cout_g = cout / p.groups;

    Tensor<T> out({n_, cout, ho, wo});
    const T* xd = x.data.data();
    const T* wdp = w.data.data();
    T* od = out.data.data();
    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t oc = 0; oc < cout; ++oc) {
            const int64_t g = oc / cout_g;
            const T b = bias ? (*bias)[oc] : T(0);
            for (int64_t oy = 0; oy < ho; ++oy) {
                for (int64_t ox = 0; ox < wo; ++ox) {
                    T acc = b;
                    for (int64_t ic = 0; ic < cin_g; ++ic) {
                        const T* xch = xd + ((n * cin + g * cin_g + ic) * h) * wd;
                        const T* wch = wdp + ((oc * cin_g + ic) * kh) * kw;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = oy * p.stride - p.padding + ky * p.dilation;
                            if (iy < 0 || iy >= h) continue;
                            const T* xrow = xch + iy * wd;
                            const T* wrow = wch + ky * kw;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = ox * p.stride - p.padding + kx * p.dilation;
                                if (ix < 0 || ix >= wd) continue;
                                acc += xrow[ix] * wrow[kx];
                            }
                        }
                    }
                    od[((n * cout + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvParams& p, const Tensor<T>& dy,
                     Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
    const int64_t n_ = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = dy.dim(2), wo = dy.dim(3);
    const int64_t cin_g = cin / p.groups, cout_g = cout / p.groups;

    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t oc = 0; oc < cout; ++oc) {
            const int64_t g = oc / cout_g;
            for (int64_t oy = 0; oy < ho; ++oy) {
                for (int64_t ox = 0; ox < wo; ++ox) {
                    const T gup = dy.at(n, oc, oy, ox);
                    if (db) (*db)[oc] += gup;
                    for (int64_t ic = 0; ic < cin_g; ++ic) {
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = oy * p.stride - p.padding + ky * p.dilation;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = ox * p.stride - p.padding + kx * p.dilation;
                                if (ix < 0 || ix >= wd) continue;
                                const int64_t wi = ((oc * cin_g + ic) * kh + ky) * kw + kx;
                                if (dw) (*dw)[wi] += gup * x.at(n, g * cin_g + ic, iy, ix);
                                if (dx) dx->at(n, g * cin_g + ic, iy, ix) += gup * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv_transpose2d: input [N,Cin,H,W], weight [Cin,Cout,Kh,Kw], padding 0.
// Scatter-add semantics; output [N,Cout,(H-1)*stride+Kh,(W-1)*stride+Kw].
// ---------------------------------------------------------------------------

template <typename T>
void check_conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, int stride) {
    require(stride >= 1, "conv_transpose2d: stride must be >= 1, got " + std::to_string(stride));
    require(x.rank() == 4, "conv_transpose2d: input must be rank 4, got " + shape_str(x.shape));
    require(w.rank() == 4, "conv_transpose2d: weight must be rank 4, got " + shape_str(w.shape));
    require(w.dim(0) == x.dim(1),
            "conv_transpose2d: weight expects " + std::to_string(w.dim(0)) + " input channels, input has " +
                std::to_string(x.dim(1)));
    if (bias)
        require(bias->numel() == w.dim(1),
                "conv_transpose2d: bias has " + std::to_string(bias->numel()) + " entries for " +
                    std::to_string(w.dim(1)) + " output channels");
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, int stride) {
    check_conv_transpose2d(x, w, bias, stride);
    const int64_t n_ = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = (h - 1) * stride + kh;
    const int64_t wo = (wd - 1) * stride + kw;

    Tensor<T> out({n_, cout, ho, wo});
    if (bias) {
        for (int64_t n = 0; n < n_; ++n)
            for (int64_t oc = 0; oc < cout; ++oc) {
                T* orow = out.data.data() + ((n * cout + oc) * ho) * wo;
                const T b = (*bias)[oc];
                for (int64_t i = 0; i < ho * wo; ++i) orow[i] = b;
            }
    }
    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t ic = 0; ic < cin; ++ic) {
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t xx = 0; xx < wd; ++xx) {
                    const T v = x.at(n, ic, y, xx);
                    for (int64_t oc = 0; oc < cout; ++oc) {
                        const T* wch = w.data.data() + ((ic * cout + oc) * kh) * kw;
                        T* och = out.data.data() + ((n * cout + oc) * ho) * wo;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            T* orow = och + (y * stride + ky) * wo + xx * stride;
                            const T* wrow = wch + ky * kw;
                            for (int64_t kx = 0; kx < kw; ++kx) orow[kx] += v * wrow[kx];
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
void conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, const Tensor<T>& dy,
                               Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
    const int64_t n_ = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = dy.dim(2), wo = dy.dim(3);

    if (db) {
        for (int64_t n = 0; n < n_; ++n)
            for (int64_t oc = 0; oc < cout; ++oc) {
                const T* gr = dy.data.data() + ((n * cout + oc) * ho) * wo;
                T acc = T(0);
                for (int64_t i = 0; i < ho * wo; ++i) acc += gr[i];
                (*db)[oc] += acc;
            }
    }
    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t ic = 0; ic < cin; ++ic) {
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t xx = 0; xx < wd; ++xx) {
                    const T v = x.at(n, ic, y, xx);
                    T acc = T(0);
                    for (int64_t oc = 0; oc < cout; ++oc) {
                        const T* wch = w.data.data() + ((ic * cout + oc) * kh) * kw;
                        const T* gch = dy.data.data() + ((n * cout + oc) * ho) * wo;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const T* grow = gch + (y * stride + ky) * wo + xx * stride;
                            const T* wrow = wch + ky * kw;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const T g = grow[kx];
                                acc += g * wrow[kx];
                                if (dw) (*dw)[((ic * cout + oc) * kh + ky) * kw + kx] += g * v;
                            }
                        }
                    }
                    if (dx) dx->at(n, ic, y, xx) += acc;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// batch normalization over N,H,W per channel
// ---------------------------------------------------------------------------

enum class BnMode { training, inference };

template <typename T>
void check_batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps) {
    require(x.rank() == 4, "batch_norm: input must be rank 4, got " + shape_str(x.shape));
    const int64_t c = x.dim(1);
    auto check_c = [&](const Tensor<T>& t, const char* name) {
        require(t.numel() == c, std::string("batch_norm: ") + name + " has " + std::to_string(t.numel()) +
                                    " entries for " + std::to_string(c) + " channels");
    };
    check_c(gamma, "gamma");
    check_c(beta, "beta");
    check_c(running_mean, "running_mean");
    check_c(running_var, "running_var");
    require(eps > T(0), "batch_norm: eps must be > 0");
}

// training mode normalizes by batch statistics (biased variance) and updates the
// caller-owned running stats in place; inference mode reads running stats only.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, T eps, BnMode mode, T momentum) {
    check_batch_norm(x, gamma, beta, running_mean, running_var, eps);
    const int64_t n_ = x.dim(0), c_ = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t plane = h * w;
    const int64_t count = n_ * plane;

    Tensor<T> out(x.shape);
    for (int64_t c = 0; c < c_; ++c) {
        T mean, var;
        if (mode == BnMode::training) {
            T sum = T(0);
            for (int64_t n = 0; n < n_; ++n) {
                const T* row = x.data.data() + ((n * c_ + c) * plane);
                for (int64_t i = 0; i < plane; ++i) sum += row[i];
            }
            mean = sum / static_cast<T>(count);
            T sq = T(0);
            for (int64_t n = 0; n < n_; ++n) {
                const T* row = x.data.data() + ((n * c_ + c) * plane);
                for (int64_t i = 0; i < plane; ++i) {
                    const T d = row[i] - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<T>(count);
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean;
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
        } else {
            mean = running_mean[c];
            var = running_var[c];
        }
        const T invstd = T(1) / std::sqrt(var + eps);
        const T g = gamma[c], b = beta[c];
        for (int64_t n = 0; n < n_; ++n) {
            const T* row = x.data.data() + ((n * c_ + c) * plane);
            T* orow = out.data.data() + ((n * c_ + c) * plane);
            for (int64_t i = 0; i < plane; ++i) orow[i] = (row[i] - mean) * invstd * g + b;
        }
    }
    return out;
}

// Training-mode backward differentiates through the batch statistics.
template <typename T>
void batch_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& running_mean,
                         const Tensor<T>& running_var, T eps, BnMode mode, const Tensor<T>& dy,
                         Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta) {
    const int64_t n_ = x.dim(0), c_ = x.dim(1), plane = x.dim(2) * x.dim(3);
    const int64_t count = n_ * plane;

    for (int64_t c = 0; c < c_; ++c) {
        T mean, var;
        if (mode == BnMode::training) {
            T sum = T(0);
            for (int64_t n = 0; n < n_; ++n) {
                const T* row = x.data.data() + ((n * c_ + c) * plane);
                for (int64_t i = 0; i < plane; ++i) sum += row[i];
            }
            mean = sum / static_cast<T>(count);
            T sq = T(0);
            for (int64_t n = 0; n < n_; ++n) {
                const T* row = x.data.data() + ((n * c_ + c) * plane);
                for (int64_t i = 0; i < plane; ++i) {
                    const T d = row[i] - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<T>(count);
        } else {
            mean = running_mean[c];
            var = running_var[c];
        }
        const T invstd = T(1) / std::sqrt(var + eps);

        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (int64_t n = 0; n < n_; ++n) {
            const T* xrow = x.data.data() + ((n * c_ + c) * plane);
            const T* grow = dy.data.data() + ((n * c_ + c) * plane);
            for (int64_t i = 0; i < plane; ++i) {
                const T xhat = (xrow[i] - mean) * invstd;
                sum_dy += grow[i];
                sum_dy_xhat += grow[i] * xhat;
            }
        }
        if (dbeta) (*dbeta)[c] += sum_dy;
        if (dgamma) (*dgamma)[c] += sum_dy_xhat;
        if (!dx) continue;

        const T g = gamma[c];
        if (mode == BnMode::training) {
            const T inv_count = T(1) / static_cast<T>(count);
            for (int64_t n = 0; n < n_; ++n) {
                const T* xrow = x.data.data() + ((n * c_ + c) * plane);
                const T* grow = dy.data.data() + ((n * c_ + c) * plane);
                T* drow = dx->data.data() + ((n * c_ + c) * plane);
                for (int64_t i = 0; i < plane; ++i) {
                    const T xhat = (xrow[i] - mean) * invstd;
                    drow[i] += g * invstd * (grow[i] - inv_count * sum_dy - xhat * inv_count * sum_dy_xhat);
                }
            }
        } else {
            for (int64_t n = 0; n < n_; ++n) {
                const T* grow = dy.data.data() + ((n * c_ + c) * plane);
                T* drow = dx->data.data() + ((n * c_ + c) * plane);
                for (int64_t i = 0; i < plane; ++i) drow[i] += g * invstd * grow[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// PReLU with one learnable slope per channel
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slope) {
    require(x.rank() >= 2, "prelu: input must have a channel dimension, got " + shape_str(x.shape));
    const int64_t c_ = x.dim(1);
    require(slope.numel() == c_, "prelu: slope has " + std::to_string(slope.numel()) + " entries for " +
                                     std::to_string(c_) + " channels");
    const int64_t n_ = x.dim(0);
    int64_t inner = 1;
    for (int i = 2; i < x.rank(); ++i) inner *= x.dim(i);

    Tensor<T> out(x.shape);
    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t c = 0; c < c_; ++c) {
            const T a = slope[c];
            const T* row = x.data.data() + (n * c_ + c) * inner;
            T* orow = out.data.data() + (n * c_ + c) * inner;
            for (int64_t i = 0; i < inner; ++i) orow[i] = row[i] >= T(0) ? row[i] : a * row[i];
        }
    }
    return out;
}

// Gradient at x == 0 takes the nonnegative branch.
template <typename T>
void prelu_backward(const Tensor<T>& x, const Tensor<T>& slope, const Tensor<T>& dy, Tensor<T>* dx,
                    Tensor<T>* dslope) {
    const int64_t n_ = x.dim(0), c_ = x.dim(1);
    int64_t inner = 1;
    for (int i = 2; i < x.rank(); ++i) inner *= x.dim(i);

    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t c = 0; c < c_; ++c) {
            const T a = slope[c];
            const T* xrow = x.data.data() + (n * c_ + c) * inner;
            const T* grow = dy.data.data() + (n * c_ + c) * inner;
            T* drow = dx ? dx->data.data() + (n * c_ + c) * inner : nullptr;
            T dsl = T(0);
            for (int64_t i = 0; i < inner; ++i) {
                if (xrow[i] >= T(0)) {
                    if (drow) drow[i] += grow[i];
                } else {
                    if (drow) drow[i] += a * grow[i];
                    dsl += grow[i] * xrow[i];
                }
            }
            if (dslope) (*dslope)[c] += dsl;
        }
    }
}

// ---------------------------------------------------------------------------
// average pooling (no padding)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride) {
    require(x.rank() == 4, "avg_pool2d: input must be rank 4, got " + shape_str(x.shape));
    require(kernel >= 1 && stride >= 1, "avg_pool2d: kernel and stride must be >= 1");
    const int64_t n_ = x.dim(0), c_ = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t ho = conv_out_dim(h, kernel, stride, 0, 1);
    const int64_t wo = conv_out_dim(w, kernel, stride, 0, 1);
    require(ho >= 1 && wo >= 1, "avg_pool2d: output would be " + std::to_string(ho) + "x" + std::to_string(wo) +
                                    " for input " + shape_str(x.shape));

    Tensor<T> out({n_, c_, ho, wo});
    const T inv = T(1) / static_cast<T>(kernel * kernel);
    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t c = 0; c < c_; ++c) {
            const T* ch = x.data.data() + ((n * c_ + c) * h) * w;
            T* och = out.data.data() + ((n * c_ + c) * ho) * wo;
            for (int64_t oy = 0; oy < ho; ++oy) {
                for (int64_t ox = 0; ox < wo; ++ox) {
                    T acc = T(0);
                    for (int64_t ky = 0; ky < kernel; ++ky) {
                        const T* row = ch + (oy * stride + ky) * w + ox * stride;
                        for (int64_t kx = 0; kx < kernel; ++kx) acc += row[kx];
                    }
                    och[oy * wo + ox] = acc * inv;
                }
            }
        }
    }
    return out;
}

template <typename T>
void avg_pool2d_backward(const Tensor<T>& x, int kernel, int stride, const Tensor<T>& dy, Tensor<T>* dx) {
    if (!dx) return;
    const int64_t n_ = x.dim(0), c_ = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t ho = dy.dim(2), wo = dy.dim(3);
    const T inv = T(1) / static_cast<T>(kernel * kernel);
    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t c = 0; c < c_; ++c) {
            const T* gch = dy.data.data() + ((n * c_ + c) * ho) * wo;
            T* dch = dx->data.data() + ((n * c_ + c) * h) * w;
            for (int64_t oy = 0; oy < ho; ++oy) {
                for (int64_t ox = 0; ox < wo; ++ox) {
                    const T g = gch[oy * wo + ox] * inv;
                    for (int64_t ky = 0; ky < kernel; ++ky) {
                        T* row = dch + (oy * stride + ky) * w + ox * stride;
                        for (int64_t kx = 0; kx < kernel; ++kx) row[kx] += g;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// softmax: over channels of NCHW, and over the last axis of any tensor
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    require(x.rank() == 4, "softmax_channels: input must be rank 4, got " + shape_str(x.shape));
    const int64_t n_ = x.dim(0), c_ = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> out(x.shape);
    std::vector<T> col(static_cast<size_t>(c_));
    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t i = 0; i < plane; ++i) {
            T mx = x.data[static_cast<size_t>((n * c_) * plane + i)];
            for (int64_t c = 1; c < c_; ++c) mx = std::max(mx, x.data[static_cast<size_t>((n * c_ + c) * plane + i)]);
            T sum = T(0);
            for (int64_t c = 0; c < c_; ++c) {
                const T e = std::exp(x.data[static_cast<size_t>((n * c_ + c) * plane + i)] - mx);
                col[static_cast<size_t>(c)] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (int64_t c = 0; c < c_; ++c)
                out.data[static_cast<size_t>((n * c_ + c) * plane + i)] = col[static_cast<size_t>(c)] * inv;
        }
    }
    return out;
}

template <typename T>
void softmax_channels_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>* dx) {
    if (!dx) return;
    const int64_t n_ = y.dim(0), c_ = y.dim(1), plane = y.dim(2) * y.dim(3);
    for (int64_t n = 0; n < n_; ++n) {
        for (int64_t i = 0; i < plane; ++i) {
            T dot = T(0);
            for (int64_t c = 0; c < c_; ++c) {
                const size_t k = static_cast<size_t>((n * c_ + c) * plane + i);
                dot += dy.data[k] * y.data[k];
            }
            for (int64_t c = 0; c < c_; ++c) {
                const size_t k = static_cast<size_t>((n * c_ + c) * plane + i);
                dx->data[k] += y.data[k] * (dy.data[k] - dot);
            }
        }
    }
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    require(x.rank() >= 1, "softmax_lastdim: input must have at least one axis");
    const int64_t d = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / d;
    Tensor<T> out(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = x.data.data() + r * d;
        T* orow = out.data.data() + r * d;
        T mx = row[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < d; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
    }
    return out;
}

template <typename T>
void softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>* dx) {
    if (!dx) return;
    const int64_t d = y.dim(y.rank() - 1);
    const int64_t rows = y.numel() / d;
    for (int64_t r = 0; r < rows; ++r) {
        const T* yrow = y.data.data() + r * d;
        const T* grow = dy.data.data() + r * d;
        T* drow = dx->data.data() + r * d;
        T dot = T(0);
        for (int64_t j = 0; j < d; ++j) dot += grow[j] * yrow[j];
        for (int64_t j = 0; j < d; ++j) drow[j] += yrow[j] * (grow[j] - dot);
    }
}

// ---------------------------------------------------------------------------
// batched matrix multiply: [B,M,K] x [B,K,P] -> [B,M,P]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 3 && b.rank() == 3,
            "bmm: inputs must be rank 3, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
    require(a.dim(0) == b.dim(0),
            "bmm: batch dims differ, " + std::to_string(a.dim(0)) + " vs " + std::to_string(b.dim(0)));
    require(a.dim(2) == b.dim(1),
            "bmm: inner dims differ, " + std::to_string(a.dim(2)) + " vs " + std::to_string(b.dim(1)));
    const int64_t bn = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
    Tensor<T> out({bn, m, p});
    for (int64_t q = 0; q < bn; ++q) {
        const T* am = a.data.data() + q * m * k;
        const T* bm = b.data.data() + q * k * p;
        T* om = out.data.data() + q * m * p;
        for (int64_t i = 0; i < m; ++i) {
            T* orow = om + i * p;
            for (int64_t kk = 0; kk < k; ++kk) {
                const T av = am[i * k + kk];
                const T* brow = bm + kk * p;
                for (int64_t j = 0; j < p; ++j) orow[j] += av * brow[j];
            }
        }
    }
    return out;
}

template <typename T>
void bmm_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dy, Tensor<T>* da, Tensor<T>* db) {
    const int64_t bn = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
    for (int64_t q = 0; q < bn; ++q) {
        const T* am = a.data.data() + q * m * k;
        const T* bm = b.data.data() + q * k * p;
        const T* gm = dy.data.data() + q * m * p;
        if (da) {
            // da = dy . b^T
            T* dam = da->data.data() + q * m * k;
            for (int64_t i = 0; i < m; ++i)
                for (int64_t kk = 0; kk < k; ++kk) {
                    const T* grow = gm + i * p;
                    const T* brow = bm + kk * p;
                    T acc = T(0);
                    for (int64_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
                    dam[i * k + kk] += acc;
                }
        }
        if (db) {
            // db = a^T . dy
            T* dbm = db->data.data() + q * k * p;
            for (int64_t i = 0; i < m; ++i)
                for (int64_t kk = 0; kk < k; ++kk) {
                    const T av = am[i * k + kk];
                    const T* grow = gm + i * p;
                    T* drow = dbm + kk * p;
                    for (int64_t j = 0; j < p; ++j) drow[j] += av * grow[j];
                }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise suite and small structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "add: shapes differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "mul: shapes differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

// out = s[0] * a, with s a learnable 1-element tensor
template <typename T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
    require(s.numel() == 1, "scale_by: scale must hold exactly one element, got " + shape_str(s.shape));
    return scale(a, s[0]);
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
    require(!parts.empty(), "concat_channels: need at least one input");
    const Tensor<T>& first = *parts[0];
    require(first.rank() == 4, "concat_channels: inputs must be rank 4, got " + shape_str(first.shape));
    int64_t ctot = 0;
    for (const Tensor<T>* p : parts) {
        require(p->rank() == 4 && p->dim(0) == first.dim(0) && p->dim(2) == first.dim(2) &&
                    p->dim(3) == first.dim(3),
                "concat_channels: " + shape_str(p->shape) + " does not match " + shape_str(first.shape) +
                    " outside the channel axis");
        ctot += p->dim(1);
    }
    const int64_t n_ = first.dim(0), plane = first.dim(2) * first.dim(3);
    Tensor<T> out({n_, ctot, first.dim(2), first.dim(3)});
    for (int64_t n = 0; n < n_; ++n) {
        int64_t coff = 0;
        for (const Tensor<T>* p : parts) {
            const int64_t pc = p->dim(1);
            std::copy(p->data.begin() + (n * pc) * plane, p->data.begin() + ((n + 1) * pc) * plane,
                      out.data.begin() + ((n * ctot + coff) * plane));
            coff += pc;
        }
    }
    return out;
}

template <typename T>
void concat_channels_backward(const Tensor<T>& dy, const std::vector<Shape>& part_shapes,
                              const std::vector<Tensor<T>*>& dparts) {
    const int64_t n_ = dy.dim(0), ctot = dy.dim(1), plane = dy.dim(2) * dy.dim(3);
    for (int64_t n = 0; n < n_; ++n) {
        int64_t coff = 0;
        for (size_t pi = 0; pi < part_shapes.size(); ++pi) {
            const int64_t pc = part_shapes[pi][1];
            if (dparts[pi]) {
                T* dst = dparts[pi]->data.data() + (n * pc) * plane;
                const T* src = dy.data.data() + ((n * ctot + coff) * plane);
                for (int64_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
            }
            coff += pc;
        }
    }
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
    require(shape_numel(s) == a.numel(),
            "reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(s));
    Tensor<T> out = a;
    out.shape = std::move(s);
    return out;
}

// [B,M,N] -> [B,N,M]
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
    require(a.rank() == 3, "transpose_last2: input must be rank 3, got " + shape_str(a.shape));
    const int64_t b = a.dim(0), m = a.dim(1), n = a.dim(2);
    Tensor<T> out({b, n, m});
    for (int64_t q = 0; q < b; ++q) {
        const T* am = a.data.data() + q * m * n;
        T* om = out.data.data() + q * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) om[j * m + i] = am[i * n + j];
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = T(0);
    for (int64_t i = 0; i < a.numel(); ++i) acc += a[i];
    return Tensor<T>::scalar(acc);
}

}  // namespace twinlite
