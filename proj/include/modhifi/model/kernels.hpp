#pragma once

// Forward and backward kernels for each layer kind. Backward functions
// accumulate parameter gradients into a layer of the same type and return
// the gradient with respect to the layer input.

#include <cmath>
#include <numbers>

#include "modhifi/model/graph.hpp"
#include "modhifi/tensor.hpp"

namespace modhifi::kernels {

// ---------------------------------------------------------------- dense

inline Tensor dense_forward(const Dense& d, const Tensor& x) {
    const Shape& s = x.shape();
    Tensor y(x.batch(), {d.out, s.h, s.w});
    const std::size_t sp = s.spatial();
    for (std::size_t n = 0; n < x.batch(); ++n)
        for (std::size_t o = 0; o < d.out; ++o) {
            auto yo = y.channel(n, o);
            for (std::size_t p = 0; p < sp; ++p) yo[p] = 0.0;
            for (std::size_t i = 0; i < d.in; ++i) {
                const double wv = d.w(o, i);
                auto xi = x.channel(n, i);
                for (std::size_t p = 0; p < sp; ++p) yo[p] += wv * xi[p];
            }
            for (std::size_t p = 0; p < sp; ++p) yo[p] += d.bias[o];
        }
    return y;
}

inline Tensor dense_backward(const Dense& d, const Tensor& x, const Tensor& dy, Dense& grad) {
    Tensor dx(x.batch(), x.shape());
    const std::size_t sp = x.shape().spatial();
    for (std::size_t n = 0; n < x.batch(); ++n)
        for (std::size_t o = 0; o < d.out; ++o) {
            auto g = dy.channel(n, o);
            for (std::size_t p = 0; p < sp; ++p) grad.bias[o] += g[p];
            for (std::size_t i = 0; i < d.in; ++i) {
                auto xi = x.channel(n, i);
                auto dxi = dx.channel(n, i);
                double acc = 0.0;
                const double wv = d.w(o, i);
                for (std::size_t p = 0; p < sp; ++p) {
                    acc += g[p] * xi[p];
                    dxi[p] += wv * g[p];
                }
                grad.w(o, i) += acc;
            }
        }
    return dx;
}

// ---------------------------------------------------------------- conv

/// Cross-correlates one input plane with one k x k filter, same padding,
/// adding into `out`.
inline void correlate_add(std::span<const double> in, std::span<const double> filter, std::size_t h, std::size_t w,
                          std::size_t k, std::span<double> out) {
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto H = static_cast<std::ptrdiff_t>(h);
    const auto W = static_cast<std::ptrdiff_t>(w);
    for (std::ptrdiff_t y = 0; y < H; ++y)
        for (std::ptrdiff_t x = 0; x < W; ++x) {
            double acc = 0.0;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - pad;
                if (sy < 0 || sy >= H) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(kx) - pad;
                    if (sx < 0 || sx >= W) continue;
                    acc += filter[ky * k + kx] * in[static_cast<std::size_t>(sy * W + sx)];
                }
            }
            out[static_cast<std::size_t>(y * W + x)] += acc;
        }
}

inline Tensor conv_forward(const Conv2D& c, const Tensor& x) {
    const Shape& s = x.shape();
    Tensor y(x.batch(), {c.out, s.h, s.w});
    for (std::size_t n = 0; n < x.batch(); ++n)
        for (std::size_t o = 0; o < c.out; ++o) {
            auto yo = y.channel(n, o);
            for (std::size_t i = 0; i < c.in; ++i) correlate_add(x.channel(n, i), c.filter(o, i), s.h, s.w, c.kernel, yo);
            for (double& v : yo) v += c.bias[o];
        }
    return y;
}

inline Tensor conv_backward(const Conv2D& c, const Tensor& x, const Tensor& dy, Conv2D& grad) {
    const Shape& s = x.shape();
    Tensor dx(x.batch(), s);
    const auto pad = static_cast<std::ptrdiff_t>(c.kernel / 2);
    const auto H = static_cast<std::ptrdiff_t>(s.h);
    const auto W = static_cast<std::ptrdiff_t>(s.w);
    const std::size_t k = c.kernel;
    for (std::size_t n = 0; n < x.batch(); ++n)
        for (std::size_t o = 0; o < c.out; ++o) {
            auto g = dy.channel(n, o);
            for (double v : g) grad.bias[o] += v;
            for (std::size_t i = 0; i < c.in; ++i) {
                auto xi = x.channel(n, i);
                auto dxi = dx.channel(n, i);
                auto f = c.filter(o, i);
                auto gf = grad.filter(o, i);
                for (std::ptrdiff_t y = 0; y < H; ++y)
                    for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
                        const double gv = g[static_cast<std::size_t>(y * W + xx)];
                        if (gv == 0.0) continue;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - pad;
                            if (sy < 0 || sy >= H) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::ptrdiff_t sx = xx + static_cast<std::ptrdiff_t>(kx) - pad;
                                if (sx < 0 || sx >= W) continue;
                                const auto idx = static_cast<std::size_t>(sy * W + sx);
                                gf[ky * k + kx] += gv * xi[idx];
                                dxi[idx] += gv * f[ky * k + kx];
                            }
                        }
                    }
            }
        }
    return dx;
}

// ---------------------------------------------------------------- batchnorm

inline Tensor batchnorm_forward(const BatchNorm2D& b, const Tensor& x) {
    Tensor y(x.batch(), x.shape());
    for (std::size_t c = 0; c < b.channels; ++c) {
        const double scale = b.gamma[c] / std::sqrt(b.running_var[c] + b.eps);
        const double shift = b.beta[c] - b.running_mean[c] * scale;
        for (std::size_t n = 0; n < x.batch(); ++n) {
            auto xi = x.channel(n, c);
            auto yi = y.channel(n, c);
            for (std::size_t p = 0; p < xi.size(); ++p) yi[p] = xi[p] * scale + shift;
        }
    }
    return y;
}

struct BatchNormCache {
    std::vector<double> mean;
    std::vector<double> var;      // biased batch variance
    std::vector<double> inv_std;
    Tensor xhat;
};

/// Training-mode forward: normalizes with batch statistics.
inline Tensor batchnorm_forward_train(const BatchNorm2D& b, const Tensor& x, BatchNormCache& cache) {
    const std::size_t sp = x.shape().spatial();
    const double m = static_cast<double>(x.batch() * sp);
    cache.mean.assign(b.channels, 0.0);
    cache.var.assign(b.channels, 0.0);
    cache.inv_std.assign(b.channels, 0.0);
    cache.xhat = Tensor(x.batch(), x.shape());
    Tensor y(x.batch(), x.shape());
    for (std::size_t c = 0; c < b.channels; ++c) {
        double sum = 0.0;
        for (std::size_t n = 0; n < x.batch(); ++n)
            for (double v : x.channel(n, c)) sum += v;
        const double mean = sum / m;
        double sq = 0.0;
        for (std::size_t n = 0; n < x.batch(); ++n)
            for (double v : x.channel(n, c)) sq += (v - mean) * (v - mean);
        const double var = sq / m;
        const double inv = 1.0 / std::sqrt(var + b.eps);
        cache.mean[c] = mean;
        cache.var[c] = var;
        cache.inv_std[c] = inv;
        for (std::size_t n = 0; n < x.batch(); ++n) {
            auto xi = x.channel(n, c);
            auto xh = cache.xhat.channel(n, c);
            auto yi = y.channel(n, c);
            for (std::size_t p = 0; p < sp; ++p) {
                xh[p] = (xi[p] - mean) * inv;
                yi[p] = b.gamma[c] * xh[p] + b.beta[c];
            }
        }
    }
    return y;
}

inline Tensor batchnorm_backward_train(const BatchNorm2D& b, const BatchNormCache& cache, const Tensor& dy,
                                       BatchNorm2D& grad) {
    const std::size_t sp = dy.shape().spatial();
    const double m = static_cast<double>(dy.batch() * sp);
    Tensor dx(dy.batch(), dy.shape());
    for (std::size_t c = 0; c < b.channels; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t n = 0; n < dy.batch(); ++n) {
            auto g = dy.channel(n, c);
            auto xh = cache.xhat.channel(n, c);
            for (std::size_t p = 0; p < sp; ++p) {
                sum_g += g[p];
                sum_gx += g[p] * xh[p];
            }
        }
        grad.beta[c] += sum_g;
        grad.gamma[c] += sum_gx;
        const double k = b.gamma[c] * cache.inv_std[c] / m;
        for (std::size_t n = 0; n < dy.batch(); ++n) {
            auto g = dy.channel(n, c);
            auto xh = cache.xhat.channel(n, c);
            auto d = dx.channel(n, c);
            for (std::size_t p = 0; p < sp; ++p) d[p] = k * (m * g[p] - sum_g - xh[p] * sum_gx);
        }
    }
    return dx;
}

/// Inference-mode backward: the layer is a per-channel affine map.
inline Tensor batchnorm_backward_infer(const BatchNorm2D& b, const Tensor& x, const Tensor& dy, BatchNorm2D& grad) {
    Tensor dx(dy.batch(), dy.shape());
    for (std::size_t c = 0; c < b.channels; ++c) {
        const double inv = 1.0 / std::sqrt(b.running_var[c] + b.eps);
        for (std::size_t n = 0; n < dy.batch(); ++n) {
            auto g = dy.channel(n, c);
            auto xi = x.channel(n, c);
            auto d = dx.channel(n, c);
            for (std::size_t p = 0; p < g.size(); ++p) {
                grad.beta[c] += g[p];
                grad.gamma[c] += g[p] * (xi[p] - b.running_mean[c]) * inv;
                d[p] = g[p] * b.gamma[c] * inv;
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------- norm

/// Applies M (centering for LayerNorm) to a channel vector in place.
inline void apply_norm_projection(NormType type, std::span<double> z) {
    if (type != NormType::LayerNorm) return;
    double mean = 0.0;
    for (double v : z) mean += v;
    mean /= static_cast<double>(z.size());
    for (double& v : z) v -= mean;
}

struct NormCache {
    Tensor unit;                  // Mx / ||Mx||, zero where ||Mx|| = 0
    std::vector<double> length;   // ||Mx|| per (n, position)
};

inline Tensor norm_forward(const Norm& nl, const Tensor& x, NormCache* cache = nullptr) {
    const Shape& s = x.shape();
    const std::size_t sp = s.spatial();
    Tensor y(x.batch(), s);
    Tensor unit(x.batch(), s);
    std::vector<double> len(x.batch() * sp);
    std::vector<double> z(s.c);
    for (std::size_t n = 0; n < x.batch(); ++n)
        for (std::size_t p = 0; p < sp; ++p) {
            for (std::size_t c = 0; c < s.c; ++c) z[c] = x.at(n, c, p);
            apply_norm_projection(nl.type, z);
            double sq = 0.0;
            for (double v : z) sq += v * v;
            const double l = std::sqrt(sq);
            len[n * sp + p] = l;
            for (std::size_t c = 0; c < s.c; ++c) {
                const double u = l > 0.0 ? z[c] / l : 0.0;
                unit.at(n, c, p) = u;
                y.at(n, c, p) = nl.gamma[c] * u + nl.beta[c];
            }
        }
    if (cache) {
        cache->unit = std::move(unit);
        cache->length = std::move(len);
    }
    return y;
}

inline Tensor norm_backward(const Norm& nl, const NormCache& cache, const Tensor& dy, Norm& grad) {
    const Shape& s = dy.shape();
    const std::size_t sp = s.spatial();
    Tensor dx(dy.batch(), s);
    std::vector<double> g(s.c);
    for (std::size_t n = 0; n < dy.batch(); ++n)
        for (std::size_t p = 0; p < sp; ++p) {
            const double l = cache.length[n * sp + p];
            double ug = 0.0;
            for (std::size_t c = 0; c < s.c; ++c) {
                const double d = dy.at(n, c, p);
                const double u = cache.unit.at(n, c, p);
                grad.gamma[c] += d * u;
                grad.beta[c] += d;
                g[c] = d * nl.gamma[c];
                ug += u * g[c];
            }
            if (l == 0.0) continue;
            for (std::size_t c = 0; c < s.c; ++c) g[c] = (g[c] - cache.unit.at(n, c, p) * ug) / l;
            apply_norm_projection(nl.type, g);
            for (std::size_t c = 0; c < s.c; ++c) dx.at(n, c, p) = g[c];
        }
    return dx;
}

// ---------------------------------------------------------------- activations

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

inline Tensor relu_forward(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
    Tensor dx = dy;
    auto xs = x.data();
    auto d = dx.data();
    for (std::size_t i = 0; i < d.size(); ++i)
        if (!(xs[i] > 0.0)) d[i] = 0.0;
    return dx;
}

inline Tensor gelu_forward(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data()) v = gelu(v);
    return y;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
    Tensor dx = dy;
    auto xs = x.data();
    auto d = dx.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= gelu_grad(xs[i]);
    return dx;
}

// ---------------------------------------------------------------- pooling

inline Tensor avgpool_forward(const AvgPool2D& pool, const Tensor& x) {
    const Shape& s = x.shape();
    const std::size_t kh = pool.kernel == 0 ? s.h : pool.kernel;
    const std::size_t kw = pool.kernel == 0 ? s.w : pool.kernel;
    const Shape os{s.c, s.h / kh, s.w / kw};
    Tensor y(x.batch(), os);
    const double inv = 1.0 / static_cast<double>(kh * kw);
    for (std::size_t n = 0; n < x.batch(); ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            auto xi = x.channel(n, c);
            auto yo = y.channel(n, c);
            for (std::size_t oy = 0; oy < os.h; ++oy)
                for (std::size_t ox = 0; ox < os.w; ++ox) {
                    double acc = 0.0;
                    for (std::size_t dy = 0; dy < kh; ++dy)
                        for (std::size_t dx = 0; dx < kw; ++dx) acc += xi[(oy * kh + dy) * s.w + ox * kw + dx];
                    yo[oy * os.w + ox] = acc * inv;
                }
        }
    return y;
}

inline Tensor avgpool_backward(const AvgPool2D& pool, const Shape& in, const Tensor& dy) {
    const std::size_t kh = pool.kernel == 0 ? in.h : pool.kernel;
    const std::size_t kw = pool.kernel == 0 ? in.w : pool.kernel;
    const Shape& os = dy.shape();
    Tensor dx(dy.batch(), in);
    const double inv = 1.0 / static_cast<double>(kh * kw);
    for (std::size_t n = 0; n < dy.batch(); ++n)
        for (std::size_t c = 0; c < in.c; ++c) {
            auto g = dy.channel(n, c);
            auto d = dx.channel(n, c);
            for (std::size_t oy = 0; oy < os.h; ++oy)
                for (std::size_t ox = 0; ox < os.w; ++ox)
                    for (std::size_t y = 0; y < kh; ++y)
                        for (std::size_t xx = 0; xx < kw; ++xx)
                            d[(oy * kh + y) * in.w + ox * kw + xx] = g[oy * os.w + ox] * inv;
        }
    return dx;
}

// ---------------------------------------------------------------- ffn block

struct FFNCache {
    NormCache norm;
    Tensor normed;   // norm(x)
    Tensor hidden;   // up(norm(x)), pre-activation
    Tensor act;      // gelu(hidden)
};

inline Tensor add(const Tensor& a, const Tensor& b) {
    Tensor y = a;
    auto d = y.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += bd[i];
    return y;
}

/// Intermediate activation gelu(up(norm(x))) of the block.
inline Tensor ffn_intermediate(const FFNBlock& f, const Tensor& x, FFNCache* cache = nullptr) {
    NormCache nc;
    Tensor normed = norm_forward(f.norm, x, cache ? &nc : nullptr);
    Tensor hidden = dense_forward(f.up, normed);
    Tensor act = gelu_forward(hidden);
    if (cache) {
        cache->norm = std::move(nc);
        cache->normed = std::move(normed);
        cache->hidden = std::move(hidden);
        cache->act = act;
    }
    return act;
}

inline Tensor ffn_forward(const FFNBlock& f, const Tensor& x, FFNCache* cache = nullptr) {
    return add(x, dense_forward(f.down, ffn_intermediate(f, x, cache)));
}

inline Tensor ffn_backward(const FFNBlock& f, const FFNCache& cache, const Tensor& dy, FFNBlock& grad) {
    Tensor d_act = dense_backward(f.down, cache.act, dy, grad.down);
    Tensor d_hidden = gelu_backward(cache.hidden, d_act);
    Tensor d_normed = dense_backward(f.up, cache.normed, d_hidden, grad.up);
    Tensor dx = norm_backward(f.norm, cache.norm, d_normed, grad.norm);
    return add(dx, dy);
}

} // namespace modhifi::kernels
