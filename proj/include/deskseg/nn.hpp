#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "deskseg/rng.hpp"
#include "deskseg/tensor.hpp"

namespace deskseg {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.9;

// Layer stack description: a run of 3x3 valid convolutions followed by dense
// layers, the first of which consumes the final feature map whole. The
// published layout is 12 convolutions plus dense 256/128/2 on 32x32 two-channel
// patches; reduced configurations are allowed for test harnesses.
struct NetworkSpec {
    std::vector<std::size_t> conv_widths;
    std::vector<std::size_t> dense_widths;
    std::size_t input_channels = 2;
    std::size_t patch_side = 32;

    static NetworkSpec standard() {
        return standard({16, 16, 16, 16, 32, 32, 32, 32, 64, 64, 64, 64});
    }

    static NetworkSpec standard(std::vector<std::size_t> conv_widths) {
        NetworkSpec s;
        s.conv_widths = std::move(conv_widths);
        s.dense_widths = {256, 128, 2};
        s.input_channels = 2;
        s.patch_side = 32;
        if (s.conv_widths.size() != 12) {
            throw ValueError("standard network needs exactly 12 conv widths, got " +
                             std::to_string(s.conv_widths.size()));
        }
        s.validate();
        return s;
    }

    static NetworkSpec custom(std::vector<std::size_t> conv_widths,
                              std::vector<std::size_t> dense_widths, std::size_t input_channels,
                              std::size_t patch_side) {
        NetworkSpec s;
        s.conv_widths = std::move(conv_widths);
        s.dense_widths = std::move(dense_widths);
        s.input_channels = input_channels;
        s.patch_side = patch_side;
        s.validate();
        return s;
    }

    std::size_t conv_count() const { return conv_widths.size(); }
    std::size_t depth() const { return conv_widths.size() + dense_widths.size(); }
    std::size_t n_classes() const { return dense_widths.back(); }

    // side of the feature map the first dense layer consumes
    std::size_t pre_dense_side() const { return patch_side - 2 * conv_count(); }

    bool is_dense(std::size_t layer) const { return layer >= conv_count(); }

    std::size_t layer_width(std::size_t layer) const {
        return layer < conv_count() ? conv_widths[layer] : dense_widths[layer - conv_count()];
    }

    std::size_t layer_in_channels(std::size_t layer) const {
        return layer == 0 ? input_channels : layer_width(layer - 1);
    }

    // spatial kernel side: 3 for convolutions, the full map for the first
    // dense layer, 1 for the remaining dense layers
    std::size_t kernel_side(std::size_t layer) const {
        if (layer < conv_count()) return 3;
        if (layer == conv_count()) return pre_dense_side();
        return 1;
    }

    std::size_t layer_fan_in(std::size_t layer) const {
        const std::size_t k = kernel_side(layer);
        return layer_in_channels(layer) * k * k;
    }

    std::vector<std::size_t> weight_shape(std::size_t layer) const {
        if (is_dense(layer)) return {layer_width(layer), layer_fan_in(layer)};
        return {layer_width(layer), layer_in_channels(layer), 3, 3};
    }

    void validate() const {
        if (conv_widths.empty()) throw ValueError("network needs at least one conv layer");
        if (dense_widths.empty()) throw ValueError("network needs at least one dense layer");
        if (dense_widths.back() != 2) {
            throw ValueError("final dense layer must have 2 units, got " +
                             std::to_string(dense_widths.back()));
        }
        if (input_channels == 0) throw ValueError("input_channels must be >= 1");
        for (const std::size_t w : conv_widths) {
            if (w == 0) throw ValueError("conv widths must be >= 1");
        }
        for (const std::size_t w : dense_widths) {
            if (w == 0) throw ValueError("dense widths must be >= 1");
        }
        if (patch_side <= 2 * conv_widths.size()) {
            throw ValueError("patch side " + std::to_string(patch_side) +
                             " leaves no feature map after " + std::to_string(conv_widths.size()) +
                             " valid 3x3 convolutions");
        }
    }

    bool operator==(const NetworkSpec&) const = default;
};

template <typename T>
struct LayerParamsT {
    TensorT<T> weight;  // conv: [O,C,3,3]; dense: [O,In]
    TensorT<T> bias;    // [O]
    TensorT<T> bn_gamma, bn_beta;  // [O]; empty on the output layer
    TensorT<T> bn_mean, bn_var;    // running statistics
    bool frozen = false;

    bool has_bn() const { return !bn_gamma.empty(); }
};

template <typename T>
struct ParamSetT {
    NetworkSpec spec;
    std::vector<LayerParamsT<T>> layers;
    std::uint64_t step_count = 0;

    std::size_t frozen_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.frozen ? 1 : 0;
        return n;
    }

    // trainable scalars: weights, biases, BN scale/shift (running stats are
    // statistics, not parameters)
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) {
            n += l.weight.size() + l.bias.size() + l.bn_gamma.size() + l.bn_beta.size();
        }
        return n;
    }
};

using ParamSet = ParamSetT<float>;

enum class ForwardMode { train, infer };

// He draw: i.i.d. N(0, sqrt(2/m)) with m the fan-in.
template <typename T>
TensorT<T> he_init(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    if (fan_in == 0) throw ValueError("he_init fan-in must be >= 1");
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    TensorT<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(stddev * rng.normal());
    return t;
}

// Fresh parameter set: He weights, zero biases, identity batch norm, nothing
// frozen.
template <typename T>
ParamSetT<T> build_network_t(const NetworkSpec& spec, Rng& rng) {
    spec.validate();
    ParamSetT<T> p;
    p.spec = spec;
    const std::size_t d = spec.depth();
    p.layers.resize(d);
    for (std::size_t l = 0; l < d; ++l) {
        auto& layer = p.layers[l];
        const std::size_t width = spec.layer_width(l);
        layer.weight = he_init<T>(spec.weight_shape(l), spec.layer_fan_in(l), rng);
        layer.bias = TensorT<T>({width});
        if (l + 1 < d) {
            layer.bn_gamma = TensorT<T>::full({width}, T(1));
            layer.bn_beta = TensorT<T>({width});
            layer.bn_mean = TensorT<T>({width});
            layer.bn_var = TensorT<T>::full({width}, T(1));
        }
    }
    return p;
}

inline ParamSet build_network(const NetworkSpec& spec, Rng& rng) {
    return build_network_t<float>(spec, rng);
}

// Throws CompatibilityError listing every layer whose tensors disagree with
// the spec.
template <typename T>
void validate_params(const ParamSetT<T>& params) {
    params.spec.validate();
    std::string bad;
    if (params.layers.size() != params.spec.depth()) {
        throw CompatibilityError("parameter set has " + std::to_string(params.layers.size()) +
                                 " layers, spec expects " + std::to_string(params.spec.depth()));
    }
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& layer = params.layers[l];
        const std::size_t width = params.spec.layer_width(l);
        const bool expect_bn = l + 1 < params.spec.depth();
        bool ok = layer.weight.size() ==
                      width * params.spec.layer_fan_in(l) &&
                  layer.bias.shape() == std::vector<std::size_t>{width};
        if (expect_bn) {
            ok = ok && layer.bn_gamma.shape() == std::vector<std::size_t>{width} &&
                 layer.bn_beta.shape() == std::vector<std::size_t>{width} &&
                 layer.bn_mean.shape() == std::vector<std::size_t>{width} &&
                 layer.bn_var.shape() == std::vector<std::size_t>{width};
        } else {
            ok = ok && !layer.has_bn();
        }
        if (!ok) bad += (bad.empty() ? "" : ", ") + std::to_string(l + 1);
    }
    if (!bad.empty()) throw CompatibilityError("layers inconsistent with spec: " + bad);
}

template <typename T>
struct BnCacheT {
    TensorT<T> xhat;
    std::vector<T> invstd;
    bool batch_stats = false;
};

// Batch normalization over the channel axis of [N,C,H,W]. Train mode uses
// batch statistics and folds them into the running estimates; infer mode uses
// the running estimates unchanged.
template <typename T>
TensorT<T> batchnorm_forward(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                             TensorT<T>& running_mean, TensorT<T>& running_var, ForwardMode mode,
                             BnCacheT<T>* cache = nullptr, double momentum = kBnMomentum,
                             double eps = kBnEps) {
    if (x.rank() != 4) throw ShapeError("batchnorm expects [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.size() != C || beta.size() != C || running_mean.size() != C ||
        running_var.size() != C) {
        throw ShapeError("batchnorm parameter length must equal channel count " +
                         std::to_string(C));
    }
    const std::size_t plane = H * W;
    const std::size_t sample = C * plane;
    TensorT<T> y(x.shape());
    if (mode == ForwardMode::train) {
        if (N < 2) throw ValueError("batchnorm train mode needs batch size >= 2, got 1");
        const double m = static_cast<double>(N * plane);
        std::vector<double> mean(C, 0.0), var(C, 0.0);
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                const T* px = x.data() + n * sample + c * plane;
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += px[i];
                mean[c] += s;
            }
        }
        for (std::size_t c = 0; c < C; ++c) mean[c] /= m;
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                const T* px = x.data() + n * sample + c * plane;
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = px[i] - mean[c];
                    s += d * d;
                }
                var[c] += s;
            }
        }
        for (std::size_t c = 0; c < C; ++c) var[c] /= m;
        for (std::size_t c = 0; c < C; ++c) {
            running_mean[c] = static_cast<T>(momentum * running_mean[c] + (1.0 - momentum) * mean[c]);
            running_var[c] = static_cast<T>(momentum * running_var[c] + (1.0 - momentum) * var[c]);
        }
        std::vector<T> invstd(C);
        for (std::size_t c = 0; c < C; ++c) {
            invstd[c] = static_cast<T>(1.0 / std::sqrt(var[c] + eps));
        }
        if (cache) {
            cache->xhat = TensorT<T>(x.shape());
            cache->invstd = invstd;
            cache->batch_stats = true;
        }
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                const T mu = static_cast<T>(mean[c]);
                const T is = invstd[c];
                const T g = gamma[c];
                const T b = beta[c];
                const std::size_t base = n * sample + c * plane;
                const T* px = x.data() + base;
                T* py = y.data() + base;
                T* ph = cache ? cache->xhat.data() + base : nullptr;
                for (std::size_t i = 0; i < plane; ++i) {
                    const T h = (px[i] - mu) * is;
                    if (ph) ph[i] = h;
                    py[i] = h * g + b;
                }
            }
        }
    } else {
        std::vector<T> invstd(C);
        for (std::size_t c = 0; c < C; ++c) {
            invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
        }
        if (cache) {
            cache->xhat = TensorT<T>();
            cache->invstd = invstd;
            cache->batch_stats = false;
        }
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                const T mu = running_mean[c];
                const T is = invstd[c];
                const T g = gamma[c];
                const T b = beta[c];
                const std::size_t base = n * sample + c * plane;
                const T* px = x.data() + base;
                T* py = y.data() + base;
                for (std::size_t i = 0; i < plane; ++i) py[i] = (px[i] - mu) * is * g + b;
            }
        }
    }
    return y;
}

template <typename T>
struct BnGradsT {
    TensorT<T> input;
    TensorT<T> gamma;
    TensorT<T> beta;
};

template <typename T>
BnGradsT<T> batchnorm_backward(const TensorT<T>& grad_out, const BnCacheT<T>& cache,
                               const TensorT<T>& gamma, bool want_input, bool want_params) {
    const std::size_t N = grad_out.dim(0), C = grad_out.dim(1);
    const std::size_t plane = grad_out.dim(2) * grad_out.dim(3);
    const std::size_t sample = C * plane;
    BnGradsT<T> g;
    if (want_params) {
        g.gamma = TensorT<T>({C});
        g.beta = TensorT<T>({C});
    }
    if (cache.batch_stats) {
        // dx = gamma * invstd * (dy - mean(dy) - xhat * mean(dy * xhat))
        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t base = n * sample + c * plane;
                const T* pg = grad_out.data() + base;
                const T* ph = cache.xhat.data() + base;
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    s1 += pg[i];
                    s2 += pg[i] * ph[i];
                }
                sum_dy[c] += s1;
                sum_dy_xhat[c] += s2;
            }
        }
        if (want_params) {
            for (std::size_t c = 0; c < C; ++c) {
                g.beta[c] = static_cast<T>(sum_dy[c]);
                g.gamma[c] = static_cast<T>(sum_dy_xhat[c]);
            }
        }
        if (want_input) {
            g.input = TensorT<T>(grad_out.shape());
            const double m = static_cast<double>(N * plane);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = n * sample + c * plane;
                    const T* pg = grad_out.data() + base;
                    const T* ph = cache.xhat.data() + base;
                    T* pi = g.input.data() + base;
                    const double coef = static_cast<double>(gamma[c]) * cache.invstd[c] / m;
                    const double s1 = sum_dy[c];
                    const double s2 = sum_dy_xhat[c];
                    for (std::size_t i = 0; i < plane; ++i) {
                        pi[i] = static_cast<T>(coef * (m * pg[i] - s1 - ph[i] * s2));
                    }
                }
            }
        }
    } else {
        // running statistics were used: the transform is a fixed affine map
        if (want_params) {
            throw StateError("batchnorm_backward: parameter gradients need batch statistics");
        }
        if (want_input) {
            g.input = TensorT<T>(grad_out.shape());
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = n * sample + c * plane;
                    const T* pg = grad_out.data() + base;
                    T* pi = g.input.data() + base;
                    const T coef = gamma[c] * cache.invstd[c];
                    for (std::size_t i = 0; i < plane; ++i) pi[i] = pg[i] * coef;
                }
            }
        }
    }
    return g;
}

// Inverted dropout: train mode zeroes units with probability `rate` and scales
// survivors by 1/(1-rate); infer mode is the identity.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, ForwardMode mode, Rng& rng,
                   std::vector<std::uint8_t>* mask_out = nullptr) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ValueError("dropout rate must be in [0,1), got " + std::to_string(rate));
    }
    if (mask_out) mask_out->clear();
    if (mode == ForwardMode::infer || rate == 0.0) return x;
    TensorT<T> y(x.shape());
    const T inv_keep = static_cast<T>(1.0 / (1.0 - rate));
    if (mask_out) mask_out->resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool keep = rng.uniform() >= rate;
        if (mask_out) (*mask_out)[i] = keep ? 1 : 0;
        y[i] = keep ? x[i] * inv_keep : T(0);
    }
    return y;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

// Softmax across the channel axis of [N,C,H,W].
template <typename T>
TensorT<T> softmax_channels(const TensorT<T>& logits) {
    const std::size_t N = logits.dim(0), C = logits.dim(1);
    const std::size_t plane = logits.dim(2) * logits.dim(3);
    TensorT<T> p(logits.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t base = n * C * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            T mx = logits[base + i];
            for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits[base + c * plane + i]);
            T denom = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const T e = std::exp(logits[base + c * plane + i] - mx);
                p[base + c * plane + i] = e;
                denom += e;
            }
            for (std::size_t c = 0; c < C; ++c) p[base + c * plane + i] /= denom;
        }
    }
    return p;
}

template <typename T>
struct LayerCacheT {
    TensorT<T> input;    // what the layer consumed
    BnCacheT<T> bn;
    TensorT<T> relu_out;  // stored only where dropout rewrites the activation
    std::vector<std::uint8_t> dropout_mask;
};

template <typename T>
struct ForwardCacheT {
    std::vector<LayerCacheT<T>> layers;
    TensorT<T> logits;  // [N,classes,H',W']
    TensorT<T> probs;
    ForwardMode mode = ForwardMode::infer;
    double dropout_rate = 0.0;
};

namespace detail {

// Shared conv/dense engine. Accepts any spatial extent >= patch_side, which is
// exactly what the dense-to-convolutional full-image pass relies on.
template <typename T>
TensorT<T> forward_impl(ParamSetT<T>& params, const TensorT<T>& input, ForwardMode mode, Rng& rng,
                        double dropout_rate, ForwardCacheT<T>* cache) {
    const NetworkSpec& spec = params.spec;
    if (input.rank() != 4) {
        throw ShapeError("forward expects [N,C,H,W], got " + shape_str(input.shape()));
    }
    if (input.dim(1) != spec.input_channels) {
        throw ShapeError("forward expects " + std::to_string(spec.input_channels) +
                         " input channels, got " + std::to_string(input.dim(1)));
    }
    if (input.dim(2) < spec.patch_side || input.dim(3) < spec.patch_side) {
        throw ShapeError("forward input " + shape_str(input.shape()) +
                         " smaller than the receptive field " + std::to_string(spec.patch_side));
    }
    const std::size_t N = input.dim(0);
    const std::size_t d = spec.depth();
    if (cache) {
        cache->layers.assign(d, {});
        cache->mode = mode;
        cache->dropout_rate = dropout_rate;
    }
    std::vector<T> ws;
    TensorT<T> x = input;
    for (std::size_t l = 0; l < d; ++l) {
        auto& layer = params.layers[l];
        const std::size_t C = spec.layer_in_channels(l);
        const std::size_t O = spec.layer_width(l);
        const std::size_t k = spec.kernel_side(l);
        const std::size_t H = x.dim(2), W = x.dim(3);
        const std::size_t ho = H - k + 1, wo = W - k + 1;
        TensorT<T> z({N, O, ho, wo});
        if (ho == 1 && wo == 1) {
            // kernel covers the map: one batched GEMM on the already-flat
            // inputs. Per-element accumulation stays in ascending (c,ky,kx)
            // order, so this is bit-equal to the sliding conv path.
            const std::size_t K = C * H * W;
            ws.resize(K * O);
            for (std::size_t kk = 0; kk < K; ++kk) {
                for (std::size_t o = 0; o < O; ++o) ws[kk * O + o] = layer.weight[o * K + kk];
            }
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t o = 0; o < O; ++o) z[n * O + o] = layer.bias[o];
            }
            gemm_acc(x.data(), N, K, ws.data(), O, z.data());
        } else {
            for (std::size_t n = 0; n < N; ++n) {
                conv2d_sample(x.data() + n * C * H * W, C, H, W, layer.weight.data(), O, k, k,
                              layer.bias.data(), z.data() + n * O * ho * wo, ws);
            }
        }
        if (cache) cache->layers[l].input = std::move(x);
        if (l + 1 == d) {
            // output layer: no batch norm, no activation; softmax follows
            if (cache) cache->logits = z;
            TensorT<T> probs = softmax_channels(z);
            if (cache) cache->probs = probs;
            return probs;
        }
        // frozen layers keep their running statistics even while training
        const ForwardMode bn_mode =
            (mode == ForwardMode::train && !layer.frozen) ? ForwardMode::train : ForwardMode::infer;
        TensorT<T> y = batchnorm_forward(z, layer.bn_gamma, layer.bn_beta, layer.bn_mean,
                                         layer.bn_var, bn_mode,
                                         cache ? &cache->layers[l].bn : nullptr);
        TensorT<T> a = relu(y);
        const bool dense_hidden = spec.is_dense(l);
        if (mode == ForwardMode::train && dense_hidden && dropout_rate > 0.0) {
            TensorT<T> o = dropout(a, dropout_rate, mode, rng,
                                   cache ? &cache->layers[l].dropout_mask : nullptr);
            if (cache) cache->layers[l].relu_out = std::move(a);
            x = std::move(o);
        } else {
            x = std::move(a);
        }
    }
    throw StateError("forward fell through the layer stack");  // unreachable
}

}  // namespace detail

// Full-resolution pass: input [N,C,H,W] with H,W >= patch_side, probabilities
// [N,classes,H-patch_side+1,W-patch_side+1].
template <typename T>
TensorT<T> forward_map(ParamSetT<T>& params, const TensorT<T>& input, ForwardMode mode, Rng& rng,
                       double dropout_rate = 0.0, ForwardCacheT<T>* cache = nullptr) {
    return detail::forward_impl(params, input, mode, rng, dropout_rate, cache);
}

// Patch-classifier surface: batch [N,C,side,side] (exact), probabilities [N,classes].
template <typename T>
TensorT<T> forward(ParamSetT<T>& params, const TensorT<T>& batch, ForwardMode mode, Rng& rng,
                   double dropout_rate = 0.3, ForwardCacheT<T>* cache = nullptr) {
    if (batch.rank() != 4 || batch.dim(2) != params.spec.patch_side ||
        batch.dim(3) != params.spec.patch_side) {
        throw ShapeError("patch forward expects [N," + std::to_string(params.spec.input_channels) +
                         "," + std::to_string(params.spec.patch_side) + "," +
                         std::to_string(params.spec.patch_side) + "], got " +
                         shape_str(batch.shape()));
    }
    TensorT<T> p4 = detail::forward_impl(params, batch, mode, rng, dropout_rate, cache);
    return p4.reshaped({batch.dim(0), params.spec.n_classes()});
}

// Inference without touching the parameter set.
template <typename T>
TensorT<T> forward_infer(const ParamSetT<T>& params, const TensorT<T>& batch) {
    Rng rng(0);
    auto& mutable_params = const_cast<ParamSetT<T>&>(params);  // infer mode never writes
    return forward(mutable_params, batch, ForwardMode::infer, rng, 0.0,
                   static_cast<ForwardCacheT<T>*>(nullptr));
}

template <typename T>
struct LayerGradsT {
    std::size_t layer = 0;
    TensorT<T> weight;
    TensorT<T> bias;
    TensorT<T> gamma;  // empty on the output layer
    TensorT<T> beta;
};

template <typename T>
using GradientsT = std::vector<LayerGradsT<T>>;

using Gradients = GradientsT<float>;

// Backpropagation through the cached forward pass. `grad_logits` is the loss
// gradient with respect to the pre-softmax logits ([N,classes] for patch
// batches). Frozen layers contribute no entries, and propagation stops below
// the shallowest trainable layer.
template <typename T>
GradientsT<T> backward(const ParamSetT<T>& params, const ForwardCacheT<T>& cache,
                       const TensorT<T>& grad_logits) {
    if (cache.mode != ForwardMode::train) {
        throw StateError("backward needs a cache produced by a train-mode forward");
    }
    const NetworkSpec& spec = params.spec;
    const std::size_t d = spec.depth();
    if (cache.layers.size() != d || cache.logits.empty()) {
        throw StateError("forward cache does not match the parameter set");
    }
    std::size_t lowest = d;
    for (std::size_t l = 0; l < d; ++l) {
        if (!params.layers[l].frozen) {
            lowest = l;
            break;
        }
    }
    GradientsT<T> grads;
    if (lowest == d) return grads;  // everything frozen
    if (grad_logits.size() != cache.logits.size()) {
        throw ShapeError("grad_logits size " + std::to_string(grad_logits.size()) +
                         " does not match logits " + shape_str(cache.logits.shape()));
    }
    grads.reserve(d - lowest);
    TensorT<T> g = grad_logits.reshaped(cache.logits.shape());
    std::vector<T> col, gcol;
    for (std::size_t l = d; l-- > lowest;) {
        const auto& layer = params.layers[l];
        const auto& lc = cache.layers[l];
        const bool want_params = !layer.frozen;
        const bool want_input = l > lowest;
        if (l + 1 < d) {
            // undo dropout, ReLU, batch norm in reverse order
            if (!lc.dropout_mask.empty()) {
                const T inv_keep = static_cast<T>(1.0 / (1.0 - cache.dropout_rate));
                TensorT<T> gd(g.shape());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gd[i] = lc.dropout_mask[i] ? g[i] * inv_keep : T(0);
                }
                g = std::move(gd);
            }
            const TensorT<T>& act = !lc.relu_out.empty() ? lc.relu_out : cache.layers[l + 1].input;
            TensorT<T> gr(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gr[i] = act[i] > T(0) ? g[i] : T(0);
            BnGradsT<T> bn = batchnorm_backward(gr, lc.bn, layer.bn_gamma,
                                                /*want_input=*/true, want_params);
            g = std::move(bn.input);
            if (want_params) {
                LayerGradsT<T> lg;
                lg.layer = l;
                lg.gamma = std::move(bn.gamma);
                lg.beta = std::move(bn.beta);
                grads.push_back(std::move(lg));
            }
        } else if (want_params) {
            grads.push_back(LayerGradsT<T>{l, {}, {}, {}, {}});
        }
        // conv/dense linear part
        const std::size_t C = spec.layer_in_channels(l);
        const std::size_t O = spec.layer_width(l);
        const std::size_t k = spec.kernel_side(l);
        const TensorT<T>& x = lc.input;
        const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
        const std::size_t ho = H - k + 1, wo = W - k + 1;
        const std::size_t P = ho * wo;
        const std::size_t K = C * k * k;
        LayerGradsT<T>* lg = want_params ? &grads.back() : nullptr;
        if (lg) {
            lg->weight = TensorT<T>(layer.weight.shape());
            lg->bias = TensorT<T>({O});
        }
        TensorT<T> gx;
        if (want_input) gx = TensorT<T>(x.shape());
        if (P == 1) {
            // whole-map kernel: batched GEMMs on the flat layout
            if (lg) {
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t o = 0; o < O; ++o) lg->bias[o] += g[n * O + o];
                }
                detail::gemm_atb_acc(g.data(), N, O, x.data(), K, lg->weight.data());
            }
            if (want_input) {
                detail::gemm_acc(g.data(), N, O, layer.weight.data(), K, gx.data());
            }
        } else {
            col.resize(K * P);
            gcol.resize(K * P);
            for (std::size_t n = 0; n < N; ++n) {
                const T* xn = x.data() + n * C * H * W;
                const T* gn = g.data() + n * O * P;
                if (lg) {
                    for (std::size_t o = 0; o < O; ++o) {
                        T s = 0;
                        const T* row = gn + o * P;
                        for (std::size_t p = 0; p < P; ++p) s += row[p];
                        lg->bias[o] += s;
                    }
                    detail::im2col(xn, C, H, W, k, k, col.data());
                    detail::gemm_abt_acc(gn, O, col.data(), K, P, lg->weight.data());
                }
                if (want_input) {
                    std::fill(gcol.begin(), gcol.end(), T(0));
                    detail::gemm_atb_acc(layer.weight.data(), O, K, gn, P, gcol.data());
                    detail::col2im_acc(gcol.data(), C, H, W, k, k, gx.data() + n * C * H * W);
                }
            }
        }
        if (want_input) g = std::move(gx);
    }
    // deepest-first accumulation above; report shallowest-first
    std::reverse(grads.begin(), grads.end());
    return grads;
}

}  // namespace deskseg
