#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deskseg/errors.hpp"

namespace deskseg {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Dense row-major N-d array of T. The production path uses float; double
// instantiations back the finite-difference harnesses.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_size(shape_), T(0)) {}

    TensorT(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_size(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static TensorT zeros(std::vector<std::size_t> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<std::size_t> shape, T value) {
        TensorT t(std::move(shape));
        t.fill(value);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    T& at3(std::size_t c, std::size_t y, std::size_t x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    const T& at3(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    T& at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (const T v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    // Same data, new dimensions. Sizes must agree.
    TensorT reshaped(std::vector<std::size_t> new_shape) const {
        if (checked_size(new_shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(new_shape));
        }
        return TensorT(std::move(new_shape), data_);
    }

    friend bool operator==(const TensorT& a, const TensorT& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    static std::size_t checked_size(const std::vector<std::size_t>& shape) {
        if (shape.empty()) throw ValueError("tensor shape must have at least one dimension");
        std::size_t n = 1;
        for (const std::size_t d : shape) {
            if (d == 0) throw ValueError("tensor dimensions must be positive, got " + shape_str(shape));
            n *= d;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

// c[m,n] += a[m,k] * b[k,n], all row-major. Every output element accumulates
// strictly in ascending k with a single accumulator, so results are identical
// for any m/n split of the same dot products. The conv and dense paths both
// rely on that to produce bit-equal patch and full-image activations.
template <typename T>
void gemm_acc(const T* a, std::size_t m, std::size_t k, const T* b, std::size_t n, T* c) {
    constexpr std::size_t kColTile = 512;
    for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
        const std::size_t j1 = std::min(n, j0 + kColTile);
        const std::size_t len = j1 - j0;
        for (std::size_t i = 0; i < m; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n + j0;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T av = arow[kk];
                const T* brow = b + kk * n + j0;
                for (std::size_t j = 0; j < len; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

// c[k,n] += a^T b for a[m,k], b[m,n]; accumulation ascending in m.
template <typename T>
void gemm_atb_acc(const T* a, std::size_t m, std::size_t k, const T* b, std::size_t n, T* c) {
    constexpr std::size_t kColTile = 512;
    for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
        const std::size_t j1 = std::min(n, j0 + kColTile);
        const std::size_t len = j1 - j0;
        for (std::size_t mi = 0; mi < m; ++mi) {
            const T* arow = a + mi * k;
            const T* brow = b + mi * n + j0;
            for (std::size_t ki = 0; ki < k; ++ki) {
                const T av = arow[ki];
                T* crow = c + ki * n + j0;
                for (std::size_t j = 0; j < len; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

// c[m1,m2] += a b^T for a[m1,n], b[m2,n]; dot products over n computed with
// sixteen fixed lanes so the reduction vectorizes.
template <typename T>
void gemm_abt_acc(const T* a, std::size_t m1, const T* b, std::size_t m2, std::size_t n, T* c) {
    constexpr std::size_t kLanes = 16;
    const std::size_t blocked = n - n % kLanes;
    for (std::size_t i = 0; i < m1; ++i) {
        const T* arow = a + i * n;
        for (std::size_t j = 0; j < m2; ++j) {
            const T* brow = b + j * n;
            T lane[kLanes] = {};
            for (std::size_t t = 0; t < blocked; t += kLanes) {
                for (std::size_t u = 0; u < kLanes; ++u) lane[u] += arow[t + u] * brow[t + u];
            }
            T s = 0;
            for (std::size_t t = blocked; t < n; ++t) s += arow[t] * brow[t];
            for (std::size_t u = 0; u < kLanes; ++u) s += lane[u];
            c[i * m2 + j] += s;
        }
    }
}

// Valid-convolution im2col: row r = (c, ky, kx), column p = (y, x).
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            T* col) {
    const std::size_t ho = H - kh + 1;
    const std::size_t wo = W - kw + 1;
    const std::size_t P = ho * wo;
    std::size_t r = 0;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx, ++r) {
                T* dst = col + r * P;
                const T* src = x + (c * H + ky) * W + kx;
                for (std::size_t y = 0; y < ho; ++y) {
                    std::memcpy(dst + y * wo, src + y * W, wo * sizeof(T));
                }
            }
        }
    }
}

// Scatter-add inverse of im2col.
template <typename T>
void col2im_acc(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, T* x) {
    const std::size_t ho = H - kh + 1;
    const std::size_t wo = W - kw + 1;
    const std::size_t P = ho * wo;
    std::size_t r = 0;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx, ++r) {
                const T* src = col + r * P;
                T* dst = x + (c * H + ky) * W + kx;
                for (std::size_t y = 0; y < ho; ++y) {
                    T* drow = dst + y * W;
                    const T* srow = src + y * wo;
                    for (std::size_t xx = 0; xx < wo; ++xx) drow[xx] += srow[xx];
                }
            }
        }
    }
}

// One-sample valid convolution, y[O, ho*wo]; y rows are seeded with the bias
// so each output element is bias + sum in ascending (c,ky,kx) order.
template <typename T>
void conv2d_sample(const T* x, std::size_t C, std::size_t H, std::size_t W, const T* w,
                   std::size_t O, std::size_t kh, std::size_t kw, const T* bias, T* y,
                   std::vector<T>& col_ws) {
    const std::size_t ho = H - kh + 1;
    const std::size_t wo = W - kw + 1;
    const std::size_t P = ho * wo;
    const std::size_t K = C * kh * kw;
    col_ws.resize(K * P);
    im2col(x, C, H, W, kh, kw, col_ws.data());
    for (std::size_t o = 0; o < O; ++o) {
        const T b = bias ? bias[o] : T(0);
        std::fill(y + o * P, y + (o + 1) * P, b);
    }
    gemm_acc(w, O, K, col_ws.data(), P, y);
}

}  // namespace detail

// a[m,k] * b[k,n] -> [m,n]
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    TensorT<T> c({a.dim(0), b.dim(1)});
    detail::gemm_acc(a.data(), a.dim(0), a.dim(1), b.data(), b.dim(1), c.data());
    return c;
}

// Valid cross-correlation (no kernel flip). input [C,H,W] or [N,C,H,W];
// kernels [O,C,kh,kw]; bias [O]. Output spatial size (H-kh+1, W-kw+1).
template <typename T>
TensorT<T> conv2d_valid(const TensorT<T>& input, const TensorT<T>& kernels, const TensorT<T>& bias) {
    if (kernels.rank() != 4) {
        throw ShapeError("conv2d_valid kernels must be rank 4, got " + shape_str(kernels.shape()));
    }
    const bool batched = input.rank() == 4;
    if (!batched && input.rank() != 3) {
        throw ShapeError("conv2d_valid input must be rank 3 or 4, got " + shape_str(input.shape()));
    }
    const std::size_t N = batched ? input.dim(0) : 1;
    const std::size_t C = input.dim(batched ? 1 : 0);
    const std::size_t H = input.dim(batched ? 2 : 1);
    const std::size_t W = input.dim(batched ? 3 : 2);
    const std::size_t O = kernels.dim(0);
    const std::size_t kh = kernels.dim(2);
    const std::size_t kw = kernels.dim(3);
    if (kernels.dim(1) != C) {
        throw ShapeError("conv2d_valid channel mismatch: input " + shape_str(input.shape()) +
                         " vs kernels " + shape_str(kernels.shape()));
    }
    if (H < kh || W < kw) {
        throw ShapeError("conv2d_valid input " + shape_str(input.shape()) +
                         " smaller than kernel " + shape_str(kernels.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != O) {
        throw ShapeError("conv2d_valid bias must be [O]=" + std::to_string(O) + ", got " +
                         shape_str(bias.shape()));
    }
    const std::size_t ho = H - kh + 1;
    const std::size_t wo = W - kw + 1;
    TensorT<T> out(batched ? std::vector<std::size_t>{N, O, ho, wo}
                           : std::vector<std::size_t>{O, ho, wo});
    std::vector<T> ws;
    const std::size_t in_stride = C * H * W;
    const std::size_t out_stride = O * ho * wo;
    for (std::size_t n = 0; n < N; ++n) {
        detail::conv2d_sample(input.data() + n * in_stride, C, H, W, kernels.data(), O, kh, kw,
                              bias.data(), out.data() + n * out_stride, ws);
    }
    return out;
}

template <typename T>
struct Conv2dGradsT {
    TensorT<T> input;
    TensorT<T> kernels;
    TensorT<T> bias;
};

// Exact gradients of conv2d_valid with respect to input, kernels and bias.
// The forward inputs act as the cache; grad_out must match the forward output.
template <typename T>
Conv2dGradsT<T> conv2d_backward(const TensorT<T>& input, const TensorT<T>& kernels,
                                const TensorT<T>& grad_out) {
    const bool batched = input.rank() == 4;
    if (!batched && input.rank() != 3) {
        throw ShapeError("conv2d_backward input must be rank 3 or 4, got " + shape_str(input.shape()));
    }
    const std::size_t N = batched ? input.dim(0) : 1;
    const std::size_t C = input.dim(batched ? 1 : 0);
    const std::size_t H = input.dim(batched ? 2 : 1);
    const std::size_t W = input.dim(batched ? 3 : 2);
    const std::size_t O = kernels.dim(0);
    const std::size_t kh = kernels.dim(2);
    const std::size_t kw = kernels.dim(3);
    const std::size_t ho = H - kh + 1;
    const std::size_t wo = W - kw + 1;
    const std::vector<std::size_t> expect =
        batched ? std::vector<std::size_t>{N, O, ho, wo} : std::vector<std::size_t>{O, ho, wo};
    if (grad_out.shape() != expect) {
        throw ShapeError("conv2d_backward grad_out " + shape_str(grad_out.shape()) +
                         " does not match forward output " + shape_str(expect));
    }
    Conv2dGradsT<T> g{TensorT<T>(input.shape()), TensorT<T>(kernels.shape()),
                      TensorT<T>({O})};
    const std::size_t P = ho * wo;
    const std::size_t K = C * kh * kw;
    std::vector<T> col(K * P);
    std::vector<T> gcol(K * P);
    const std::size_t in_stride = C * H * W;
    const std::size_t out_stride = O * P;
    for (std::size_t n = 0; n < N; ++n) {
        const T* x = input.data() + n * in_stride;
        const T* go = grad_out.data() + n * out_stride;
        // bias: sum of grad_out per output channel
        for (std::size_t o = 0; o < O; ++o) {
            T s = 0;
            const T* row = go + o * P;
            for (std::size_t p = 0; p < P; ++p) s += row[p];
            g.bias[o] += s;
        }
        detail::im2col(x, C, H, W, kh, kw, col.data());
        detail::gemm_abt_acc(go, O, col.data(), K, P, g.kernels.data());
        std::fill(gcol.begin(), gcol.end(), T(0));
        detail::gemm_atb_acc(kernels.data(), O, K, go, P, gcol.data());
        detail::col2im_acc(gcol.data(), C, H, W, kh, kw, g.input.data() + n * in_stride);
    }
    return g;
}

// Reverse column order in every channel. Applying twice is the identity.
template <typename T>
TensorT<T> flip_horizontal(const TensorT<T>& patch) {
    if (patch.rank() != 3 && patch.rank() != 4) {
        throw ShapeError("flip_horizontal expects rank 3 or 4, got " + shape_str(patch.shape()));
    }
    TensorT<T> out(patch.shape());
    const std::size_t w = patch.dim(patch.rank() - 1);
    const std::size_t rows = patch.size() / w;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = patch.data() + r * w;
        T* dst = out.data() + r * w;
        for (std::size_t x = 0; x < w; ++x) dst[x] = src[w - 1 - x];
    }
    return out;
}

}  // namespace deskseg
