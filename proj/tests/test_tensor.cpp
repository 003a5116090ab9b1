#include <doctest.h>

#include <cmath>

#include "deskseg/rng.hpp"
#include "deskseg/tensor.hpp"

using namespace deskseg;

namespace {

// independent reference: plain triple loop, ascending k per output element
template <typename T>
TensorT<T> matmul_oracle(const TensorT<T>& a, const TensorT<T>& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            for (std::size_t j = 0; j < n; ++j) {
                c.at2(i, j) += a.at2(i, kk) * b.at2(kk, j);
            }
        }
    }
    return c;
}

template <typename T>
TensorT<T> random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    TensorT<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal());
    return t;
}

}  // namespace

TEST_CASE("matmul identity") {
    Tensor eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at2(i, i) = 1.0f;
    Rng rng(7);
    const Tensor b = random_tensor<float>({3, 4}, rng);
    const Tensor c = matmul(eye, b);
    CHECK(c == b);
}

TEST_CASE("matmul small known product") {
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor b({2, 2}, {5, 6, 7, 8});
    const Tensor c = matmul(a, b);
    CHECK(c.at2(0, 0) == 19.0f);
    CHECK(c.at2(0, 1) == 22.0f);
    CHECK(c.at2(1, 0) == 43.0f);
    CHECK(c.at2(1, 1) == 50.0f);
    CHECK(c == matmul_oracle(a, b));
}

TEST_CASE("matmul zero operand") {
    Rng rng(3);
    const Tensor z({2, 3});
    const Tensor b = random_tensor<float>({3, 4}, rng);
    const Tensor c = matmul(z, b);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == 0.0f);
}

TEST_CASE("matmul agrees with the triple-loop oracle exactly") {
    Rng rng(42);
    for (int iter = 0; iter < 50; ++iter) {
        const std::size_t m = 1 + rng.below(8);
        const std::size_t k = 1 + rng.below(8);
        const std::size_t n = 1 + rng.below(8);
        const Tensor a = random_tensor<float>({m, k}, rng);
        const Tensor b = random_tensor<float>({k, n}, rng);
        CHECK(matmul(a, b) == matmul_oracle(a, b));
    }
}

TEST_CASE("matmul rejects mismatched shapes, naming both") {
    const Tensor a({2, 3});
    const Tensor b({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("conv2d_valid 1x1 unit kernel is the identity per channel") {
    Rng rng(11);
    const Tensor x = random_tensor<float>({2, 5, 6}, rng);
    Tensor k({2, 2, 1, 1});
    k.at4(0, 0, 0, 0) = 1.0f;
    k.at4(1, 1, 0, 0) = 1.0f;
    const Tensor bias({2});
    const Tensor y = conv2d_valid(x, k, bias);
    CHECK(y == x);
}

TEST_CASE("conv2d_valid constant input with all-ones 3x3 kernel") {
    const float c = 0.37f;
    const Tensor x = Tensor::full({1, 6, 6}, c);
    const Tensor k = Tensor::full({1, 1, 3, 3}, 1.0f);
    const Tensor bias({1});
    const Tensor y = conv2d_valid(x, k, bias);
    CHECK(y.shape() == std::vector<std::size_t>{1, 4, 4});
    for (std::size_t i = 0; i < y.size(); ++i) {
        CHECK(y[i] == doctest::Approx(9.0f * c).epsilon(1e-6));
    }
}

TEST_CASE("twelve valid 3x3 convolutions shrink 32x32 to 8x8") {
    Rng rng(5);
    Tensor x = random_tensor<float>({1, 32, 32}, rng);
    const Tensor k = random_tensor<float>({1, 1, 3, 3}, rng);
    const Tensor bias({1});
    for (int i = 0; i < 12; ++i) x = conv2d_valid(x, k, bias);
    CHECK(x.shape() == std::vector<std::size_t>{1, 8, 8});
}

TEST_CASE("conv2d_valid rejects inputs smaller than the kernel") {
    const Tensor x({1, 2, 2});
    const Tensor k({1, 1, 3, 3});
    const Tensor bias({1});
    CHECK_THROWS_AS(conv2d_valid(x, k, bias), ShapeError);
}

TEST_CASE("conv2d_backward zero upstream gradient gives zero gradients") {
    Rng rng(9);
    const Tensor x = random_tensor<float>({2, 4, 4}, rng);
    const Tensor k = random_tensor<float>({3, 2, 3, 3}, rng);
    const Tensor gz({3, 2, 2});
    const auto g = conv2d_backward(x, k, gz);
    for (std::size_t i = 0; i < g.input.size(); ++i) CHECK(g.input[i] == 0.0f);
    for (std::size_t i = 0; i < g.kernels.size(); ++i) CHECK(g.kernels[i] == 0.0f);
    for (std::size_t i = 0; i < g.bias.size(); ++i) CHECK(g.bias[i] == 0.0f);
}

TEST_CASE("conv2d_backward through a 1x1 identity kernel passes the gradient") {
    Rng rng(13);
    const Tensor x = random_tensor<float>({1, 4, 4}, rng);
    Tensor k({1, 1, 1, 1});
    k[0] = 1.0f;
    const Tensor gz = random_tensor<float>({1, 4, 4}, rng);
    const auto g = conv2d_backward(x, k, gz);
    CHECK(g.input == gz);
}

namespace {

// finite-difference check of every conv2d_valid gradient at double precision
void check_conv_gradients(const TensorD& x, const TensorD& k, Rng& rng, double tol) {
    const TensorD bias = random_tensor<double>({k.dim(0)}, rng);
    const TensorD y0 = conv2d_valid(x, k, bias);
    const TensorD w = random_tensor<double>(y0.shape(), rng);  // projection weights
    const auto loss = [&](const TensorD& xi, const TensorD& ki, const TensorD& bi) {
        const TensorD y = conv2d_valid(xi, ki, bi);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
        return s;
    };
    const auto grads = conv2d_backward(x, k, w);
    const double eps = 1e-6;
    const auto check_one = [&](const TensorD& base, const TensorD& analytic, int which) {
        for (std::size_t i = 0; i < base.size(); ++i) {
            TensorD lo = base, hi = base;
            lo[i] -= eps;
            hi[i] += eps;
            const double fd =
                which == 0 ? (loss(hi, k, bias) - loss(lo, k, bias)) / (2 * eps)
                : which == 1 ? (loss(x, hi, bias) - loss(x, lo, bias)) / (2 * eps)
                             : (loss(x, k, hi) - loss(x, k, lo)) / (2 * eps);
            const double an = analytic[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            CHECK(rel < tol);
        }
    };
    check_one(x, grads.input, 0);
    check_one(k, grads.kernels, 1);
    check_one(bias, grads.bias, 2);
}

}  // namespace

TEST_CASE("conv2d_backward matches central finite differences") {
    Rng rng(21);
    SUBCASE("1x4x4 input, single 3x3 kernel") {
        const TensorD x = random_tensor<double>({1, 4, 4}, rng);
        const TensorD k = random_tensor<double>({1, 1, 3, 3}, rng);
        check_conv_gradients(x, k, rng, 1e-3);
    }
    SUBCASE("2x5x5 input, three 3x3 kernels") {
        const TensorD x = random_tensor<double>({2, 5, 5}, rng);
        const TensorD k = random_tensor<double>({3, 2, 3, 3}, rng);
        check_conv_gradients(x, k, rng, 1e-3);
    }
    SUBCASE("batched 2-sample input") {
        const TensorD x = random_tensor<double>({2, 1, 4, 5}, rng);
        const TensorD k = random_tensor<double>({2, 1, 2, 2}, rng);
        check_conv_gradients(x, k, rng, 1e-3);
    }
}

TEST_CASE("flip_horizontal definition and symmetry") {
    const Tensor row({1, 1, 3}, {1, 2, 3});
    const Tensor flipped = flip_horizontal(row);
    CHECK(flipped[0] == 3.0f);
    CHECK(flipped[1] == 2.0f);
    CHECK(flipped[2] == 1.0f);

    const Tensor sym({1, 1, 3}, {4, 9, 4});
    CHECK(flip_horizontal(sym) == sym);
}

TEST_CASE("flip_horizontal is an involution") {
    Rng rng(31);
    for (int iter = 0; iter < 20; ++iter) {
        const std::size_t c = 1 + rng.below(3);
        const std::size_t h = 1 + rng.below(6);
        const std::size_t w = 1 + rng.below(6);
        const Tensor p = random_tensor<float>({c, h, w}, rng);
        CHECK(flip_horizontal(flip_horizontal(p)) == p);
    }
}

TEST_CASE("tensor construction guards") {
    CHECK_THROWS_AS(Tensor({2, 0, 3}), ValueError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0f, 2.0f, 3.0f}), ShapeError);
    const Tensor t({2, 3});
    CHECK_THROWS_AS(t.reshaped({5}), ShapeError);
    CHECK(t.reshaped({3, 2}).shape() == std::vector<std::size_t>{3, 2});
}
