#include <doctest.h>

#include <cmath>

#include "deskseg/nn.hpp"
#include "deskseg/rng.hpp"

using namespace deskseg;

namespace {

template <typename T>
TensorT<T> random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    TensorT<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(scale * rng.normal());
    return t;
}

NetworkSpec tiny_spec() { return NetworkSpec::custom({3, 3}, {8, 4, 2}, 2, 12); }

template <typename T>
double double_loss(ParamSetT<T>& params, const TensorT<T>& batch,
                   const std::vector<std::uint8_t>& labels) {
    Rng rng(0);
    const TensorT<T> probs = forward(params, batch, ForwardMode::train, rng, /*dropout_rate=*/0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        loss -= std::log(std::max(static_cast<double>(probs.at2(i, labels[i])), 1e-300));
    }
    return loss / static_cast<double>(labels.size());
}

}  // namespace

TEST_CASE("he_init statistics and determinism") {
    SUBCASE("fan-in 800 empirical variance") {
        Rng rng(123);
        const TensorD t = he_init<double>({100000}, 800, rng);
        double mean = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) mean += t[i];
        mean /= static_cast<double>(t.size());
        double var = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) var += (t[i] - mean) * (t[i] - mean);
        var /= static_cast<double>(t.size());
        CHECK(var == doctest::Approx(2.0 / 800.0).epsilon(0.05));
    }
    SUBCASE("fan-in 2 has unit standard deviation") {
        Rng rng(7);
        const TensorD t = he_init<double>({200000}, 2, rng);
        double var = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) var += t[i] * t[i];
        var /= static_cast<double>(t.size());
        CHECK(var == doctest::Approx(1.0).epsilon(0.05));
    }
    SUBCASE("same seed, same tensor") {
        Rng a(99), b(99);
        const Tensor ta = he_init<float>({64}, 10, a);
        const Tensor tb = he_init<float>({64}, 10, b);
        CHECK(ta == tb);
    }
    SUBCASE("zero fan-in rejected") {
        Rng rng(1);
        CHECK_THROWS_AS(he_init<float>({4}, 0, rng), ValueError);
    }
}

TEST_CASE("build_network shapes and initial state") {
    Rng rng(17);
    const NetworkSpec spec =
        NetworkSpec::standard({16, 16, 16, 16, 16, 16, 16, 16, 16, 16, 16, 16});
    const ParamSet p = build_network(spec, rng);
    CHECK(p.layers.size() == 15);
    CHECK(p.layers[0].weight.shape() == std::vector<std::size_t>{16, 2, 3, 3});
    CHECK(p.layers[12].weight.shape() == std::vector<std::size_t>{256, 16 * 8 * 8});
    CHECK(p.frozen_count() == 0);
    for (std::size_t l = 0; l < 14; ++l) {
        for (std::size_t i = 0; i < p.layers[l].bn_gamma.size(); ++i) {
            CHECK(p.layers[l].bn_gamma[i] == 1.0f);
            CHECK(p.layers[l].bn_beta[i] == 0.0f);
            CHECK(p.layers[l].bn_mean[i] == 0.0f);
            CHECK(p.layers[l].bn_var[i] == 1.0f);
        }
    }
    CHECK_FALSE(p.layers[14].has_bn());
}

TEST_CASE("default spec parameter count matches the closed form") {
    Rng rng(3);
    const NetworkSpec spec = NetworkSpec::standard();
    const ParamSet p = build_network(spec, rng);
    // per layer: O*fan_in weights + O biases, plus 2*O batch-norm scalars on
    // the 14 hidden layers
    std::size_t expected = 0;
    std::size_t c_in = 2;
    const std::size_t widths[15] = {16, 16, 16, 16, 32, 32, 32, 32, 64, 64, 64, 64, 256, 128, 2};
    for (std::size_t l = 0; l < 15; ++l) {
        const std::size_t o = widths[l];
        const std::size_t fan_in = l < 12 ? c_in * 9 : (l == 12 ? c_in * 8 * 8 : c_in);
        expected += o * fan_in + o;
        if (l < 14) expected += 2 * o;
        c_in = o;
    }
    CHECK(p.parameter_count() == expected);
}

TEST_CASE("forward softmax properties") {
    Rng rng(29);
    ParamSet p = build_network(tiny_spec(), rng);
    const Tensor batch = random_tensor<float>({5, 2, 12, 12}, rng);
    Rng fw(1);
    const Tensor probs = forward(p, batch, ForwardMode::infer, fw);
    CHECK(probs.shape() == std::vector<std::size_t>{5, 2});
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(probs.at2(i, 0) > 0.0f);
        CHECK(probs.at2(i, 1) > 0.0f);
        CHECK(std::abs(probs.at2(i, 0) + probs.at2(i, 1) - 1.0f) < 1e-6f);
    }
}

TEST_CASE("equal logits give a uniform posterior") {
    Rng rng(31);
    ParamSet p = build_network(tiny_spec(), rng);
    // zeroing the output layer forces both logits to its (zero) bias
    p.layers.back().weight.fill(0.0f);
    p.layers.back().bias.fill(0.0f);
    const Tensor batch = random_tensor<float>({3, 2, 12, 12}, rng);
    Rng fw(1);
    const Tensor probs = forward(p, batch, ForwardMode::infer, fw);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(probs.at2(i, 0) == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(probs.at2(i, 1) == doctest::Approx(0.5).epsilon(1e-6));
    }
}

TEST_CASE("infer mode is deterministic") {
    Rng rng(37);
    ParamSet p = build_network(tiny_spec(), rng);
    const Tensor batch = random_tensor<float>({4, 2, 12, 12}, rng);
    const Tensor a = forward_infer(p, batch);
    const Tensor b = forward_infer(p, batch);
    CHECK(a == b);
}

TEST_CASE("forward rejects the wrong spatial size") {
    Rng rng(41);
    ParamSet p = build_network(tiny_spec(), rng);
    const Tensor batch({2, 2, 10, 10});
    Rng fw(1);
    CHECK_THROWS_AS(forward(p, batch, ForwardMode::infer, fw), ShapeError);
}

TEST_CASE("batchnorm forward cases") {
    const std::size_t C = 3;
    Tensor gamma = Tensor::full({C}, 1.0f);
    Tensor beta({C});

    SUBCASE("constant batch normalizes to beta") {
        beta = Tensor({C}, {0.5f, -1.0f, 2.0f});
        Tensor mean({C}), var = Tensor::full({C}, 1.0f);
        const Tensor x = Tensor::full({4, C, 2, 2}, 3.25f);
        const Tensor y = batchnorm_forward(x, gamma, beta, mean, var, ForwardMode::train);
        for (std::size_t n = 0; n < 4; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t i = 0; i < 4; ++i) {
                    CHECK(y.at4(n, c, i / 2, i % 2) == doctest::Approx(beta[c]).epsilon(1e-5));
                }
            }
        }
    }
    SUBCASE("train mode standardizes per channel") {
        Rng rng(43);
        Tensor mean({C}), var = Tensor::full({C}, 1.0f);
        const Tensor x = random_tensor<float>({8, C, 4, 4}, rng, 2.0);
        const Tensor y = batchnorm_forward(x, gamma, beta, mean, var, ForwardMode::train);
        for (std::size_t c = 0; c < C; ++c) {
            double m = 0.0, v = 0.0;
            for (std::size_t n = 0; n < 8; ++n) {
                for (std::size_t i = 0; i < 16; ++i) m += y.at4(n, c, i / 4, i % 4);
            }
            m /= 8 * 16;
            for (std::size_t n = 0; n < 8; ++n) {
                for (std::size_t i = 0; i < 16; ++i) {
                    const double d = y.at4(n, c, i / 4, i % 4) - m;
                    v += d * d;
                }
            }
            v /= 8 * 16;
            CHECK(std::abs(m) < 1e-5);
            CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
        }
    }
    SUBCASE("infer mode with identity running stats is the identity") {
        Rng rng(47);
        Tensor mean({C}), var = Tensor::full({C}, 1.0f);
        const Tensor x = random_tensor<float>({2, C, 3, 3}, rng);
        const Tensor y = batchnorm_forward(x, gamma, beta, mean, var, ForwardMode::infer);
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-4));
        }
    }
    SUBCASE("train mode rejects a batch of one") {
        Tensor mean({C}), var = Tensor::full({C}, 1.0f);
        const Tensor x({1, C, 2, 2});
        CHECK_THROWS_AS(batchnorm_forward(x, gamma, beta, mean, var, ForwardMode::train),
                        ValueError);
    }
    SUBCASE("running statistics move toward batch statistics") {
        Tensor mean({C}), var = Tensor::full({C}, 1.0f);
        const Tensor x = Tensor::full({4, C, 2, 2}, 10.0f);
        batchnorm_forward(x, gamma, beta, mean, var, ForwardMode::train);
        for (std::size_t c = 0; c < C; ++c) {
            CHECK(mean[c] == doctest::Approx(0.1 * 10.0).epsilon(1e-5));
            CHECK(var[c] == doctest::Approx(0.9 * 1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("dropout contract") {
    Rng rng(53);
    const Tensor x = random_tensor<float>({100000}, rng);

    SUBCASE("infer mode is exact identity") {
        Rng r(1);
        CHECK(dropout(x, 0.3, ForwardMode::infer, r) == x);
    }
    SUBCASE("rate zero is exact identity in both modes") {
        Rng r(1);
        CHECK(dropout(x, 0.0, ForwardMode::train, r) == x);
        CHECK(dropout(x, 0.0, ForwardMode::infer, r) == x);
    }
    SUBCASE("dropped fraction ~ rate and survivors are rescaled") {
        Rng r(2);
        const Tensor y = dropout(x, 0.3, ForwardMode::train, r);
        std::size_t dropped = 0;
        const float inv_keep = 1.0f / 0.7f;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y[i] == 0.0f) {
                ++dropped;
            } else {
                CHECK(y[i] == doctest::Approx(x[i] * inv_keep).epsilon(1e-5));
            }
        }
        const double fraction = static_cast<double>(dropped) / static_cast<double>(y.size());
        CHECK(std::abs(fraction - 0.3) < 0.01);
    }
    SUBCASE("invalid rates rejected") {
        Rng r(1);
        CHECK_THROWS_AS(dropout(x, 1.0, ForwardMode::train, r), ValueError);
        CHECK_THROWS_AS(dropout(x, -0.1, ForwardMode::train, r), ValueError);
    }
}

TEST_CASE("backward of zero loss gradient is zero") {
    Rng rng(59);
    ParamSet p = build_network(tiny_spec(), rng);
    const Tensor batch = random_tensor<float>({4, 2, 12, 12}, rng);
    Rng fw(1);
    ForwardCacheT<float> cache;
    forward(p, batch, ForwardMode::train, fw, 0.0, &cache);
    const Tensor gz({4, 2});
    const Gradients grads = backward(p, cache, gz);
    CHECK(grads.size() == p.layers.size());
    for (const auto& lg : grads) {
        for (std::size_t i = 0; i < lg.weight.size(); ++i) CHECK(lg.weight[i] == 0.0f);
        for (std::size_t i = 0; i < lg.bias.size(); ++i) CHECK(lg.bias[i] == 0.0f);
    }
}

TEST_CASE("backward with every layer frozen yields no gradients") {
    Rng rng(61);
    ParamSet p = build_network(tiny_spec(), rng);
    for (auto& l : p.layers) l.frozen = true;
    const Tensor batch = random_tensor<float>({4, 2, 12, 12}, rng);
    Rng fw(1);
    ForwardCacheT<float> cache;
    forward(p, batch, ForwardMode::train, fw, 0.0, &cache);
    const Tensor gz = random_tensor<float>({4, 2}, rng);
    CHECK(backward(p, cache, gz).empty());
}

TEST_CASE("backward rejects an infer-mode cache") {
    Rng rng(67);
    ParamSet p = build_network(tiny_spec(), rng);
    const Tensor batch = random_tensor<float>({4, 2, 12, 12}, rng);
    Rng fw(1);
    ForwardCacheT<float> cache;
    forward(p, batch, ForwardMode::infer, fw, 0.0, &cache);
    const Tensor gz({4, 2});
    CHECK_THROWS_AS(backward(p, cache, gz), StateError);
}

TEST_CASE("end-to-end gradients match finite differences on the reduced network") {
    Rng rng(71);
    ParamSetT<double> params = build_network_t<double>(tiny_spec(), rng);
    const TensorD batch = random_tensor<double>({4, 2, 12, 12}, rng);
    const std::vector<std::uint8_t> labels = {0, 1, 1, 0};

    ForwardCacheT<double> cache;
    Rng fw(1);
    const TensorD probs = forward(params, batch, ForwardMode::train, fw, 0.0, &cache);
    TensorD gz({4, 2});
    for (std::size_t i = 0; i < 4; ++i) {
        gz.at2(i, 0) = (probs.at2(i, 0) - (labels[i] == 0 ? 1.0 : 0.0)) / 4.0;
        gz.at2(i, 1) = (probs.at2(i, 1) - (labels[i] == 1 ? 1.0 : 0.0)) / 4.0;
    }
    const GradientsT<double> grads = backward(params, cache, gz);
    CHECK(grads.size() == params.layers.size());

    const double eps = 1e-5;
    std::size_t checked = 0;
    const auto fd_check = [&](TensorT<double>& tensor, const TensorT<double>& analytic) {
        // probe a deterministic subset of each tensor to keep the test quick
        const std::size_t stride = std::max<std::size_t>(1, tensor.size() / 25);
        for (std::size_t i = 0; i < tensor.size(); i += stride) {
            const double keep = tensor[i];
            tensor[i] = keep + eps;
            const double up = double_loss<double>(params, batch, labels);
            tensor[i] = keep - eps;
            const double dn = double_loss<double>(params, batch, labels);
            tensor[i] = keep;
            const double fd = (up - dn) / (2 * eps);
            const double an = analytic[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
            CHECK(rel < 1e-3);
            ++checked;
        }
    };
    for (const auto& lg : grads) {
        auto& layer = params.layers[lg.layer];
        fd_check(layer.weight, lg.weight);
        fd_check(layer.bias, lg.bias);
        if (layer.has_bn()) {
            fd_check(layer.bn_gamma, lg.gamma);
            fd_check(layer.bn_beta, lg.beta);
        }
    }
    CHECK(checked > 100);
}

TEST_CASE("spec validation") {
    CHECK_THROWS_AS(NetworkSpec::standard({16, 16}), ValueError);
    CHECK_THROWS_AS(NetworkSpec::custom({3}, {4, 3}, 2, 12), ValueError);       // final width != 2
    CHECK_THROWS_AS(NetworkSpec::custom({3, 3, 3}, {4, 2}, 2, 6), ValueError);  // map vanishes
    const NetworkSpec s = NetworkSpec::standard();
    CHECK(s.depth() == 15);
    CHECK(s.pre_dense_side() == 8);
    CHECK(s.layer_fan_in(12) == 64 * 8 * 8);
}
