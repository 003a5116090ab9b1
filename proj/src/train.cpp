#include "deskseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "deskseg/errors.hpp"
#include "deskseg/metrics.hpp"

namespace deskseg {

void TrainConfig::validate() const {
    if (!(lr0 > 0.0f)) throw ValueError("lr0 must be > 0");
    if (!(lr_decay > 0.0f && lr_decay <= 1.0f)) throw ValueError("lr_decay must be in (0,1]");
    if (batch_size < 2) throw ValueError("batch_size must be >= 2");
    if (!(dropout >= 0.0f && dropout < 1.0f)) throw ValueError("dropout must be in [0,1)");
    if (l2_lambda < 0.0f) throw ValueError("l2_lambda must be >= 0");
    if (patience < 1) throw ValueError("patience must be >= 1");
}

AdamState AdamState::for_params(const ParamSet& params) {
    AdamState s;
    s.layers.resize(params.layers.size());
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& layer = params.layers[l];
        auto& slots = s.layers[l];
        slots.weight = {Tensor(layer.weight.shape()), Tensor(layer.weight.shape())};
        slots.bias = {Tensor(layer.bias.shape()), Tensor(layer.bias.shape())};
        if (layer.has_bn()) {
            slots.gamma = {Tensor(layer.bn_gamma.shape()), Tensor(layer.bn_gamma.shape())};
            slots.beta = {Tensor(layer.bn_beta.shape()), Tensor(layer.bn_beta.shape())};
        }
    }
    return s;
}

LossGrad cross_entropy_loss(const Tensor& probs, const std::vector<std::uint8_t>& labels) {
    if (probs.rank() != 2 || probs.dim(1) != 2) {
        throw ShapeError("cross_entropy_loss expects probs [N,2], got " + shape_str(probs.shape()));
    }
    const std::size_t n = probs.dim(0);
    if (labels.size() != n) throw ShapeError("cross_entropy_loss needs one label per row");
    LossGrad out;
    out.grad_logits = Tensor({n, 2});
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t y = labels[i];
        if (y > 1) throw DataError("cross_entropy_loss label outside {0,1}");
        const double p_true = std::max(static_cast<double>(probs.at2(i, y)), 1e-12);
        loss -= std::log(p_true);
        out.grad_logits.at2(i, 0) = static_cast<float>((probs.at2(i, 0) - (y == 0 ? 1.0 : 0.0)) * inv_n);
        out.grad_logits.at2(i, 1) = static_cast<float>((probs.at2(i, 1) - (y == 1 ? 1.0 : 0.0)) * inv_n);
    }
    out.loss = loss * inv_n;
    return out;
}

namespace {

void adam_update_tensor(Tensor& param, const Tensor& grad, AdamState::Slot& slot,
                        const AdamState& s, float lr, float l2_lambda, double bc1, double bc2) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        const float g = grad[i] + l2_lambda * param[i];
        slot.m[i] = s.beta1 * slot.m[i] + (1.0f - s.beta1) * g;
        slot.v[i] = s.beta2 * slot.v[i] + (1.0f - s.beta2) * g * g;
        const double m_hat = slot.m[i] / bc1;
        const double v_hat = slot.v[i] / bc2;
        param[i] -= static_cast<float>(lr * m_hat / (std::sqrt(v_hat) + s.eps));
    }
}

}  // namespace

void adam_step(ParamSet& params, const Gradients& grads, AdamState& state, float lr,
               float l2_lambda) {
    if (state.layers.size() != params.layers.size()) {
        throw StateError("adam state does not match the parameter set");
    }
    if (grads.empty()) return;  // everything frozen
    ++state.t;
    ++params.step_count;
    const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), static_cast<double>(state.t));
    for (const auto& lg : grads) {
        if (lg.layer >= params.layers.size()) throw StateError("gradient for unknown layer");
        auto& layer = params.layers[lg.layer];
        if (layer.frozen) throw StateError("gradient supplied for a frozen layer");
        auto& slots = state.layers[lg.layer];
        if (!lg.weight.same_shape(layer.weight) || !lg.bias.same_shape(layer.bias)) {
            throw StateError("gradient shapes do not match layer " + std::to_string(lg.layer + 1));
        }
        adam_update_tensor(layer.weight, lg.weight, slots.weight, state, lr, l2_lambda, bc1, bc2);
        adam_update_tensor(layer.bias, lg.bias, slots.bias, state, lr, 0.0f, bc1, bc2);
        if (layer.has_bn()) {
            adam_update_tensor(layer.bn_gamma, lg.gamma, slots.gamma, state, lr, 0.0f, bc1, bc2);
            adam_update_tensor(layer.bn_beta, lg.beta, slots.beta, state, lr, 0.0f, bc1, bc2);
        }
    }
}

float lr_at(std::size_t epoch, const TrainConfig& config) {
    return static_cast<float>(config.lr0 *
                              std::pow(static_cast<double>(config.lr_decay),
                                       static_cast<double>(epoch)));
}

std::vector<float> score_patches(const ParamSet& params, const PatchSet& set, std::size_t chunk) {
    std::vector<float> scores;
    scores.reserve(set.count());
    const std::size_t side = set.side();
    const std::size_t sample = 2 * side * side;
    for (std::size_t at = 0; at < set.count(); at += chunk) {
        const std::size_t n = std::min(chunk, set.count() - at);
        Tensor batch({n, 2, side, side});
        std::memcpy(batch.data(), set.patches.data() + at * sample, n * sample * sizeof(float));
        const Tensor probs = forward_infer(params, batch);
        for (std::size_t i = 0; i < n; ++i) scores.push_back(probs.at2(i, 1));
    }
    return scores;
}

double validation_auc(const ParamSet& params, const PatchSet& val_set) {
    return roc_auc(score_patches(params, val_set), val_set.labels);
}

FitResult fit(ParamSet params, const PatchSet& train_set, const PatchSet& val_set,
              const TrainConfig& config, ValMetricFn val_metric) {
    config.validate();
    if (train_set.count() == 0) throw DataError("fit: empty training set");
    if (val_set.count() == 0 && !val_metric) throw DataError("fit: empty validation set");
    for (const auto y : train_set.labels) {
        if (y > 1) throw DataError("fit: training label outside {0,1}");
    }

    FitResult result;
    result.best_params = params;
    result.best_val_auc = -1.0;
    result.best_epoch = 0;

    if (config.max_epochs == 0) return result;

    AdamState state = AdamState::for_params(params);
    Rng rng(config.seed);
    Rng shuffle_rng = rng.fork(0x5u);
    Rng dropout_rng = rng.fork(0xdu);

    const std::size_t side = train_set.side();
    const std::size_t sample = 2 * side * side;
    std::vector<std::size_t> order(train_set.count());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::size_t since_best = 0;
    for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
        const float lr = lr_at(epoch, config);
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t at = 0; at < order.size(); at += config.batch_size) {
            const std::size_t n = std::min(config.batch_size, order.size() - at);
            if (n < 2) break;  // batch norm needs at least two samples
            Tensor batch({n, 2, side, side});
            std::vector<std::uint8_t> labels(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t src = order[at + i];
                std::memcpy(batch.data() + i * sample, train_set.patches.data() + src * sample,
                            sample * sizeof(float));
                labels[i] = train_set.labels[src];
            }
            ForwardCacheT<float> cache;
            const Tensor probs = forward(params, batch, ForwardMode::train, dropout_rng,
                                         config.dropout, &cache);
            const LossGrad lg = cross_entropy_loss(probs, labels);
            if (!std::isfinite(lg.loss)) {
                throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                   ", batch " + std::to_string(batches + 1));
            }
            const Gradients grads = backward(params, cache, lg.grad_logits);
            adam_step(params, grads, state, lr, config.l2_lambda);
            loss_sum += lg.loss;
            ++batches;
        }
        const double mean_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        const double auc = val_metric ? val_metric(params, epoch) : validation_auc(params, val_set);
        result.history.push_back({epoch, mean_loss, auc, lr});
        result.epochs_run = epoch + 1;
        if (auc > result.best_val_auc) {
            result.best_val_auc = auc;
            result.best_epoch = epoch;
            result.best_params = params;
            since_best = 0;
        } else {
            ++since_best;
        }
        if (since_best >= config.patience) break;
    }
    return result;
}

}  // namespace deskseg
