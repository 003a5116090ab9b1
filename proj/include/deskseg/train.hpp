#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "deskseg/data.hpp"
#include "deskseg/nn.hpp"

namespace deskseg {

struct TrainConfig {
    float lr0 = 1e-4f;          // published starting rate
    float lr_decay = 0.97f;     // per-epoch multiplicative factor
    std::size_t batch_size = 128;
    float dropout = 0.3f;
    float l2_lambda = 1e-4f;
    std::size_t max_epochs = 100;
    std::size_t patience = 10;  // epochs without val-AUC improvement before stopping
    std::uint64_t seed = 0;

    void validate() const;
};

// Per-parameter Adam moments, allocated lazily per layer tensor.
struct AdamState {
    struct Slot {
        Tensor m, v;
    };
    struct LayerSlots {
        Slot weight, bias, gamma, beta;
    };
    std::vector<LayerSlots> layers;
    std::uint64_t t = 0;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;

    static AdamState for_params(const ParamSet& params);
};

struct LossGrad {
    double loss = 0.0;
    Tensor grad_logits;  // [N,2], gradient with respect to the pre-softmax logits
};

// Mean negative log-likelihood of the true class over a 2-way softmax.
// The returned gradient folds the softmax in: (probs - onehot) / N.
LossGrad cross_entropy_loss(const Tensor& probs, const std::vector<std::uint8_t>& labels);

// Bias-corrected Adam update. l2_lambda * w joins each weight gradient before
// the moment updates; biases and batch-norm scale/shift are not decayed.
// Frozen layers never appear in `grads`, so their tensors stay untouched.
void adam_step(ParamSet& params, const Gradients& grads, AdamState& state, float lr,
               float l2_lambda);

// lr0 * lr_decay^epoch
float lr_at(std::size_t epoch, const TrainConfig& config);

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_auc = 0.0;
    float lr = 0.0f;
};

struct FitResult {
    ParamSet best_params;
    std::vector<EpochStats> history;
    double best_val_auc = 0.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};

// Replaces the built-in validation AUC; lets tests script the metric sequence.
using ValMetricFn = std::function<double(const ParamSet& params, std::size_t epoch)>;

// Shuffled mini-batch Adam with per-epoch validation AUC, best-snapshot
// retention (earliest epoch wins ties) and early stopping.
FitResult fit(ParamSet params, const PatchSet& train_set, const PatchSet& val_set,
              const TrainConfig& config, ValMetricFn val_metric = {});

// Patch-classifier scores for the positive class, in infer mode.
std::vector<float> score_patches(const ParamSet& params, const PatchSet& set,
                                 std::size_t chunk = 256);

double validation_auc(const ParamSet& params, const PatchSet& val_set);

}  // namespace deskseg
