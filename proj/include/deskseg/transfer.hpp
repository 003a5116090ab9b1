#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "deskseg/data.hpp"
#include "deskseg/nn.hpp"
#include "deskseg/train.hpp"

namespace deskseg {

// Freeze the shallowest freeze_count layers of a depth-layer network and
// fine-tune the rest.
struct TransferPlan {
    std::size_t freeze_count = 0;
    std::size_t depth = 15;

    void validate() const;
};

enum class ProvenanceKind : std::uint8_t {
    source_trained = 0,  // trained on the source domain
    scratch_target = 1,  // trained on the target domain from scratch
    adapted = 2,         // source-trained, fine-tuned on the target domain
};

struct ModelProvenance {
    ProvenanceKind kind = ProvenanceKind::source_trained;
    std::string source_ref;            // checkpoint path or label, when adapted
    std::optional<TransferPlan> plan;  // set when adapted
};

// Deep copy of every parameter tensor and running statistic. Optimizer state
// is not part of a ParamSet, so the copy starts with a fresh optimizer; freeze
// flags and the step counter are cleared.
ParamSet transfer_weights(const ParamSet& source);

// Marks layers 1..freeze_count (input side first: convolutions, then dense)
// frozen and the rest trainable. Frozen layers receive no parameter updates
// and keep their running statistics during fine-tuning.
ParamSet apply_freeze(ParamSet params, const TransferPlan& plan);

struct AdaptResult {
    FitResult fit;
    ModelProvenance provenance;
};

// transfer_weights -> apply_freeze -> fit, with the same optimizer, loss and
// regularization family as source training.
AdaptResult adapt(const ParamSet& source, const PatchSet& target_train, const PatchSet& target_val,
                  const TransferPlan& plan, const TrainConfig& config,
                  const std::string& source_ref = "");

enum class Scenario : int {
    direct = 1,   // apply the source model to the target test set unchanged
    scratch = 2,  // train on the target subset from scratch
    adapted = 3,  // transfer, freeze, fine-tune on the target subset
};

// One grid cell outcome. wall_time_s is diagnostic only and is kept out of the
// deterministic results CSV.
struct RunResult {
    int scenario = 1;
    std::optional<std::size_t> train_size;
    std::optional<std::size_t> freeze_index;
    std::uint64_t seed = 0;
    double dice_test_mean = 0.0;
    double dice_test_pooled = 0.0;
    double val_auc = 0.0;
    std::size_t epochs_run = 0;
    double wall_time_s = 0.0;
    std::string error;  // empty on success
};

struct ScenarioConfig {
    TrainConfig train;
    double positive_fraction = 0.25;
    std::size_t patch_side = 32;
    float threshold = 0.5f;
};

// Seed-keyed permutation of the target training patients; subsets of
// increasing size are prefixes, so size k is contained in size k+1.
std::vector<std::size_t> nested_order(const DomainDataset& target, std::uint64_t seed);

// Patch pools used by the grid cells and the adapt/train commands. Training
// draws fork per volume id, so the pool for a subset is independent of subset
// order and shared between scratch and adapted runs; the result is flip
// augmented. Validation draws are unaugmented and shared per seed.
PatchSet grid_train_patches(const DomainDataset& target, const std::vector<std::size_t>& subset,
                            std::uint64_t seed, const ScenarioConfig& config);
PatchSet grid_val_patches(const DomainDataset& target, std::uint64_t seed,
                          const ScenarioConfig& config);

// Runs one scenario over the requested grid. Cells are independent and
// deterministic; up to `jobs` run concurrently. Failures are recorded in the
// row's error field rather than thrown.
std::vector<RunResult> run_scenario(Scenario scenario, const ParamSet& source_model,
                                    const DomainDataset& target,
                                    const std::vector<std::size_t>& sizes,
                                    const std::vector<std::size_t>& freeze_grid,
                                    const std::vector<std::uint64_t>& seeds,
                                    const ScenarioConfig& config, std::size_t jobs = 1);

}  // namespace deskseg
