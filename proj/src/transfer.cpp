#include "deskseg/transfer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <thread>

#include "deskseg/errors.hpp"
#include "deskseg/infer.hpp"

namespace deskseg {

namespace {

// rng stream tags within one grid seed
constexpr std::uint64_t kTagSubsetOrder = 0x6f7264ull;
constexpr std::uint64_t kTagTrainSample = 0x747261ull;
constexpr std::uint64_t kTagValSample = 0x76616cull;

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t params_checksum(const ParamSet& params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& layer : params.layers) {
        for (const Tensor* t :
             {&layer.weight, &layer.bias, &layer.bn_gamma, &layer.bn_beta, &layer.bn_mean,
              &layer.bn_var}) {
            h = fnv1a(t->data(), t->size() * sizeof(float), h);
        }
    }
    return h;
}

double cell_seconds(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void TransferPlan::validate() const {
    if (freeze_count > depth) {
        throw ValueError("freeze count " + std::to_string(freeze_count) +
                         " outside [0," + std::to_string(depth) + "]");
    }
}

ParamSet transfer_weights(const ParamSet& source) {
    try {
        validate_params(source);
    } catch (const Error& e) {
        throw CompatibilityError(std::string("transfer_weights: ") + e.what());
    }
    ParamSet copy = source;
    copy.step_count = 0;
    for (auto& layer : copy.layers) layer.frozen = false;
    return copy;
}

ParamSet apply_freeze(ParamSet params, const TransferPlan& plan) {
    plan.validate();
    if (plan.depth != params.spec.depth()) {
        throw ValueError("plan depth " + std::to_string(plan.depth) +
                         " does not match network depth " + std::to_string(params.spec.depth()));
    }
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        params.layers[l].frozen = l < plan.freeze_count;
    }
    return params;
}

AdaptResult adapt(const ParamSet& source, const PatchSet& target_train, const PatchSet& target_val,
                  const TransferPlan& plan, const TrainConfig& config,
                  const std::string& source_ref) {
    ParamSet params = apply_freeze(transfer_weights(source), plan);
    AdaptResult out;
    out.fit = fit(std::move(params), target_train, target_val, config);
    out.provenance = ModelProvenance{ProvenanceKind::adapted, source_ref, plan};
    return out;
}

std::vector<std::size_t> nested_order(const DomainDataset& target, std::uint64_t seed) {
    std::vector<std::size_t> order = target.train_ids;
    Rng rng(seed_combine(seed, kTagSubsetOrder));
    rng.shuffle(order);
    return order;
}

PatchSet grid_train_patches(const DomainDataset& target, const std::vector<std::size_t>& subset,
                            std::uint64_t seed, const ScenarioConfig& config) {
    Rng rng(seed_combine(seed, kTagTrainSample));
    return augment_flip(
        sample_dataset_patches(target, subset, config.positive_fraction, rng, config.patch_side));
}

PatchSet grid_val_patches(const DomainDataset& target, std::uint64_t seed,
                          const ScenarioConfig& config) {
    Rng rng(seed_combine(seed, kTagValSample));
    return sample_dataset_patches(target, target.val_ids, config.positive_fraction, rng,
                                  config.patch_side);
}

namespace {

struct Cell {
    Scenario scenario;
    std::optional<std::size_t> size;
    std::optional<std::size_t> freeze;
    std::uint64_t seed;
};

RunResult run_cell(const Cell& cell, const ParamSet& source_model, const DomainDataset& target,
                   const ScenarioConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    RunResult row;
    row.scenario = static_cast<int>(cell.scenario);
    row.train_size = cell.size;
    row.freeze_index = cell.freeze;
    row.seed = cell.seed;
    try {
        const PatchSet val_patches = grid_val_patches(target, cell.seed, cfg);

        if (cell.scenario == Scenario::direct) {
            const FcnModel fcn = to_fcn(source_model);
            const DiceSummary d = evaluate_dice(fcn, target, target.test_ids, cfg.threshold);
            row.dice_test_mean = d.mean;
            row.dice_test_pooled = d.pooled;
            row.val_auc = validation_auc(source_model, val_patches);
            row.epochs_run = 0;
            row.wall_time_s = cell_seconds(t0);
            return row;
        }

        const std::size_t size = *cell.size;
        const std::vector<std::size_t> order = nested_order(target, cell.seed);
        if (size > order.size()) {
            throw ValueError("requested training size " + std::to_string(size) + " exceeds " +
                             std::to_string(order.size()) + " target training patients");
        }
        const std::vector<std::size_t> subset(order.begin(), order.begin() + size);
        for (const std::size_t id : subset) {
            if (std::find(target.test_ids.begin(), target.test_ids.end(), id) !=
                target.test_ids.end()) {
                throw StateError("training subset touches a test patient");
            }
        }
        const PatchSet train_patches = grid_train_patches(target, subset, cell.seed, cfg);

        TrainConfig train_cfg = cfg.train;
        train_cfg.seed = seed_combine(
            cell.seed, seed_combine(static_cast<std::uint64_t>(cell.scenario),
                                    seed_combine(size, cell.freeze ? *cell.freeze + 1 : 0)));

        FitResult fitres;
        if (cell.scenario == Scenario::scratch) {
            Rng init_rng(seed_combine(train_cfg.seed, 0x1417ull));
            ParamSet fresh = build_network(source_model.spec, init_rng);
            fitres = fit(std::move(fresh), train_patches, val_patches, train_cfg);
        } else {
            TransferPlan plan{*cell.freeze, source_model.spec.depth()};
            fitres = adapt(source_model, train_patches, val_patches, plan, train_cfg).fit;
        }
        const FcnModel fcn = to_fcn(fitres.best_params);
        const DiceSummary d = evaluate_dice(fcn, target, target.test_ids, cfg.threshold);
        row.dice_test_mean = d.mean;
        row.dice_test_pooled = d.pooled;
        row.val_auc = fitres.best_val_auc;
        row.epochs_run = fitres.epochs_run;
    } catch (const std::exception& e) {
        row.error = e.what();
    }
    row.wall_time_s = cell_seconds(t0);
    return row;
}

}  // namespace

std::vector<RunResult> run_scenario(Scenario scenario, const ParamSet& source_model,
                                    const DomainDataset& target,
                                    const std::vector<std::size_t>& sizes,
                                    const std::vector<std::size_t>& freeze_grid,
                                    const std::vector<std::uint64_t>& seeds,
                                    const ScenarioConfig& config, std::size_t jobs) {
    config.train.validate();
    std::vector<Cell> cells;
    for (const std::uint64_t seed : seeds) {
        switch (scenario) {
            case Scenario::direct:
                cells.push_back({scenario, std::nullopt, std::nullopt, seed});
                break;
            case Scenario::scratch:
                for (const std::size_t size : sizes) {
                    cells.push_back({scenario, size, std::nullopt, seed});
                }
                break;
            case Scenario::adapted:
                for (const std::size_t size : sizes) {
                    for (const std::size_t i : freeze_grid) {
                        cells.push_back({scenario, size, i, seed});
                    }
                }
                break;
        }
    }
    std::vector<RunResult> rows(cells.size());
    const std::uint64_t checksum_before = params_checksum(source_model);
    const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, cells.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            rows[i] = run_cell(cells[i], source_model, target, config);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                while (true) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= cells.size()) return;
                    rows[i] = run_cell(cells[i], source_model, target, config);
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    if (params_checksum(source_model) != checksum_before) {
        throw StateError("a grid cell mutated the shared source model");
    }
    return rows;
}

}  // namespace deskseg
