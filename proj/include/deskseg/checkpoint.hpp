#pragma once

#include <cstdint>
#include <string>

#include "deskseg/nn.hpp"
#include "deskseg/transfer.hpp"

namespace deskseg {

// DSK1 container: magic "DSK1", u32 version, length-prefixed text metadata
// block (spec, freeze flags, provenance, training summary), then per-tensor
// records (length-prefixed name, u32 rank, u32 dims, f32 little-endian data).
struct Checkpoint {
    ParamSet params;
    ModelProvenance provenance;
    std::uint64_t seed = 0;
    double best_val_auc = 0.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace deskseg
