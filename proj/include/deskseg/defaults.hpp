#pragma once

#include <cstdint>
#include <vector>

#include "deskseg/data.hpp"
#include "deskseg/nn.hpp"
#include "deskseg/train.hpp"

namespace deskseg::desk {

// Desk-scale experiment defaults: small enough to train on a laptop CPU in
// minutes while keeping the full 15-layer depth. configs/desk.cfg mirrors
// these values.

struct SplitCounts {
    std::size_t train, val, test;
};

inline SplitCounts source_splits() { return {40, 6, 10}; }
inline SplitCounts target_splits() { return {20, 6, 10}; }

// legacy-protocol look: heavy partial-volume blur, faint lesions
inline DomainConfig source_domain(std::uint64_t seed) {
    DomainConfig c;
    c.blur_sigma = 1.2;
    c.lesion_contrast = 0.35;
    c.noise_sigma = 0.02;
    c.intensity_gamma = 1.0;
    c.seed = seed_combine(seed, 1);
    return c;
}

// follow-up look: thinner slices mean less partial-volume blur, brighter
// lesions, less averaging so more acquisition noise, and a different intensity
// response - the shift that breaks direct application
inline DomainConfig target_domain(std::uint64_t seed) {
    DomainConfig c;
    c.blur_sigma = 0.6;
    c.lesion_contrast = 0.55;
    c.noise_sigma = 0.14;
    c.intensity_gamma = 0.65;
    c.seed = seed_combine(seed, 2);
    return c;
}

inline std::vector<std::size_t> conv_widths() {
    return {6, 6, 6, 6, 8, 8, 8, 8, 12, 12, 12, 12};
}

inline NetworkSpec network() { return NetworkSpec::standard(conv_widths()); }

inline TrainConfig train() {
    TrainConfig c;
    c.batch_size = 64;
    c.max_epochs = 15;
    c.patience = 4;
    return c;
}

inline std::vector<std::size_t> grid_sizes() { return {2, 3, 5, 8, 12, 20}; }
inline std::vector<std::size_t> grid_freeze() { return {0, 4, 8, 10, 12, 13, 14, 15}; }
inline std::size_t grid_seed_count() { return 3; }

// the published sweep, for machines with hours to spare
inline std::vector<std::size_t> paper_sizes() {
    return {2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 25, 50, 100};
}
inline std::vector<std::size_t> paper_freeze() {
    std::vector<std::size_t> f;
    for (std::size_t i = 0; i <= 15; ++i) f.push_back(i);
    return f;
}

}  // namespace deskseg::desk
