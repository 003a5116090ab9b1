#pragma once

#include <cstdint>
#include <vector>

#include "deskseg/data.hpp"
#include "deskseg/metrics.hpp"
#include "deskseg/nn.hpp"

namespace deskseg {

// Patch classifier with the dense layers reshaped to their convolutional
// counterparts: dense(256) becomes an 8x8 convolution over the final feature
// map, the rest become 1x1 convolutions. Values are untouched.
struct FcnModel {
    ParamSet params;
};

FcnModel to_fcn(const ParamSet& params);

struct SegmentationResult {
    std::size_t height = 0, width = 0;
    Tensor prob_map;                  // [H,W], WMH-class probability, 0 outside brain
    std::vector<std::uint8_t> mask;   // (prob >= threshold) AND brain
    double dice_score = 0.0;          // against the volume's reference mask
};

// Full-image segmentation. The input is zero-padded by patch_side/2 on the
// top/left and patch_side/2-1 on the bottom/right so output voxel (y,x) equals
// the patch classifier applied to the window centered there.
SegmentationResult segment(const FcnModel& fcn, const Volume& volume, float threshold = 0.5f);

// Probability map for one [C,H,W] image without padding or masking;
// output is [classes, H-patch_side+1, W-patch_side+1].
Tensor fcn_probability_map(const FcnModel& fcn, const Tensor& image);

struct DiceSummary {
    double mean = 0.0;    // per-patient average (the headline number)
    double pooled = 0.0;  // voxel-pooled over all patients
};

DiceSummary evaluate_dice(const FcnModel& fcn, const DomainDataset& ds,
                          const std::vector<std::size_t>& volume_ids, float threshold = 0.5f);

}  // namespace deskseg
