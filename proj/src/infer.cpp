#include "deskseg/infer.hpp"

#include <cstring>

#include "deskseg/errors.hpp"

namespace deskseg {

FcnModel to_fcn(const ParamSet& params) {
    try {
        validate_params(params);
    } catch (const Error& e) {
        throw CompatibilityError(std::string("to_fcn: ") + e.what());
    }
    FcnModel fcn{params};
    const NetworkSpec& spec = fcn.params.spec;
    for (std::size_t l = spec.conv_count(); l < spec.depth(); ++l) {
        const std::size_t k = spec.kernel_side(l);
        fcn.params.layers[l].weight = fcn.params.layers[l].weight.reshaped(
            {spec.layer_width(l), spec.layer_in_channels(l), k, k});
    }
    return fcn;
}

Tensor fcn_probability_map(const FcnModel& fcn, const Tensor& image) {
    if (image.rank() != 3) {
        throw ShapeError("fcn_probability_map expects [C,H,W], got " + shape_str(image.shape()));
    }
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Tensor batch = image.reshaped({1, C, H, W});
    Rng rng(0);
    auto& params = const_cast<ParamSet&>(fcn.params);  // infer mode never writes
    Tensor probs = forward_map(params, batch, ForwardMode::infer, rng);
    return probs.reshaped({probs.dim(1), probs.dim(2), probs.dim(3)});
}

SegmentationResult segment(const FcnModel& fcn, const Volume& volume, float threshold) {
    const NetworkSpec& spec = fcn.params.spec;
    const std::size_t ps = spec.patch_side;
    const std::size_t H = volume.height, W = volume.width;
    if (H < ps || W < ps) {
        throw ShapeError("segment: image " + std::to_string(H) + "x" + std::to_string(W) +
                         " smaller than the " + std::to_string(ps) + "x" + std::to_string(ps) +
                         " receptive field");
    }
    const std::size_t half_lo = ps / 2;
    const std::size_t hp = H + ps - 1, wp = W + ps - 1;
    Tensor padded({2, hp, wp});
    for (std::size_t y = 0; y < H; ++y) {
        std::memcpy(padded.data() + (0 * hp + y + half_lo) * wp + half_lo,
                    volume.flair.data() + y * W, W * sizeof(float));
        std::memcpy(padded.data() + (1 * hp + y + half_lo) * wp + half_lo,
                    volume.t1.data() + y * W, W * sizeof(float));
    }
    Tensor probs = fcn_probability_map(fcn, padded);  // [2, H, W]
    SegmentationResult out;
    out.height = H;
    out.width = W;
    out.prob_map = Tensor({H, W});
    out.mask.assign(H * W, 0);
    const float* wmh_prob = probs.data() + H * W;  // channel 1
    for (std::size_t i = 0; i < H * W; ++i) {
        if (!volume.brain_mask[i]) continue;
        out.prob_map[i] = wmh_prob[i];
        out.mask[i] = wmh_prob[i] >= threshold ? 1 : 0;
    }
    out.dice_score = dice(out.mask, volume.wmh_mask);
    return out;
}

DiceSummary evaluate_dice(const FcnModel& fcn, const DomainDataset& ds,
                          const std::vector<std::size_t>& volume_ids, float threshold) {
    if (volume_ids.empty()) throw DataError("evaluate_dice: no volumes");
    DiceSummary s;
    std::size_t inter = 0, total = 0;
    for (const std::size_t id : volume_ids) {
        const Volume& v = ds.volumes.at(id);
        const SegmentationResult r = segment(fcn, v, threshold);
        s.mean += r.dice_score;
        for (std::size_t i = 0; i < r.mask.size(); ++i) {
            inter += r.mask[i] & v.wmh_mask[i];
            total += r.mask[i] + v.wmh_mask[i];
        }
    }
    s.mean /= static_cast<double>(volume_ids.size());
    s.pooled = total == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
    return s;
}

}  // namespace deskseg
