#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "deskseg/rng.hpp"
#include "deskseg/tensor.hpp"

namespace deskseg {

enum class DomainTag : std::uint8_t { source = 0, target = 1 };

inline const char* domain_name(DomainTag t) { return t == DomainTag::source ? "source" : "target"; }

// One synthetic patient: two image channels normalized to [0,1] inside the
// brain mask, plus the lesion reference and the brain mask itself.
struct Volume {
    std::size_t height = 0, width = 0;
    Tensor flair;  // [H,W]
    Tensor t1;     // [H,W]
    std::vector<std::uint8_t> wmh_mask;
    std::vector<std::uint8_t> brain_mask;
    std::uint32_t patient_id = 0;
    DomainTag domain = DomainTag::source;
};

// Generator knobs for one acquisition domain. The blur/contrast/gamma triple
// is the shift axis: heavier blur and weaker lesion contrast stand in for the
// thick-slice partial-volume appearance of the legacy protocol.
struct DomainConfig {
    double blur_sigma = 1.2;
    double lesion_contrast = 0.35;
    double noise_sigma = 0.02;
    double intensity_gamma = 1.0;
    int lesion_count_min = 1;
    int lesion_count_max = 6;
    double lesion_radius_min = 2.0;
    double lesion_radius_max = 7.0;
    std::size_t image_side = 128;
    std::uint64_t seed = 0;

    void validate() const;
};

struct DomainDataset {
    DomainTag domain = DomainTag::source;
    std::vector<Volume> volumes;
    // disjoint patient-level splits, indices into `volumes`
    std::vector<std::size_t> train_ids, val_ids, test_ids;
};

// Deterministic per (config.seed, patient index). Volumes carry raw generator
// intensities; run normalize_unit (or normalize_dataset) before sampling or
// segmenting, mirroring the acquisition -> preprocessing split.
DomainDataset generate_domain(const DomainConfig& config, std::size_t n_patients,
                              DomainTag tag = DomainTag::source);

// Assigns the first n_train volumes to train, the next n_val to val, the next
// n_test to test. Counts must not exceed the dataset.
void assign_splits(DomainDataset& ds, std::size_t n_train, std::size_t n_val, std::size_t n_test);

// Per-channel min-max rescale over brain voxels; outside-brain voxels become 0.
Volume normalize_unit(Volume v);

DomainDataset& normalize_dataset(DomainDataset& ds);

struct PatchSet {
    Tensor patches;  // [N,2,side,side], channels (flair, t1)
    std::vector<std::uint8_t> labels;

    std::size_t count() const { return labels.size(); }
    std::size_t side() const { return patches.empty() ? 0 : patches.dim(3); }
};

// Balanced center sampling: floor(positive_fraction * |valid WMH centers|)
// positives (at least one) and the same number of negatives from normal brain,
// windows fully inside the image, label = center voxel class. Positives come
// first; shuffling is the trainer's job.
PatchSet sample_patches(const Volume& volume, double positive_fraction, Rng& rng,
                        std::size_t patch_side = 32);

// Every patch plus its left-right mirror, same labels; size exactly doubles.
PatchSet augment_flip(const PatchSet& in);

PatchSet concat_patches(const std::vector<PatchSet>& parts);

// Sample and pool patches over the given volumes of a dataset.
PatchSet sample_dataset_patches(const DomainDataset& ds, const std::vector<std::size_t>& volume_ids,
                                double positive_fraction, Rng& rng, std::size_t patch_side = 32);

// MVL1 container. Layout, all little-endian: magic "MVL1", u32 version=1,
// u32 H, u32 W, FLAIR then T1 as H*W f32, WMH then brain masks as H*W bytes,
// u32 patient id, u8 domain tag.
void write_volume(const Volume& v, const std::string& path);
Volume read_volume(const std::string& path);

enum class Split : std::size_t { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

// Plain-text manifest: one "<domain> <split> <relative path>" line per volume.
struct Manifest {
    std::array<std::array<std::vector<std::string>, 3>, 2> files;  // [domain][split]
    std::string base_dir;

    const std::vector<std::string>& entries(DomainTag d, Split s) const {
        return files[static_cast<std::size_t>(d)][static_cast<std::size_t>(s)];
    }
    std::vector<std::string>& entries(DomainTag d, Split s) {
        return files[static_cast<std::size_t>(d)][static_cast<std::size_t>(s)];
    }
};

void write_manifest(const Manifest& m, const std::string& path);
Manifest read_manifest(const std::string& path);

std::vector<Volume> load_split(const Manifest& m, DomainTag domain, Split split);

// Loads all three splits of one domain and rebuilds the split index lists.
DomainDataset load_domain(const Manifest& m, DomainTag domain);

}  // namespace deskseg
