#include "deskseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "deskseg/errors.hpp"

namespace deskseg {

namespace {

constexpr std::uint32_t kVolumeVersion = 1;
constexpr char kVolumeMagic[4] = {'M', 'V', 'L', '1'};

void separable_blur(std::vector<float>& img, std::size_t h, std::size_t w, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<float> kernel(2 * radius + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[i + radius] = static_cast<float>(v);
        norm += v;
    }
    for (auto& k : kernel) k = static_cast<float>(k / norm);

    std::vector<float> tmp(img.size());
    const int hi = static_cast<int>(h), wi = static_cast<int>(w);
    // rows
    for (int y = 0; y < hi; ++y) {
        const float* src = img.data() + static_cast<std::size_t>(y) * w;
        float* dst = tmp.data() + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < wi; ++x) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i) {
                const int xx = std::clamp(x + i, 0, wi - 1);
                acc += kernel[i + radius] * src[xx];
            }
            dst[x] = acc;
        }
    }
    // columns
    for (int x = 0; x < wi; ++x) {
        for (int y = 0; y < hi; ++y) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i) {
                const int yy = std::clamp(y + i, 0, hi - 1);
                acc += kernel[i + radius] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            img[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
}

// Smooth unit-variance random field: blurred white noise rescaled.
std::vector<float> texture_field(std::size_t side, Rng& rng) {
    std::vector<float> f(side * side);
    for (auto& v : f) v = static_cast<float>(rng.normal());
    separable_blur(f, side, side, static_cast<double>(side) / 10.0);
    double mean = 0.0;
    for (const float v : f) mean += v;
    mean /= static_cast<double>(f.size());
    double var = 0.0;
    for (const float v : f) var += (v - mean) * (v - mean);
    var /= static_cast<double>(f.size());
    const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
    for (auto& v : f) v = static_cast<float>((v - mean) * inv);
    return f;
}

struct Ellipse {
    double cx, cy, a, b, theta;

    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double ct = std::cos(theta), st = std::sin(theta);
        const double u = ct * dx + st * dy;
        const double v = -st * dx + ct * dy;
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
};

Volume generate_volume(const DomainConfig& cfg, std::size_t patient_index, DomainTag tag) {
    Rng rng(seed_combine(cfg.seed, patient_index));
    const std::size_t side = cfg.image_side;
    Volume vol;
    vol.height = side;
    vol.width = side;
    vol.patient_id = static_cast<std::uint32_t>(patient_index);
    vol.domain = tag;
    vol.brain_mask.assign(side * side, 0);
    vol.wmh_mask.assign(side * side, 0);

    const double s = static_cast<double>(side);
    Ellipse brain;
    brain.cx = 0.5 * s + rng.uniform(-0.03, 0.03) * s;
    brain.cy = 0.5 * s + rng.uniform(-0.03, 0.03) * s;
    brain.a = rng.uniform(0.30, 0.36) * s;
    brain.b = rng.uniform(0.34, 0.40) * s;
    brain.theta = rng.uniform(-0.3, 0.3);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            if (brain.contains(static_cast<double>(x), static_cast<double>(y))) {
                vol.brain_mask[y * side + x] = 1;
            }
        }
    }

    // per-patient appearance: baseline level and texture amplitude vary, so a
    // couple of patients never cover the whole domain
    const double flair_base = rng.uniform(0.38, 0.52);
    const double flair_amp = rng.uniform(0.035, 0.07);
    const double t1_base = rng.uniform(0.50, 0.62);
    const double t1_amp = rng.uniform(0.03, 0.06);
    std::vector<float> flair_tex = texture_field(side, rng);
    std::vector<float> t1_tex = texture_field(side, rng);

    std::vector<float> flair(side * side), t1(side * side);
    for (std::size_t i = 0; i < flair.size(); ++i) {
        flair[i] = static_cast<float>(flair_base + flair_amp * flair_tex[i]);
        t1[i] = static_cast<float>(t1_base + t1_amp * t1_tex[i]);
    }

    const double patient_contrast = cfg.lesion_contrast * rng.uniform(0.85, 1.15);
    const int n_lesions =
        cfg.lesion_count_min +
        (cfg.lesion_count_max > cfg.lesion_count_min
             ? static_cast<int>(rng.below(
                   static_cast<std::size_t>(cfg.lesion_count_max - cfg.lesion_count_min + 1)))
             : 0);
    for (int li = 0; li < n_lesions; ++li) {
        const double radius = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
        const double contrast = patient_contrast * rng.uniform(0.9, 1.1);
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const double cx = rng.uniform(radius, s - radius);
            const double cy = rng.uniform(radius, s - radius);
            // the whole disk must sit inside the brain
            const int r = static_cast<int>(std::ceil(radius));
            bool fits = true;
            for (int dy = -r; dy <= r && fits; ++dy) {
                for (int dx = -r; dx <= r && fits; ++dx) {
                    if (dx * dx + dy * dy > radius * radius) continue;
                    const int px = static_cast<int>(cx) + dx;
                    const int py = static_cast<int>(cy) + dy;
                    if (px < 0 || py < 0 || px >= static_cast<int>(side) ||
                        py >= static_cast<int>(side) ||
                        !vol.brain_mask[static_cast<std::size_t>(py) * side +
                                        static_cast<std::size_t>(px)]) {
                        fits = false;
                    }
                }
            }
            if (!fits) continue;
            for (int dy = -r; dy <= r; ++dy) {
                for (int dx = -r; dx <= r; ++dx) {
                    if (dx * dx + dy * dy > radius * radius) continue;
                    const std::size_t px = static_cast<std::size_t>(static_cast<int>(cx) + dx);
                    const std::size_t py = static_cast<std::size_t>(static_cast<int>(cy) + dy);
                    const std::size_t idx = py * side + px;
                    flair[idx] += static_cast<float>(contrast);
                    t1[idx] -= static_cast<float>(0.8 * contrast);
                    vol.wmh_mask[idx] = 1;
                }
            }
            placed = true;
        }
        if (!placed) {
            throw GenerationError("could not place lesion " + std::to_string(li + 1) + " of " +
                                  std::to_string(n_lesions) + " inside the brain after 100 attempts");
        }
    }

    separable_blur(flair, side, side, cfg.blur_sigma);
    separable_blur(t1, side, side, cfg.blur_sigma);

    for (auto& v : flair) v = static_cast<float>(std::pow(std::max(0.0f, v), cfg.intensity_gamma));
    for (auto& v : t1) v = static_cast<float>(std::pow(std::max(0.0f, v), cfg.intensity_gamma));

    if (cfg.noise_sigma > 0.0) {
        for (auto& v : flair) v += static_cast<float>(cfg.noise_sigma * rng.normal());
        for (auto& v : t1) v += static_cast<float>(cfg.noise_sigma * rng.normal());
    }

    vol.flair = Tensor({side, side}, std::move(flair));
    vol.t1 = Tensor({side, side}, std::move(t1));
    return vol;
}

void normalize_channel(Tensor& channel, const std::vector<std::uint8_t>& brain) {
    float lo = 0.0f, hi = 0.0f;
    bool first = true;
    for (std::size_t i = 0; i < channel.size(); ++i) {
        if (!brain[i]) continue;
        const float v = channel[i];
        if (first) {
            lo = hi = v;
            first = false;
        } else {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (first || hi <= lo) {
        throw DataError("normalize_unit: channel is constant inside the brain mask");
    }
    const float inv = 1.0f / (hi - lo);
    for (std::size_t i = 0; i < channel.size(); ++i) {
        channel[i] = brain[i] ? (channel[i] - lo) * inv : 0.0f;
    }
}

std::string u32_str(std::uint32_t v) { return std::to_string(v); }

void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u32(std::ofstream& os, std::uint32_t v) { write_bytes(os, &v, 4); }

struct Reader {
    std::ifstream is;
    std::size_t offset = 0;
    std::string path;

    void read(void* p, std::size_t n) {
        is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is.gcount()) != n) {
            throw FormatError(path + ": truncated at byte offset " + std::to_string(offset));
        }
        offset += n;
    }

    std::uint32_t read_u32() {
        std::uint32_t v = 0;
        read(&v, 4);
        return v;
    }
};

}  // namespace

void DomainConfig::validate() const {
    if (blur_sigma < 0.0) throw ValueError("blur_sigma must be >= 0");
    if (lesion_contrast <= 0.0) throw ValueError("lesion_contrast must be > 0");
    if (noise_sigma < 0.0) throw ValueError("noise_sigma must be >= 0");
    if (intensity_gamma <= 0.0) throw ValueError("intensity_gamma must be > 0");
    if (lesion_count_min < 0 || lesion_count_max < lesion_count_min) {
        throw ValueError("lesion count range is invalid");
    }
    if (lesion_radius_min <= 0.0 || lesion_radius_max < lesion_radius_min) {
        throw ValueError("lesion radius range is invalid");
    }
    if (image_side < 64) throw ValueError("image_side must be >= 64");
}

DomainDataset generate_domain(const DomainConfig& config, std::size_t n_patients, DomainTag tag) {
    config.validate();
    if (n_patients == 0) throw ValueError("generate_domain needs n_patients >= 1");
    DomainDataset ds;
    ds.domain = tag;
    ds.volumes.reserve(n_patients);
    for (std::size_t p = 0; p < n_patients; ++p) {
        ds.volumes.push_back(generate_volume(config, p, tag));
    }
    return ds;
}

void assign_splits(DomainDataset& ds, std::size_t n_train, std::size_t n_val, std::size_t n_test) {
    if (n_train + n_val + n_test > ds.volumes.size()) {
        throw ValueError("split sizes exceed " + std::to_string(ds.volumes.size()) + " patients");
    }
    ds.train_ids.clear();
    ds.val_ids.clear();
    ds.test_ids.clear();
    std::size_t i = 0;
    for (std::size_t k = 0; k < n_train; ++k) ds.train_ids.push_back(i++);
    for (std::size_t k = 0; k < n_val; ++k) ds.val_ids.push_back(i++);
    for (std::size_t k = 0; k < n_test; ++k) ds.test_ids.push_back(i++);
}

Volume normalize_unit(Volume v) {
    if (v.flair.size() != v.height * v.width || v.brain_mask.size() != v.height * v.width) {
        throw ShapeError("normalize_unit: volume planes disagree with H*W");
    }
    normalize_channel(v.flair, v.brain_mask);
    normalize_channel(v.t1, v.brain_mask);
    return v;
}

DomainDataset& normalize_dataset(DomainDataset& ds) {
    for (auto& v : ds.volumes) v = normalize_unit(std::move(v));
    return ds;
}

PatchSet sample_patches(const Volume& volume, double positive_fraction, Rng& rng,
                        std::size_t patch_side) {
    if (!(positive_fraction > 0.0 && positive_fraction <= 1.0)) {
        throw ValueError("positive_fraction must be in (0,1]");
    }
    if (patch_side < 2 || patch_side > volume.height || patch_side > volume.width) {
        throw ValueError("patch side " + std::to_string(patch_side) + " does not fit the volume");
    }
    const std::size_t half_lo = patch_side / 2;
    const std::size_t half_hi = patch_side - half_lo - 1;
    const std::size_t H = volume.height, W = volume.width;

    std::vector<std::size_t> pos, neg;
    for (std::size_t y = half_lo; y + half_hi < H; ++y) {
        for (std::size_t x = half_lo; x + half_hi < W; ++x) {
            const std::size_t idx = y * W + x;
            if (volume.wmh_mask[idx]) {
                pos.push_back(idx);
            } else if (volume.brain_mask[idx]) {
                neg.push_back(idx);
            }
        }
    }
    if (pos.size() < 4) {
        throw SamplingError("need at least 4 valid WMH centers, found " +
                            std::to_string(pos.size()));
    }
    std::size_t n_pos = static_cast<std::size_t>(
        std::floor(positive_fraction * static_cast<double>(pos.size())));
    n_pos = std::max<std::size_t>(1, n_pos);
    if (neg.size() < n_pos) {
        throw SamplingError("need " + std::to_string(n_pos) + " negative centers, found " +
                            std::to_string(neg.size()));
    }
    // partial Fisher-Yates: the first n_pos entries become the draw
    for (std::size_t i = 0; i < n_pos; ++i) {
        std::swap(pos[i], pos[i + rng.below(pos.size() - i)]);
        std::swap(neg[i], neg[i + rng.below(neg.size() - i)]);
    }

    PatchSet out;
    out.patches = Tensor({2 * n_pos, 2, patch_side, patch_side});
    out.labels.resize(2 * n_pos);
    const auto extract = [&](std::size_t sample, std::size_t center) {
        const std::size_t cy = center / W, cx = center % W;
        float* dst_f = out.patches.data() + sample * 2 * patch_side * patch_side;
        float* dst_t = dst_f + patch_side * patch_side;
        for (std::size_t r = 0; r < patch_side; ++r) {
            const std::size_t sy = cy - half_lo + r;
            const float* src_f = volume.flair.data() + sy * W + (cx - half_lo);
            const float* src_t = volume.t1.data() + sy * W + (cx - half_lo);
            std::memcpy(dst_f + r * patch_side, src_f, patch_side * sizeof(float));
            std::memcpy(dst_t + r * patch_side, src_t, patch_side * sizeof(float));
        }
    };
    for (std::size_t i = 0; i < n_pos; ++i) {
        extract(i, pos[i]);
        out.labels[i] = 1;
    }
    for (std::size_t i = 0; i < n_pos; ++i) {
        extract(n_pos + i, neg[i]);
        out.labels[n_pos + i] = 0;
    }
    return out;
}

PatchSet augment_flip(const PatchSet& in) {
    PatchSet out;
    if (in.count() == 0) return out;
    const std::size_t n = in.count();
    const std::size_t side = in.side();
    const std::size_t sample = 2 * side * side;
    out.patches = Tensor({2 * n, 2, side, side});
    out.labels.resize(2 * n);
    std::memcpy(out.patches.data(), in.patches.data(), n * sample * sizeof(float));
    std::copy(in.labels.begin(), in.labels.end(), out.labels.begin());
    for (std::size_t i = 0; i < n; ++i) {
        const float* src = in.patches.data() + i * sample;
        float* dst = out.patches.data() + (n + i) * sample;
        const std::size_t rows = 2 * side;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t x = 0; x < side; ++x) {
                dst[r * side + x] = src[r * side + (side - 1 - x)];
            }
        }
        out.labels[n + i] = in.labels[i];
    }
    return out;
}

PatchSet concat_patches(const std::vector<PatchSet>& parts) {
    std::size_t total = 0;
    std::size_t side = 0;
    for (const auto& p : parts) {
        if (p.count() == 0) continue;
        if (side == 0) side = p.side();
        if (p.side() != side) throw ShapeError("concat_patches: mixed patch sides");
        total += p.count();
    }
    PatchSet out;
    if (total == 0) return out;
    out.patches = Tensor({total, 2, side, side});
    out.labels.reserve(total);
    const std::size_t sample = 2 * side * side;
    std::size_t at = 0;
    for (const auto& p : parts) {
        if (p.count() == 0) continue;
        std::memcpy(out.patches.data() + at * sample, p.patches.data(),
                    p.count() * sample * sizeof(float));
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
        at += p.count();
    }
    return out;
}

PatchSet sample_dataset_patches(const DomainDataset& ds, const std::vector<std::size_t>& volume_ids,
                                double positive_fraction, Rng& rng, std::size_t patch_side) {
    std::vector<PatchSet> parts;
    parts.reserve(volume_ids.size());
    for (const std::size_t id : volume_ids) {
        if (id >= ds.volumes.size()) throw ValueError("volume id out of range");
        Rng vol_rng = rng.fork(id);
        parts.push_back(sample_patches(ds.volumes[id], positive_fraction, vol_rng, patch_side));
    }
    return concat_patches(parts);
}

void write_volume(const Volume& v, const std::string& path) {
    if (v.flair.size() != v.height * v.width || v.t1.size() != v.height * v.width ||
        v.wmh_mask.size() != v.height * v.width || v.brain_mask.size() != v.height * v.width) {
        throw ShapeError("write_volume: plane sizes disagree with H*W");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    write_bytes(os, kVolumeMagic, 4);
    write_u32(os, kVolumeVersion);
    write_u32(os, static_cast<std::uint32_t>(v.height));
    write_u32(os, static_cast<std::uint32_t>(v.width));
    write_bytes(os, v.flair.data(), v.flair.size() * sizeof(float));
    write_bytes(os, v.t1.data(), v.t1.size() * sizeof(float));
    write_bytes(os, v.wmh_mask.data(), v.wmh_mask.size());
    write_bytes(os, v.brain_mask.data(), v.brain_mask.size());
    write_u32(os, v.patient_id);
    const std::uint8_t tag = static_cast<std::uint8_t>(v.domain);
    write_bytes(os, &tag, 1);
    if (!os) throw FormatError("short write to " + path);
}

Volume read_volume(const std::string& path) {
    Reader r;
    r.path = path;
    r.is.open(path, std::ios::binary);
    if (!r.is) throw FormatError("cannot open " + path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kVolumeMagic, 4) != 0) {
        throw FormatError(path + ": bad magic at byte offset 0");
    }
    const std::uint32_t version = r.read_u32();
    if (version != kVolumeVersion) {
        throw FormatError(path + ": unsupported version " + u32_str(version) +
                          " at byte offset 4");
    }
    Volume v;
    v.height = r.read_u32();
    v.width = r.read_u32();
    if (v.height == 0 || v.width == 0 || v.height > 1u << 20 || v.width > 1u << 20) {
        throw FormatError(path + ": implausible dimensions at byte offset 8");
    }
    const std::size_t n = v.height * v.width;
    std::vector<float> flair(n), t1(n);
    r.read(flair.data(), n * sizeof(float));
    r.read(t1.data(), n * sizeof(float));
    v.flair = Tensor({v.height, v.width}, std::move(flair));
    v.t1 = Tensor({v.height, v.width}, std::move(t1));
    v.wmh_mask.resize(n);
    v.brain_mask.resize(n);
    const std::size_t mask_offset = r.offset;
    r.read(v.wmh_mask.data(), n);
    r.read(v.brain_mask.data(), n);
    for (std::size_t i = 0; i < n; ++i) {
        if (v.wmh_mask[i] > 1 || v.brain_mask[i] > 1) {
            throw FormatError(path + ": non-binary mask byte near offset " +
                              std::to_string(mask_offset));
        }
    }
    v.patient_id = r.read_u32();
    std::uint8_t tag = 0;
    r.read(&tag, 1);
    if (tag > 1) throw FormatError(path + ": bad domain tag at byte offset " +
                                   std::to_string(r.offset - 1));
    v.domain = static_cast<DomainTag>(tag);
    // must be the end of the file
    char extra;
    r.is.read(&extra, 1);
    if (r.is.gcount() != 0) {
        throw FormatError(path + ": trailing bytes after offset " + std::to_string(r.offset));
    }
    return v;
}

void write_manifest(const Manifest& m, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << "# deskseg manifest v1: <domain> <split> <relative path>\n";
    for (const DomainTag d : {DomainTag::source, DomainTag::target}) {
        for (const Split s : {Split::train, Split::val, Split::test}) {
            for (const auto& f : m.entries(d, s)) {
                os << domain_name(d) << " " << split_name(s) << " " << f << "\n";
            }
        }
    }
    if (!os) throw FormatError("short write to " + path);
}

Manifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open " + path);
    Manifest m;
    m.base_dir = std::filesystem::path(path).parent_path().string();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        std::string dom, split, file;
        if (!(ls >> dom)) continue;  // blank
        if (!(ls >> split >> file)) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": expected '<domain> <split> <path>'");
        }
        DomainTag d;
        if (dom == "source") d = DomainTag::source;
        else if (dom == "target") d = DomainTag::target;
        else throw FormatError(path + ":" + std::to_string(lineno) + ": unknown domain '" + dom + "'");
        Split s;
        if (split == "train") s = Split::train;
        else if (split == "val") s = Split::val;
        else if (split == "test") s = Split::test;
        else throw FormatError(path + ":" + std::to_string(lineno) + ": unknown split '" + split + "'");
        m.entries(d, s).push_back(file);
    }
    return m;
}

std::vector<Volume> load_split(const Manifest& m, DomainTag domain, Split split) {
    std::vector<Volume> out;
    for (const auto& f : m.entries(domain, split)) {
        const auto full = m.base_dir.empty()
                              ? f
                              : (std::filesystem::path(m.base_dir) / f).string();
        out.push_back(read_volume(full));
    }
    return out;
}

DomainDataset load_domain(const Manifest& m, DomainTag domain) {
    DomainDataset ds;
    ds.domain = domain;
    for (const Split s : {Split::train, Split::val, Split::test}) {
        auto vols = load_split(m, domain, s);
        for (auto& v : vols) {
            const std::size_t idx = ds.volumes.size();
            ds.volumes.push_back(std::move(v));
            if (s == Split::train) ds.train_ids.push_back(idx);
            else if (s == Split::val) ds.val_ids.push_back(idx);
            else ds.test_ids.push_back(idx);
        }
    }
    return ds;
}

}  // namespace deskseg
