#include "deskseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "deskseg/config.hpp"
#include "deskseg/errors.hpp"

namespace deskseg {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ",";
        os << v[i];
    }
    return os.str();
}

std::string layer_prefix(std::size_t l) {
    std::ostringstream os;
    os << "layer" << std::setw(2) << std::setfill('0') << (l + 1);
    return os.str();
}

const char* provenance_str(ProvenanceKind k) {
    switch (k) {
        case ProvenanceKind::source_trained: return "source_trained";
        case ProvenanceKind::scratch_target: return "scratch_target";
        default: return "adapted";
    }
}

ProvenanceKind parse_provenance(const std::string& s, const std::string& path) {
    if (s == "source_trained") return ProvenanceKind::source_trained;
    if (s == "scratch_target") return ProvenanceKind::scratch_target;
    if (s == "adapted") return ProvenanceKind::adapted;
    throw FormatError(path + ": unknown provenance '" + s + "'");
}

void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u32(std::ofstream& os, std::uint32_t v) { write_bytes(os, &v, 4); }

void write_tensor(std::ofstream& os, const std::string& name, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    write_bytes(os, name.data(), name.size());
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t i = 0; i < t.rank(); ++i) write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
    write_bytes(os, t.data(), t.size() * sizeof(float));
}

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

    std::string read_string(std::size_t n) {
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    validate_params(ckpt.params);
    const NetworkSpec& spec = ckpt.params.spec;

    std::ostringstream meta;
    meta << "conv_widths=" << join_sizes(spec.conv_widths) << "\n";
    meta << "dense_widths=" << join_sizes(spec.dense_widths) << "\n";
    meta << "input_channels=" << spec.input_channels << "\n";
    meta << "patch_side=" << spec.patch_side << "\n";
    meta << "frozen=";
    for (std::size_t l = 0; l < ckpt.params.layers.size(); ++l) {
        if (l) meta << ",";
        meta << (ckpt.params.layers[l].frozen ? 1 : 0);
    }
    meta << "\n";
    meta << "step_count=" << ckpt.params.step_count << "\n";
    meta << "provenance=" << provenance_str(ckpt.provenance.kind) << "\n";
    if (!ckpt.provenance.source_ref.empty()) {
        meta << "source_ref=" << ckpt.provenance.source_ref << "\n";
    }
    if (ckpt.provenance.plan) {
        meta << "freeze_count=" << ckpt.provenance.plan->freeze_count << "\n";
    }
    meta << "seed=" << ckpt.seed << "\n";
    meta << "best_val_auc=" << std::hexfloat << ckpt.best_val_auc << std::defaultfloat << "\n";
    meta << "best_epoch=" << ckpt.best_epoch << "\n";
    meta << "epochs_run=" << ckpt.epochs_run << "\n";
    const std::string meta_str = meta.str();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    write_bytes(os, kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<std::uint32_t>(meta_str.size()));
    write_bytes(os, meta_str.data(), meta_str.size());

    std::uint32_t count = 0;
    for (const auto& layer : ckpt.params.layers) count += layer.has_bn() ? 6 : 2;
    write_u32(os, count);
    for (std::size_t l = 0; l < ckpt.params.layers.size(); ++l) {
        const auto& layer = ckpt.params.layers[l];
        const std::string p = layer_prefix(l);
        write_tensor(os, p + ".weight", layer.weight);
        write_tensor(os, p + ".bias", layer.bias);
        if (layer.has_bn()) {
            write_tensor(os, p + ".bn_gamma", layer.bn_gamma);
            write_tensor(os, p + ".bn_beta", layer.bn_beta);
            write_tensor(os, p + ".bn_mean", layer.bn_mean);
            write_tensor(os, p + ".bn_var", layer.bn_var);
        }
    }
    if (!os) throw FormatError("short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r;
    r.path = path;
    r.is.open(path, std::ios::binary);
    if (!r.is) throw FormatError("cannot open " + path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(path + ": bad magic at byte offset 0");
    }
    const std::uint32_t version = r.read_u32();
    if (version != kVersion) {
        throw FormatError(path + ": unsupported version " + std::to_string(version));
    }
    const std::uint32_t meta_len = r.read_u32();
    if (meta_len > (1u << 20)) throw FormatError(path + ": implausible metadata length");
    const std::string meta_str = r.read_string(meta_len);
    const Config meta = Config::parse_string(meta_str, path + "#meta");

    Checkpoint ckpt;
    NetworkSpec spec;
    spec.conv_widths = meta.get_size_list("conv_widths");
    spec.dense_widths = meta.get_size_list("dense_widths");
    spec.input_channels = meta.get_uint("input_channels");
    spec.patch_side = meta.get_uint("patch_side");
    spec.validate();
    ckpt.params.spec = spec;
    ckpt.params.layers.resize(spec.depth());
    ckpt.params.step_count = meta.get_uint("step_count", 0);
    const auto frozen = meta.get_size_list("frozen");
    if (frozen.size() != spec.depth()) {
        throw FormatError(path + ": frozen flag count does not match depth");
    }
    for (std::size_t l = 0; l < spec.depth(); ++l) {
        ckpt.params.layers[l].frozen = frozen[l] != 0;
    }
    ckpt.provenance.kind = parse_provenance(meta.get_string("provenance"), path);
    ckpt.provenance.source_ref = meta.get_string("source_ref", "");
    if (meta.has("freeze_count")) {
        ckpt.provenance.plan = TransferPlan{meta.get_uint("freeze_count"), spec.depth()};
    }
    ckpt.seed = meta.get_uint("seed", 0);
    {
        const std::string auc = meta.get_string("best_val_auc", "0");
        ckpt.best_val_auc = std::strtod(auc.c_str(), nullptr);
    }
    ckpt.best_epoch = meta.get_uint("best_epoch", 0);
    ckpt.epochs_run = meta.get_uint("epochs_run", 0);

    const std::uint32_t count = r.read_u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.read_u32();
        if (name_len > 256) throw FormatError(path + ": implausible tensor name length");
        const std::string name = r.read_string(name_len);
        const std::uint32_t rank = r.read_u32();
        if (rank == 0 || rank > 8) throw FormatError(path + ": implausible tensor rank");
        std::vector<std::size_t> dims(rank);
        std::size_t total = 1;
        for (auto& d : dims) {
            d = r.read_u32();
            total *= d;
        }
        if (total == 0 || total > (1u << 28)) {
            throw FormatError(path + ": implausible tensor size for '" + name + "'");
        }
        std::vector<float> data(total);
        r.read(data.data(), total * sizeof(float));
        Tensor t(dims, std::move(data));

        const auto dot = name.find('.');
        if (dot == std::string::npos || name.rfind("layer", 0) != 0) {
            throw FormatError(path + ": unrecognized tensor name '" + name + "'");
        }
        const std::size_t l = static_cast<std::size_t>(std::stoul(name.substr(5, dot - 5))) - 1;
        if (l >= ckpt.params.layers.size()) {
            throw FormatError(path + ": tensor '" + name + "' refers to a missing layer");
        }
        const std::string field = name.substr(dot + 1);
        auto& layer = ckpt.params.layers[l];
        if (field == "weight") layer.weight = std::move(t);
        else if (field == "bias") layer.bias = std::move(t);
        else if (field == "bn_gamma") layer.bn_gamma = std::move(t);
        else if (field == "bn_beta") layer.bn_beta = std::move(t);
        else if (field == "bn_mean") layer.bn_mean = std::move(t);
        else if (field == "bn_var") layer.bn_var = std::move(t);
        else throw FormatError(path + ": unrecognized tensor field '" + field + "'");
    }
    try {
        validate_params(ckpt.params);
    } catch (const Error& e) {
        throw FormatError(path + ": " + e.what());
    }
    return ckpt;
}

}  // namespace deskseg
