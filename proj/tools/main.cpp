#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "deskseg/checkpoint.hpp"
#include "deskseg/config.hpp"
#include "deskseg/data.hpp"
#include "deskseg/defaults.hpp"
#include "deskseg/grid.hpp"
#include "deskseg/infer.hpp"
#include "deskseg/train.hpp"
#include "deskseg/transfer.hpp"

namespace fs = std::filesystem;
using namespace deskseg;

namespace {

Config load_config(const std::string& path) {
    if (path.empty()) return Config::parse_string("", "<defaults>");
    Config c = Config::parse_file(path);
    c.require_known(config_schema());
    return c;
}

DomainConfig domain_from_config(const Config& cfg, const std::string& prefix, DomainTag tag,
                                std::uint64_t seed) {
    DomainConfig base =
        tag == DomainTag::source ? desk::source_domain(seed) : desk::target_domain(seed);
    DomainConfig d = base;
    d.blur_sigma = cfg.get_double(prefix + ".blur_sigma", base.blur_sigma);
    d.lesion_contrast = cfg.get_double(prefix + ".lesion_contrast", base.lesion_contrast);
    d.noise_sigma = cfg.get_double(prefix + ".noise_sigma", base.noise_sigma);
    d.intensity_gamma = cfg.get_double(prefix + ".intensity_gamma", base.intensity_gamma);
    d.lesion_count_min = static_cast<int>(cfg.get_int("lesion_count_min", d.lesion_count_min));
    d.lesion_count_max = static_cast<int>(cfg.get_int("lesion_count_max", d.lesion_count_max));
    d.lesion_radius_min = cfg.get_double("lesion_radius_min", d.lesion_radius_min);
    d.lesion_radius_max = cfg.get_double("lesion_radius_max", d.lesion_radius_max);
    d.image_side = cfg.get_uint("image_side", d.image_side);
    d.validate();
    return d;
}

TrainConfig train_from_config(const Config& cfg, std::uint64_t seed) {
    TrainConfig t = desk::train();
    t.lr0 = static_cast<float>(cfg.get_double("train.lr0", t.lr0));
    t.lr_decay = static_cast<float>(cfg.get_double("train.lr_decay", t.lr_decay));
    t.batch_size = cfg.get_uint("train.batch_size", t.batch_size);
    t.dropout = static_cast<float>(cfg.get_double("train.dropout", t.dropout));
    t.l2_lambda = static_cast<float>(cfg.get_double("train.l2_lambda", t.l2_lambda));
    t.max_epochs = cfg.get_uint("train.max_epochs", t.max_epochs);
    t.patience = cfg.get_uint("train.patience", t.patience);
    t.seed = seed;
    t.validate();
    return t;
}

NetworkSpec network_from_config(const Config& cfg) {
    const auto widths = cfg.get_size_list("net.conv_widths", desk::conv_widths());
    return NetworkSpec::standard(widths);
}

double positive_fraction_from_config(const Config& cfg) {
    const double f = cfg.get_double("sample.positive_fraction", 0.25);
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("sample.positive_fraction must be in (0,1]");
    return f;
}

DomainTag parse_domain(const std::string& s) {
    if (s == "source") return DomainTag::source;
    if (s == "target") return DomainTag::target;
    throw ValueError("domain must be 'source' or 'target', got '" + s + "'");
}

std::string history_csv(const std::vector<EpochStats>& history) {
    std::ostringstream os;
    os << "epoch,train_loss,val_auc,lr\n";
    for (const auto& e : history) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.8g\n", e.epoch + 1, e.train_loss,
                      e.val_auc, static_cast<double>(e.lr));
        os << buf;
    }
    return os.str();
}

int cmd_synth(const std::string& config_path, const std::string& out_dir, std::int64_t seed_flag) {
    Config cfg = Config::parse_file(config_path);
    cfg.require_known(config_schema());
    const std::uint64_t seed =
        seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : cfg.get_uint("seed");
    // split sizes are required: a synthesized dataset should be fully pinned
    // by its config file
    const std::size_t src_train = cfg.get_uint("source.n_train");
    const std::size_t src_val = cfg.get_uint("source.n_val");
    const std::size_t src_test = cfg.get_uint("source.n_test");
    const std::size_t tgt_train = cfg.get_uint("target.n_train");
    const std::size_t tgt_val = cfg.get_uint("target.n_val");
    const std::size_t tgt_test = cfg.get_uint("target.n_test");

    fs::create_directories(fs::path(out_dir) / "volumes");
    Manifest manifest;
    for (const DomainTag tag : {DomainTag::source, DomainTag::target}) {
        const std::string prefix = domain_name(tag);
        const DomainConfig dc = domain_from_config(cfg, prefix, tag, seed);
        const std::size_t n_train = tag == DomainTag::source ? src_train : tgt_train;
        const std::size_t n_val = tag == DomainTag::source ? src_val : tgt_val;
        const std::size_t n_test = tag == DomainTag::source ? src_test : tgt_test;
        DomainDataset ds = generate_domain(dc, n_train + n_val + n_test, tag);
        normalize_dataset(ds);
        assign_splits(ds, n_train, n_val, n_test);
        const auto emit = [&](const std::vector<std::size_t>& ids, Split split) {
            std::size_t k = 0;
            for (const std::size_t id : ids) {
                std::ostringstream name;
                name << "volumes/" << prefix << "_" << split_name(split) << "_" << std::setw(3)
                     << std::setfill('0') << k++ << ".mvl";
                write_volume(ds.volumes[id], (fs::path(out_dir) / name.str()).string());
                manifest.entries(tag, split).push_back(name.str());
            }
        };
        emit(ds.train_ids, Split::train);
        emit(ds.val_ids, Split::val);
        emit(ds.test_ids, Split::test);
        std::cout << prefix << ": " << n_train << "/" << n_val << "/" << n_test
                  << " train/val/test patients, side " << dc.image_side << "\n";
    }
    const std::string manifest_path = (fs::path(out_dir) / "manifest.txt").string();
    write_manifest(manifest, manifest_path);
    std::cout << "wrote " << manifest_path << "\n";
    return 0;
}

int cmd_train(const std::string& manifest_path, const std::string& domain_str,
              const std::string& config_path, const std::string& out_ckpt,
              const std::string& history_path, std::int64_t seed_flag) {
    const Config cfg = load_config(config_path);
    const DomainTag domain = parse_domain(domain_str);
    const std::uint64_t seed =
        seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : cfg.get_uint("seed", 1);
    const Manifest manifest = read_manifest(manifest_path);
    const DomainDataset ds = load_domain(manifest, domain);
    if (ds.train_ids.empty() || ds.val_ids.empty()) {
        throw DataError("manifest has no train/val volumes for domain " + domain_str);
    }
    const double fraction = positive_fraction_from_config(cfg);

    Rng sample_rng(seed_combine(seed, 1001));
    Rng val_rng(seed_combine(seed, 1002));
    const PatchSet train_patches =
        augment_flip(sample_dataset_patches(ds, ds.train_ids, fraction, sample_rng));
    const PatchSet val_patches = sample_dataset_patches(ds, ds.val_ids, fraction, val_rng);
    std::cout << "patches: " << train_patches.count() << " train (after flip), "
              << val_patches.count() << " val\n";

    const NetworkSpec spec = network_from_config(cfg);
    Rng init_rng(seed_combine(seed, 1003));
    ParamSet params = build_network(spec, init_rng);
    TrainConfig tc = train_from_config(cfg, seed_combine(seed, 1004));
    const FitResult res = fit(std::move(params), train_patches, val_patches, tc);

    Checkpoint ckpt;
    ckpt.params = res.best_params;
    ckpt.provenance.kind = domain == DomainTag::source ? ProvenanceKind::source_trained
                                                       : ProvenanceKind::scratch_target;
    ckpt.seed = seed;
    ckpt.best_val_auc = res.best_val_auc;
    ckpt.best_epoch = res.best_epoch;
    ckpt.epochs_run = res.epochs_run;
    save_checkpoint(ckpt, out_ckpt);

    const std::string hist = history_path.empty() ? out_ckpt + ".history.csv" : history_path;
    write_text_file(hist, history_csv(res.history));

    const FcnModel fcn = to_fcn(res.best_params);
    const DiceSummary d = evaluate_dice(fcn, ds, ds.test_ids);
    std::cout << "best val AUC " << res.best_val_auc << " at epoch " << res.best_epoch + 1
              << " of " << res.epochs_run << "\n";
    std::cout << domain_str << " test dice: mean " << d.mean << ", pooled " << d.pooled << "\n";
    std::cout << "wrote " << out_ckpt << " and " << hist << "\n";
    return 0;
}

int cmd_adapt(const std::string& source_path, const std::string& manifest_path, std::size_t size,
              std::size_t freeze_i, const std::string& config_path, const std::string& out_ckpt,
              std::int64_t seed_flag) {
    const Config cfg = load_config(config_path);
    const std::uint64_t seed =
        seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : cfg.get_uint("seed", 1);
    const Checkpoint source = load_checkpoint(source_path);
    const Manifest manifest = read_manifest(manifest_path);
    const DomainDataset target = load_domain(manifest, DomainTag::target);

    ScenarioConfig sc;
    sc.train = train_from_config(cfg, seed_combine(seed, 2004));
    sc.positive_fraction = positive_fraction_from_config(cfg);

    const auto order = nested_order(target, seed);
    if (size > order.size()) {
        throw ValueError("requested size " + std::to_string(size) + " exceeds " +
                         std::to_string(order.size()) + " target training patients");
    }
    const std::vector<std::size_t> subset(order.begin(), order.begin() + size);
    const PatchSet train_patches = grid_train_patches(target, subset, seed, sc);
    const PatchSet val_patches = grid_val_patches(target, seed, sc);

    const TransferPlan plan{freeze_i, source.params.spec.depth()};
    const AdaptResult res = adapt(source.params, train_patches, val_patches, plan, sc.train,
                                  source_path);

    Checkpoint out;
    out.params = res.fit.best_params;
    out.provenance = res.provenance;
    out.seed = seed;
    out.best_val_auc = res.fit.best_val_auc;
    out.best_epoch = res.fit.best_epoch;
    out.epochs_run = res.fit.epochs_run;
    save_checkpoint(out, out_ckpt);

    const FcnModel fcn = to_fcn(res.fit.best_params);
    const DiceSummary d = evaluate_dice(fcn, target, target.test_ids);
    std::cout << "adapted with freeze i=" << freeze_i << " (fine-tuned d-i="
              << source.params.spec.depth() - freeze_i << ") on " << size << " patients\n";
    std::cout << "best val AUC " << res.fit.best_val_auc << "; target test dice: mean " << d.mean
              << ", pooled " << d.pooled << "\n";
    std::cout << "wrote " << out_ckpt << "\n";
    return 0;
}

int cmd_segment(const std::string& ckpt_path, const std::string& volume_path,
                const std::string& out_path, float threshold) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Volume vol = read_volume(volume_path);
    const FcnModel fcn = to_fcn(ckpt.params);
    const SegmentationResult res = segment(fcn, vol, threshold);

    // results ride in the volume container: channel 0 = probabilities,
    // wmh plane = predicted mask
    Volume out;
    out.height = res.height;
    out.width = res.width;
    out.flair = res.prob_map;
    out.t1 = Tensor({res.height, res.width});
    out.wmh_mask = res.mask;
    out.brain_mask = vol.brain_mask;
    out.patient_id = vol.patient_id;
    out.domain = vol.domain;
    write_volume(out, out_path);

    std::cout << "dice vs reference: " << res.dice_score << "\n";
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_grid(const std::string& source_path, const std::string& manifest_path,
             const std::string& config_path, const std::string& out_csv, std::string sizes_str,
             std::string freeze_str, std::size_t n_seeds, std::size_t jobs,
             std::string scenarios_str, float threshold, bool full_grid,
             std::string heatmap_path, std::string timings_path) {
    const Config cfg = load_config(config_path);
    const Checkpoint source = load_checkpoint(source_path);
    const Manifest manifest = read_manifest(manifest_path);
    const DomainDataset target = load_domain(manifest, DomainTag::target);

    GridRequest req;
    req.sizes = !sizes_str.empty() ? parse_size_list(sizes_str, "--sizes")
                                   : cfg.get_size_list("grid.sizes", desk::grid_sizes());
    req.freeze = !freeze_str.empty() ? parse_size_list(freeze_str, "--freeze")
                                     : cfg.get_size_list("grid.freeze", desk::grid_freeze());
    if (full_grid) {
        req.sizes = desk::paper_sizes();
        req.freeze = desk::paper_freeze();
    }
    const std::size_t seed_count =
        n_seeds > 0 ? n_seeds : cfg.get_uint("grid.seeds", desk::grid_seed_count());
    for (std::size_t s = 1; s <= seed_count; ++s) req.seeds.push_back(s);
    req.jobs = jobs > 0 ? jobs
                        : cfg.get_uint("grid.jobs",
                                       std::max(1u, std::thread::hardware_concurrency()));
    if (!scenarios_str.empty()) {
        req.scenarios.clear();
        for (const std::size_t s : parse_size_list(scenarios_str, "--scenario")) {
            req.scenarios.push_back(static_cast<int>(s));
        }
    } else if (cfg.has("grid.scenarios")) {
        req.scenarios.clear();
        for (const std::size_t s : cfg.get_size_list("grid.scenarios")) {
            req.scenarios.push_back(static_cast<int>(s));
        }
    }

    ScenarioConfig sc;
    sc.train = train_from_config(cfg, 0);
    sc.positive_fraction = positive_fraction_from_config(cfg);
    sc.threshold = threshold >= 0.0f ? threshold
                                     : static_cast<float>(cfg.get_double("grid.threshold", 0.5));

    std::cout << "grid: " << req.scenarios.size() << " scenario(s), " << req.sizes.size()
              << " size(s), " << req.freeze.size() << " freeze value(s), " << seed_count
              << " seed(s), jobs=" << req.jobs << "\n";
    const std::vector<RunResult> rows = run_grid(source.params, target, req, sc);

    write_text_file(out_csv, results_csv(rows));
    const std::string heatmap =
        heatmap_path.empty() ? out_csv + ".heatmap.csv" : heatmap_path;
    write_text_file(heatmap, heatmap_csv(rows));
    const std::string timings =
        timings_path.empty() ? out_csv + ".timings.csv" : timings_path;
    write_text_file(timings, timings_csv(rows));

    std::cout << grid_report(rows);
    std::cout << "wrote " << out_csv << ", " << heatmap << ", " << timings << "\n";
    std::size_t failures = 0;
    for (const auto& r : rows) failures += r.error.empty() ? 0 : 1;
    return failures == 0 ? 0 : 1;
}

int cmd_report(const std::string& results_path, const std::string& heatmap_path) {
    const auto rows = parse_results_csv(results_path);
    std::cout << grid_report(rows);
    if (!heatmap_path.empty()) {
        write_text_file(heatmap_path, heatmap_csv(rows));
        std::cout << "wrote " << heatmap_path << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deskseg: desk-scale transfer learning for patch-based lesion segmentation"};
    app.require_subcommand(1);

    std::string config_path, manifest_path, out_path, domain_str = "source";
    std::string ckpt_path, source_path, volume_path, history_path;
    std::string sizes_str, freeze_str, scenarios_str, heatmap_path, timings_path, results_path;
    std::int64_t seed_flag = -1;
    std::size_t size = 2, freeze_i = 12, n_seeds = 0, jobs = 0;
    float threshold = -1.0f;  // negative means unset
    bool full_grid = false;

    auto* synth = app.add_subcommand("synth", "generate the synthetic two-domain dataset");
    synth->add_option("--config", config_path, "key=value config file")->required();
    synth->add_option("--out", out_path, "output directory")->required();
    synth->add_option("--seed", seed_flag, "override the config seed");

    auto* train_cmd = app.add_subcommand("train", "train a patch classifier on one domain");
    train_cmd->add_option("--manifest", manifest_path, "dataset manifest")->required();
    train_cmd->add_option("--domain", domain_str, "source|target")->required();
    train_cmd->add_option("--config", config_path, "key=value config file");
    train_cmd->add_option("--out", out_path, "output checkpoint")->required();
    train_cmd->add_option("--history", history_path, "per-epoch history CSV");
    train_cmd->add_option("--seed", seed_flag, "run seed");

    auto* adapt_cmd = app.add_subcommand("adapt", "fine-tune a source checkpoint on the target");
    adapt_cmd->add_option("--source", source_path, "source checkpoint")->required();
    adapt_cmd->add_option("--manifest", manifest_path, "dataset manifest")->required();
    adapt_cmd->add_option("--size", size, "target training patients")->required();
    adapt_cmd->add_option("--freeze", freeze_i, "freeze the shallowest i layers")->required();
    adapt_cmd->add_option("--config", config_path, "key=value config file");
    adapt_cmd->add_option("--out", out_path, "output checkpoint")->required();
    adapt_cmd->add_option("--seed", seed_flag, "run seed");

    auto* seg = app.add_subcommand("segment", "segment one volume with a checkpoint");
    seg->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    seg->add_option("--volume", volume_path, "MVL1 volume")->required();
    seg->add_option("--out", out_path, "output volume (probabilities + mask)")->required();
    seg->add_option("--threshold", threshold, "mask threshold (default 0.5)");

    auto* grid = app.add_subcommand("grid", "run the three-scenario grid");
    grid->add_option("--source", source_path, "source checkpoint")->required();
    grid->add_option("--manifest", manifest_path, "dataset manifest")->required();
    grid->add_option("--config", config_path, "key=value config file");
    grid->add_option("--out", out_path, "results CSV")->required();
    grid->add_option("--sizes", sizes_str, "target training sizes, e.g. 2,5,20");
    grid->add_option("--freeze", freeze_str, "freeze indices, e.g. 0,8,12,15");
    grid->add_option("--seeds", n_seeds, "number of seeds (1..N)");
    grid->add_option("--jobs", jobs, "parallel cells");
    grid->add_option("--scenario", scenarios_str, "scenario subset, e.g. 1,3");
    grid->add_option("--threshold", threshold, "segmentation threshold");
    grid->add_flag("--full-grid", full_grid, "use the published size/freeze sweep");
    grid->add_option("--heatmap", heatmap_path, "heatmap CSV path");
    grid->add_option("--timings", timings_path, "timings CSV path");

    auto* report = app.add_subcommand("report", "summarize a results CSV");
    report->add_option("--results", results_path, "results CSV")->required();
    report->add_option("--heatmap", heatmap_path, "write the pivoted heatmap CSV here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(config_path, out_path, seed_flag);
        if (train_cmd->parsed()) {
            return cmd_train(manifest_path, domain_str, config_path, out_path, history_path,
                             seed_flag);
        }
        if (adapt_cmd->parsed()) {
            return cmd_adapt(source_path, manifest_path, size, freeze_i, config_path, out_path,
                             seed_flag);
        }
        if (seg->parsed()) {
            return cmd_segment(ckpt_path, volume_path, out_path,
                               threshold >= 0.0f ? threshold : 0.5f);
        }
        if (grid->parsed()) {
            return cmd_grid(source_path, manifest_path, config_path, out_path, sizes_str,
                            freeze_str, n_seeds, jobs, scenarios_str, threshold, full_grid,
                            heatmap_path, timings_path);
        }
        if (report->parsed()) return cmd_report(results_path, heatmap_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
