#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "deskseg/checkpoint.hpp"
#include "deskseg/config.hpp"
#include "deskseg/defaults.hpp"
#include "deskseg/errors.hpp"
#include "deskseg/grid.hpp"

using namespace deskseg;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

NetworkSpec tiny_spec() { return NetworkSpec::custom({3, 3}, {8, 4, 2}, 2, 12); }

}  // namespace

TEST_CASE("config parsing") {
    const Config c = Config::parse_string(
        "# a comment\n"
        "seed = 7\n"
        "source.blur_sigma=1.25  # trailing comment\n"
        "\n"
        "grid.sizes= 2, 3,5\n",
        "test.cfg");
    CHECK(c.get_uint("seed") == 7);
    CHECK(c.get_double("source.blur_sigma") == doctest::Approx(1.25));
    CHECK(c.get_size_list("grid.sizes") == std::vector<std::size_t>{2, 3, 5});
    CHECK(c.get_double("missing.key", 4.5) == 4.5);

    SUBCASE("missing required key names the key") {
        try {
            c.get_double("target.blur_sigma");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("target.blur_sigma") != std::string::npos);
        }
    }
    SUBCASE("unknown keys fail fast, naming the key") {
        const Config bad = Config::parse_string("not_a_real_key=1\n", "bad.cfg");
        try {
            bad.require_known(config_schema());
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("not_a_real_key") != std::string::npos);
        }
    }
    SUBCASE("schema accepts every real key") {
        c.require_known(config_schema());
    }
    SUBCASE("duplicate keys are rejected") {
        CHECK_THROWS_AS(Config::parse_string("a.b=1\na.b=2\n", "dup.cfg"), ConfigError);
    }
    SUBCASE("malformed lines are rejected") {
        CHECK_THROWS_AS(Config::parse_string("just words\n", "bad.cfg"), ConfigError);
        CHECK_THROWS_AS(Config::parse_string("=3\n", "bad.cfg"), ConfigError);
    }
    SUBCASE("type errors are reported") {
        const Config t = Config::parse_string("seed=abc\n", "t.cfg");
        CHECK_THROWS_AS(t.get_uint("seed"), ConfigError);
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(5);
    Checkpoint ckpt;
    ckpt.params = build_network(tiny_spec(), rng);
    ckpt.params.layers[0].frozen = true;
    ckpt.params.layers[1].frozen = true;
    ckpt.params.step_count = 1234;
    ckpt.provenance.kind = ProvenanceKind::adapted;
    ckpt.provenance.source_ref = "source.dsk";
    ckpt.provenance.plan = TransferPlan{2, 5};
    ckpt.seed = 99;
    ckpt.best_val_auc = 0.87654321;
    ckpt.best_epoch = 3;
    ckpt.epochs_run = 7;

    const std::string path = temp_path("deskseg_test.dsk");
    save_checkpoint(ckpt, path);
    const Checkpoint r = load_checkpoint(path);

    CHECK(r.params.spec == ckpt.params.spec);
    CHECK(r.params.step_count == 1234);
    for (std::size_t l = 0; l < ckpt.params.layers.size(); ++l) {
        CHECK(r.params.layers[l].weight == ckpt.params.layers[l].weight);
        CHECK(r.params.layers[l].bias == ckpt.params.layers[l].bias);
        CHECK(r.params.layers[l].bn_gamma == ckpt.params.layers[l].bn_gamma);
        CHECK(r.params.layers[l].bn_beta == ckpt.params.layers[l].bn_beta);
        CHECK(r.params.layers[l].bn_mean == ckpt.params.layers[l].bn_mean);
        CHECK(r.params.layers[l].bn_var == ckpt.params.layers[l].bn_var);
        CHECK(r.params.layers[l].frozen == ckpt.params.layers[l].frozen);
    }
    CHECK(r.provenance.kind == ProvenanceKind::adapted);
    CHECK(r.provenance.source_ref == "source.dsk");
    CHECK(r.provenance.plan->freeze_count == 2);
    CHECK(r.seed == 99);
    CHECK(r.best_val_auc == ckpt.best_val_auc);  // hexfloat survives exactly
    CHECK(r.best_epoch == 3);
    CHECK(r.epochs_run == 7);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint format errors") {
    Rng rng(7);
    Checkpoint ckpt;
    ckpt.params = build_network(tiny_spec(), rng);
    const std::string path = temp_path("deskseg_test2.dsk");
    save_checkpoint(ckpt, path);

    SUBCASE("bad magic") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("NOPE", 4);
        f.close();
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SUBCASE("unsupported version") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        const std::uint32_t v = 42;
        f.write(reinterpret_cast<const char*>(&v), 4);
        f.close();
        try {
            load_checkpoint(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("version") != std::string::npos);
        }
    }
    SUBCASE("truncation") {
        const auto size = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, size - 64);
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("results CSV round trip") {
    std::vector<RunResult> rows(3);
    rows[0] = {1, std::nullopt, std::nullopt, 1, 0.5, 0.52, 0.9, 0, 1.5, ""};
    rows[1] = {2, 5, std::nullopt, 2, 0.25, 0.24, 0.8, 7, 2.5, ""};
    rows[2] = {3, 5, 12, 2, 0.75, 0.74, 0.95, 9, 3.5, "boom, with comma"};
    const std::string csv = results_csv(rows);
    const std::string path = temp_path("deskseg_results.csv");
    write_text_file(path, csv);
    const auto parsed = parse_results_csv(path);
    REQUIRE(parsed.size() == 3);
    CHECK(parsed[0].scenario == 1);
    CHECK_FALSE(parsed[0].train_size.has_value());
    CHECK(parsed[1].train_size == 5);
    CHECK_FALSE(parsed[1].freeze_index.has_value());
    CHECK(parsed[2].freeze_index == 12);
    CHECK(parsed[2].dice_test_mean == doctest::Approx(0.75));
    CHECK(parsed[2].error == "boom; with comma");  // sanitized separator
    std::filesystem::remove(path);
}

TEST_CASE("canonical sorting") {
    std::vector<RunResult> rows(4);
    rows[0] = {3, 5, 12, 2, 0, 0, 0, 0, 0, ""};
    rows[1] = {1, std::nullopt, std::nullopt, 1, 0, 0, 0, 0, 0, ""};
    rows[2] = {3, 2, 12, 1, 0, 0, 0, 0, 0, ""};
    rows[3] = {3, 2, 0, 1, 0, 0, 0, 0, 0, ""};
    sort_results(rows);
    CHECK(rows[0].scenario == 1);
    CHECK(rows[1].train_size == 2);
    CHECK(rows[1].freeze_index == 0);
    CHECK(rows[2].freeze_index == 12);
    CHECK(rows[3].train_size == 5);
}

TEST_CASE("heatmap pivot") {
    std::vector<RunResult> rows;
    for (const std::size_t size : {2, 5}) {
        for (const std::size_t freeze : {0, 12}) {
            for (const std::uint64_t seed : {1, 2}) {
                RunResult r;
                r.scenario = 3;
                r.train_size = size;
                r.freeze_index = freeze;
                r.seed = seed;
                r.dice_test_mean = 0.1 * static_cast<double>(size) +
                                   0.01 * static_cast<double>(freeze) +
                                   0.001 * static_cast<double>(seed);
                rows.push_back(r);
            }
        }
    }
    const std::string csv = heatmap_csv(rows);
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    CHECK(line == "size\\freeze,0,12");
    std::getline(is, line);
    CHECK(line == "2,0.201500,0.321500");  // mean over the two seeds
    std::getline(is, line);
    CHECK(line == "5,0.501500,0.621500");
}

TEST_CASE("grid output is independent of the job count") {
    Rng rng(17);
    const ParamSet source = build_network(tiny_spec(), rng);
    DomainConfig cfg = desk::target_domain(29);
    cfg.image_side = 64;
    cfg.lesion_count_min = 2;
    cfg.lesion_count_max = 4;
    DomainDataset target = generate_domain(cfg, 6, DomainTag::target);
    normalize_dataset(target);
    assign_splits(target, 4, 1, 1);

    GridRequest req;
    req.scenarios = {1, 2, 3};
    req.sizes = {2};
    req.freeze = {0, 5};
    req.seeds = {1, 2};
    ScenarioConfig sc;
    sc.train.batch_size = 16;
    sc.train.max_epochs = 1;
    sc.patch_side = 12;

    req.jobs = 1;
    const auto rows1 = run_grid(source, target, req, sc);
    req.jobs = 4;
    const auto rows4 = run_grid(source, target, req, sc);
    CHECK(results_csv(rows1) == results_csv(rows4));
    // 2 direct + 2 scratch + 2*2 adapted
    CHECK(rows1.size() == 8);
    for (const auto& r : rows1) CHECK(r.error.empty());

    const std::string report = grid_report(rows1);
    CHECK(report.find("size 2") != std::string::npos);
}
