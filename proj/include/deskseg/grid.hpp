#pragma once

#include <string>
#include <vector>

#include "deskseg/transfer.hpp"

namespace deskseg {

struct GridRequest {
    std::vector<int> scenarios = {1, 2, 3};
    std::vector<std::size_t> sizes;
    std::vector<std::size_t> freeze;
    std::vector<std::uint64_t> seeds;
    std::size_t jobs = 1;
};

// All requested scenarios over the grid, canonically sorted.
std::vector<RunResult> run_grid(const ParamSet& source_model, const DomainDataset& target,
                                const GridRequest& request, const ScenarioConfig& config);

// (scenario, size, freeze, seed) ordering; absent fields sort first.
void sort_results(std::vector<RunResult>& rows);

// Deterministic results table. wall_time_s deliberately lives in the timings
// sidecar so reruns with identical seeds are byte-identical.
std::string results_csv(const std::vector<RunResult>& rows);

std::string timings_csv(const std::vector<RunResult>& rows);

// Scenario-3 pivot, rows = sizes, columns = freeze indices, values = mean test
// Dice over seeds.
std::string heatmap_csv(const std::vector<RunResult>& rows);

std::vector<RunResult> parse_results_csv(const std::string& path);

// Text summary of a results table: per-size best freeze index and the
// scratch-vs-adapted comparison.
std::string grid_report(const std::vector<RunResult>& rows);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace deskseg
