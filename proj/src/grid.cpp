#include "deskseg/grid.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "deskseg/errors.hpp"

namespace deskseg {

namespace {

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string sanitize(const std::string& s) {
    std::string out = s;
    for (auto& c : out) {
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    }
    return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

void sort_results(std::vector<RunResult>& rows) {
    const auto key = [](const RunResult& r) {
        return std::make_tuple(r.scenario, r.train_size.value_or(0), r.train_size.has_value(),
                               r.freeze_index.value_or(0), r.freeze_index.has_value(), r.seed);
    };
    std::stable_sort(rows.begin(), rows.end(),
                     [&](const RunResult& a, const RunResult& b) { return key(a) < key(b); });
}

std::vector<RunResult> run_grid(const ParamSet& source_model, const DomainDataset& target,
                                const GridRequest& request, const ScenarioConfig& config) {
    std::vector<RunResult> rows;
    for (const int s : request.scenarios) {
        if (s < 1 || s > 3) throw ValueError("scenario must be 1, 2 or 3, got " + std::to_string(s));
        auto part = run_scenario(static_cast<Scenario>(s), source_model, target, request.sizes,
                                 request.freeze, request.seeds, config, request.jobs);
        rows.insert(rows.end(), std::make_move_iterator(part.begin()),
                    std::make_move_iterator(part.end()));
    }
    sort_results(rows);
    return rows;
}

std::string results_csv(const std::vector<RunResult>& rows) {
    std::ostringstream os;
    os << "scenario,train_size,freeze_index,seed,dice_test_mean,dice_test_pooled,val_auc,"
          "epochs_run,error\n";
    for (const auto& r : rows) {
        os << r.scenario << ",";
        if (r.train_size) os << *r.train_size;
        os << ",";
        if (r.freeze_index) os << *r.freeze_index;
        os << "," << r.seed << "," << fmt6(r.dice_test_mean) << "," << fmt6(r.dice_test_pooled)
           << "," << fmt6(r.val_auc) << "," << r.epochs_run << "," << sanitize(r.error) << "\n";
    }
    return os.str();
}

std::string timings_csv(const std::vector<RunResult>& rows) {
    std::ostringstream os;
    os << "scenario,train_size,freeze_index,seed,wall_time_s,epochs_run\n";
    for (const auto& r : rows) {
        os << r.scenario << ",";
        if (r.train_size) os << *r.train_size;
        os << ",";
        if (r.freeze_index) os << *r.freeze_index;
        os << "," << r.seed << "," << fmt6(r.wall_time_s) << "," << r.epochs_run << "\n";
    }
    return os.str();
}

std::string heatmap_csv(const std::vector<RunResult>& rows) {
    std::set<std::size_t> sizes, freezes;
    std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> acc;
    for (const auto& r : rows) {
        if (r.scenario != 3 || !r.error.empty() || !r.train_size || !r.freeze_index) continue;
        sizes.insert(*r.train_size);
        freezes.insert(*r.freeze_index);
        auto& slot = acc[{*r.train_size, *r.freeze_index}];
        slot.first += r.dice_test_mean;
        slot.second += 1;
    }
    std::ostringstream os;
    os << "size\\freeze";
    for (const std::size_t f : freezes) os << "," << f;
    os << "\n";
    for (const std::size_t s : sizes) {
        os << s;
        for (const std::size_t f : freezes) {
            os << ",";
            const auto it = acc.find({s, f});
            if (it != acc.end()) {
                os << fmt6(it->second.first / static_cast<double>(it->second.second));
            }
        }
        os << "\n";
    }
    return os.str();
}

std::vector<RunResult> parse_results_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError(path + ": empty file");
    std::vector<RunResult> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 9) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": expected 9 fields, got " +
                              std::to_string(f.size()));
        }
        RunResult r;
        try {
            r.scenario = std::stoi(f[0]);
            if (!f[1].empty()) r.train_size = std::stoul(f[1]);
            if (!f[2].empty()) r.freeze_index = std::stoul(f[2]);
            r.seed = std::stoull(f[3]);
            r.dice_test_mean = std::stod(f[4]);
            r.dice_test_pooled = std::stod(f[5]);
            r.val_auc = std::stod(f[6]);
            r.epochs_run = std::stoul(f[7]);
            r.error = f[8];
        } catch (const std::exception&) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": malformed row");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string grid_report(const std::vector<RunResult>& rows) {
    std::ostringstream os;
    // scenario 1 summary
    double direct_sum = 0.0;
    std::size_t direct_n = 0;
    for (const auto& r : rows) {
        if (r.scenario == 1 && r.error.empty()) {
            direct_sum += r.dice_test_mean;
            ++direct_n;
        }
    }
    if (direct_n) {
        os << "direct application (scenario 1): mean test dice " << fmt6(direct_sum / direct_n)
           << " over " << direct_n << " seed(s)\n";
    }
    // scenario 2/3 per size
    std::map<std::size_t, std::pair<double, std::size_t>> scratch;
    std::map<std::size_t, std::map<std::size_t, std::pair<double, std::size_t>>> adapted;
    for (const auto& r : rows) {
        if (!r.error.empty() || !r.train_size) continue;
        if (r.scenario == 2) {
            auto& s = scratch[*r.train_size];
            s.first += r.dice_test_mean;
            s.second += 1;
        } else if (r.scenario == 3 && r.freeze_index) {
            auto& s = adapted[*r.train_size][*r.freeze_index];
            s.first += r.dice_test_mean;
            s.second += 1;
        }
    }
    std::set<std::size_t> sizes;
    for (const auto& [k, v] : scratch) { (void)v; sizes.insert(k); }
    for (const auto& [k, v] : adapted) { (void)v; sizes.insert(k); }
    for (const std::size_t size : sizes) {
        os << "size " << size << ":";
        const auto sit = scratch.find(size);
        if (sit != scratch.end()) {
            os << " scratch dice " << fmt6(sit->second.first / sit->second.second);
        }
        const auto ait = adapted.find(size);
        if (ait != adapted.end()) {
            std::size_t best_i = 0;
            double best_d = -1.0;
            for (const auto& [i, slot] : ait->second) {
                const double d = slot.first / slot.second;
                if (d > best_d) {
                    best_d = d;
                    best_i = i;
                }
            }
            os << " | adapted best dice " << fmt6(best_d) << " at freeze i=" << best_i
               << " (fine-tuned layers d-i=" << (15 - best_i) << ")";
        }
        os << "\n";
    }
    std::size_t failures = 0;
    for (const auto& r : rows) failures += r.error.empty() ? 0 : 1;
    if (failures) os << failures << " cell(s) failed; see the error column\n";
    return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << content;
    if (!os) throw FormatError("short write to " + path);
}

}  // namespace deskseg
