#include "deskseg/config.hpp"

#include <fstream>
#include <sstream>

#include "deskseg/errors.hpp"

namespace deskseg {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::parse_string(const std::string& text, const std::string& origin) {
    Config c;
    c.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        }
        if (!c.values_.emplace(key, value).second) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
    }
    return c;
}

Config Config::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_string(buf.str(), path);
}

std::string Config::get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigError(origin_ + ": missing required key '" + key + "'");
    }
    return it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(origin_ + ": key '" + key + "' is not a number: '" + v + "'");
    }
}

double Config::get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

std::int64_t Config::get_int(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        std::size_t used = 0;
        const long long i = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError(origin_ + ": key '" + key + "' is not an integer: '" + v + "'");
    }
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
}

std::uint64_t Config::get_uint(const std::string& key) const {
    const std::int64_t i = get_int(key);
    if (i < 0) throw ConfigError(origin_ + ": key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(i);
}

std::uint64_t Config::get_uint(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_uint(key) : fallback;
}

std::vector<std::size_t> Config::get_size_list(const std::string& key) const {
    const std::string v = get_string(key);
    std::vector<std::size_t> out;
    std::istringstream is(v);
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            const long long i = std::stoll(item, &used);
            if (used != item.size() || i < 0) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(i));
        } catch (const std::exception&) {
            throw ConfigError(origin_ + ": key '" + key + "' has a bad list entry: '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError(origin_ + ": key '" + key + "' is an empty list");
    return out;
}

std::vector<std::size_t> Config::get_size_list(const std::string& key,
                                               const std::vector<std::size_t>& fallback) const {
    return has(key) ? get_size_list(key) : fallback;
}

void Config::require_known(const std::set<std::string>& schema) const {
    for (const auto& [key, value] : values_) {
        (void)value;
        if (!schema.count(key)) {
            throw ConfigError(origin_ + ": unknown key '" + key + "'");
        }
    }
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& what) {
    std::vector<std::size_t> out;
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            const long long i = std::stoll(item, &used);
            if (used != item.size() || i < 0) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(i));
        } catch (const std::exception&) {
            throw ConfigError(what + " has a bad list entry: '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError(what + " is an empty list");
    return out;
}

const std::set<std::string>& config_schema() {
    static const std::set<std::string> schema = [] {
        std::set<std::string> s{
            "seed",
            "image_side",
            "lesion_count_min",
            "lesion_count_max",
            "lesion_radius_min",
            "lesion_radius_max",
            "net.conv_widths",
            "train.lr0",
            "train.lr_decay",
            "train.batch_size",
            "train.dropout",
            "train.l2_lambda",
            "train.max_epochs",
            "train.patience",
            "grid.sizes",
            "grid.freeze",
            "grid.seeds",
            "grid.jobs",
            "grid.threshold",
            "grid.scenarios",
            "sample.positive_fraction",
        };
        for (const std::string domain : {"source", "target"}) {
            for (const std::string key :
                 {"blur_sigma", "lesion_contrast", "noise_sigma", "intensity_gamma", "n_train",
                  "n_val", "n_test"}) {
                s.insert(domain + "." + key);
            }
        }
        return s;
    }();
    return schema;
}

}  // namespace deskseg
