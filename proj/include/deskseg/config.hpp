#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace deskseg {

// Plain-text key=value configuration. '#' starts a comment, blank lines are
// skipped, duplicate or unknown keys fail fast.
class Config {
public:
    static Config parse_file(const std::string& path);
    static Config parse_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    // required getters throw ConfigError naming the key
    std::string get_string(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_uint(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;

    // comma-separated unsigned list, e.g. "2,3,5,8"
    std::vector<std::size_t> get_size_list(const std::string& key) const;
    std::vector<std::size_t> get_size_list(const std::string& key,
                                           const std::vector<std::size_t>& fallback) const;

    // every key must be in `schema`
    void require_known(const std::set<std::string>& schema) const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
    std::string origin_;
};

// Every key the tool understands, shared by all subcommands.
const std::set<std::string>& config_schema();

// "2,3,5" -> {2,3,5}; throws ConfigError naming `what` on bad input.
std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& what);

}  // namespace deskseg
