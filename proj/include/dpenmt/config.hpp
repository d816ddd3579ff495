#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dpenmt/error.hpp"
#include "dpenmt/vocab.hpp"

namespace dpenmt {

// Line-based key=value dialect shared by run configs, experiment specs and
// synthetic task specs. Blank lines and '#' comments are skipped.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_lines(const std::vector<std::string>& lines) {
    KeyValueConfig cfg;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      std::string line = lines[i];
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos) continue;
      const auto last = line.find_last_not_of(" \t");
      line = line.substr(first, last - first + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos || eq == 0)
        throw parse_error("config line " + std::to_string(i + 1) + " is not key=value: '" +
                          line + "'");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (cfg.values_.count(key))
        throw parse_error("config line " + std::to_string(i + 1) + ": duplicate key '" + key +
                          "'");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig parse_file(const std::string& path) {
    return parse_lines(read_lines(path));
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw config_error("missing required config key '" + key + "'");
    return it->second;
  }

  long long get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return to_int(key, it->second);
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const long long v = to_int(key, it->second);
    if (v < 0) throw config_error("config key '" + key + "' must be nonnegative");
    return static_cast<std::uint64_t>(v);
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw config_error("config key '" + key + "' has non-numeric value '" + it->second + "'");
    }
  }

  // Unknown keys are rejected up front so typos fail loudly.
  void require_known(const std::set<std::string>& allowed) const {
    for (const auto& [key, value] : values_)
      if (!allowed.count(key)) throw config_error("unknown config key '" + key + "'");
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t");
    return s.substr(first, last - first + 1);
  }

  static long long to_int(const std::string& key, const std::string& value) {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(value, &pos);
      if (pos != value.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw config_error("config key '" + key + "' has non-integer value '" + value + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace dpenmt
