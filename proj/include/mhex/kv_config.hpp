#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mhex/errors.hpp"

namespace mhex {

/// Canonical key=value text: one pair per line, keys sorted, no spaces
/// around '='. Lists are comma-separated. Identical settings always produce
/// identical bytes.
class KeyValues {
 public:
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void set(const std::string& key, const char* value) { kv_[key] = value; }
  void set(const std::string& key, bool value) { kv_[key] = value ? "true" : "false"; }
  void set(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    kv_[key] = os.str();
  }
  template <typename Int>
    requires std::is_integral_v<Int>
  void set(const std::string& key, Int value) {
    kv_[key] = std::to_string(value);
  }
  void set(const std::string& key, const std::vector<std::size_t>& values) {
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) s += (i ? "," : "") + std::to_string(values[i]);
    kv_[key] = s;
  }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }
  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }
  double get_double(const std::string& key) const {
    try {
      return std::stod(get(key));
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "' is not a number: " + get(key));
    }
  }
  std::uint64_t get_uint(const std::string& key) const {
    try {
      return std::stoull(get(key));
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "' is not an integer: " + get(key));
    }
  }
  bool get_bool(const std::string& key) const { return get(key) == "true"; }
  std::vector<std::size_t> get_list(const std::string& key) const {
    std::vector<std::size_t> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(static_cast<std::size_t>(std::stoull(item)));
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + "=" + v + "\n";
    return out;
  }

  static KeyValues parse(const std::string& text) {
    KeyValues kv;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      if (line.empty() || line[0] == '#' || line[0] == '[') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("malformed config line: " + line);
      kv.kv_[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
  }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace mhex
