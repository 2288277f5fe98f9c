#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "modex/errors.hpp"

namespace modex {

/// Ordered `key=value` pairs. Text form is one pair per line, `#` starts a
/// comment, blank lines are ignored, and a repeated key overrides the earlier
/// value in place.
class KeyValues {
 public:
  using Pair = std::pair<std::string, std::string>;

  static KeyValues parse(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": expected key=value, got '" + line + "'");
      }
      std::string key = trim(line.substr(0, eq));
      if (key.empty()) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      }
      kv.set(std::move(key), trim(line.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(std::string key, std::string value) {
    for (Pair& p : pairs_) {
      if (p.first == key) {
        p.second = std::move(value);
        return;
      }
    }
    pairs_.emplace_back(std::move(key), std::move(value));
  }

  bool contains(const std::string& key) const { return find(key) != nullptr; }

  const std::string* find(const std::string& key) const {
    for (const Pair& p : pairs_)
      if (p.first == key) return &p.second;
    return nullptr;
  }

  const std::string& at(const std::string& key) const {
    if (const std::string* v = find(key)) return *v;
    throw ConfigError("missing config key: " + key);
  }

  std::string get_or(const std::string& key, std::string fallback) const {
    if (const std::string* v = find(key)) return *v;
    return fallback;
  }

  void merge(const KeyValues& other) {
    for (const Pair& p : other.pairs_) set(p.first, p.second);
  }

  const std::vector<Pair>& pairs() const { return pairs_; }
  bool empty() const { return pairs_.empty(); }

  std::string to_string() const {
    std::string out;
    for (const Pair& p : pairs_) out += p.first + "=" + p.second + "\n";
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
  }

 private:
  std::vector<Pair> pairs_;
};

namespace parse {

inline std::uint64_t unsigned_int(const std::string& key, const std::string& text) {
  std::uint64_t value = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" +
                      text + "'");
  }
  return value;
}

inline double real(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + text + "'");
  }
}

inline bool boolean(const std::string& key, const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + text + "'");
}

inline std::vector<std::string> split(const std::string& text, char sep = ',') {
  std::vector<std::string> parts;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep)) {
    item = KeyValues::trim(item);
    if (!item.empty()) parts.push_back(item);
  }
  return parts;
}

inline std::vector<std::size_t> size_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  for (const std::string& part : split(text)) out.push_back(unsigned_int(key, part));
  return out;
}

}  // namespace parse

inline std::string join(const std::vector<std::size_t>& values, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(values[i]);
  }
  return out;
}

// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace modex
