#pragma once

// Flat key=value text with '#' comments, used for model and training configs.

#include <charconv>
#include <cstdio>
#include <map>
#include <string>
#include <string_view>

#include "nlic/errors.hpp"

namespace nlic {

using KeyValues = std::map<std::string, std::string>;

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    NLIC_REQUIRE(eq != std::string_view::npos, ConfigError, "line ", line_no,
                 ": expected key=value, got '", line, "'");
    const std::string key(trim(line.substr(0, eq)));
    NLIC_REQUIRE(!key.empty(), ConfigError, "line ", line_no, ": empty key");
    NLIC_REQUIRE(!kv.count(key), ConfigError, "line ", line_no, ": duplicate key '", key, "'");
    kv[key] = std::string(trim(line.substr(eq + 1)));
  }
  return kv;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  NLIC_REQUIRE(ec == std::errc() && p == v.data() + v.size(), ConfigError, "'", key,
               "' expects an integer, got '", v, "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  NLIC_REQUIRE(ec == std::errc() && p == v.data() + v.size(), ConfigError, "'", key,
               "' expects a number, got '", v, "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(detail::concat("'", key, "' expects true/false, got '", v, "'"));
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace nlic
