#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "conmat/tensor.hpp"

namespace conmat {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& parts, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto s = trim(v);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  auto n = parse_int(key, v);
  if (n < 0) throw ConfigError(key + ": must be non-negative");
  return static_cast<std::size_t>(n);
}

inline double parse_double(const std::string& key, const std::string& v) {
  auto s = trim(v);
  char* end = nullptr;
  double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  auto s = trim(v);
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  for (const auto& p : split(v, ',')) out.push_back(parse_size(key, p));
  return out;
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  if (trim(v).empty()) return out;
  for (const auto& p : split(v, ',')) out.push_back(parse_double(key, p));
  return out;
}

inline std::vector<bool> parse_bool_list(const std::string& key, const std::string& v) {
  std::vector<bool> out;
  if (trim(v).empty()) return out;
  for (const auto& p : split(v, ',')) out.push_back(parse_bool(key, p));
  return out;
}

// Shortest round-trippable text for a double.
inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename V>
std::string fmt_list(const std::vector<V>& xs) {
  std::vector<std::string> parts;
  for (const auto& x : xs) {
    if constexpr (std::is_same_v<V, bool>) parts.push_back(x ? "1" : "0");
    else if constexpr (std::is_floating_point_v<V>) parts.push_back(fmt_double(x));
    else parts.push_back(std::to_string(x));
  }
  return join(parts);
}

// "key = value" lines with '#' comments.
inline std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
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

// Worker count: CMF_THREADS when set, otherwise the hardware concurrency.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("CMF_THREADS")) {
    try {
      auto n = parse_size("CMF_THREADS", env);
      if (n > 0) return n;
    } catch (const ConfigError&) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on up to worker_threads() threads. Each index
// writes only its own output slot, so results do not depend on scheduling.
template <typename F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min(worker_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace conmat
