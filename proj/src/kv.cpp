#include "mssr/kv.hpp"

#include <array>
#include <charconv>
#include <cstdint>
#include <sstream>

#include "mssr/error.hpp"

namespace mssr::kv {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    parts.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

}  // namespace

Map parse(std::string_view text) {
  Map map;
  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    ++line_no;
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;

    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (map.count(key)) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    map.emplace(key, Entry{value, line_no});
  }
  return map;
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), ptr);
}

std::string format_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::string format_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_double(v[i]);
  }
  return out;
}

const Entry* Reader::find(const std::string& key) {
  consumed_.insert(key);
  const auto it = map_.find(key);
  return it == map_.end() ? nullptr : &it->second;
}

void Reader::fail(const std::string& key, const std::string& why) const {
  const auto it = map_.find(key);
  std::string where = it == map_.end() ? "" : "line " + std::to_string(it->second.line) + ": ";
  throw ConfigError(where + "key '" + key + "': " + why);
}

bool Reader::read(const std::string& key, double& out) {
  const Entry* e = find(key);
  if (!e) return false;
  if (!parse_number(e->value, out)) fail(key, "expected a number, got '" + e->value + "'");
  return true;
}

bool Reader::read(const std::string& key, std::size_t& out) {
  const Entry* e = find(key);
  if (!e) return false;
  if (!parse_number(e->value, out)) fail(key, "expected a non-negative integer, got '" + e->value + "'");
  return true;
}

bool Reader::read(const std::string& key, int& out) {
  const Entry* e = find(key);
  if (!e) return false;
  if (!parse_number(e->value, out)) fail(key, "expected an integer, got '" + e->value + "'");
  return true;
}


bool Reader::read(const std::string& key, bool& out) {
  const Entry* e = find(key);
  if (!e) return false;
  if (e->value == "true" || e->value == "1") {
    out = true;
  } else if (e->value == "false" || e->value == "0") {
    out = false;
  } else {
    fail(key, "expected true/false, got '" + e->value + "'");
  }
  return true;
}

bool Reader::read(const std::string& key, std::string& out) {
  const Entry* e = find(key);
  if (!e) return false;
  out = e->value;
  return true;
}

bool Reader::read(const std::string& key, std::vector<std::size_t>& out) {
  const Entry* e = find(key);
  if (!e) return false;
  std::vector<std::size_t> values;
  for (auto part : split(e->value, ',')) {
    std::size_t v = 0;
    if (!parse_number(part, v)) fail(key, "expected a comma-separated integer list, got '" + e->value + "'");
    values.push_back(v);
  }
  out = std::move(values);
  return true;
}

bool Reader::read(const std::string& key, std::vector<double>& out) {
  const Entry* e = find(key);
  if (!e) return false;
  std::vector<double> values;
  for (auto part : split(e->value, ',')) {
    double v = 0;
    if (!parse_number(part, v)) fail(key, "expected a comma-separated number list, got '" + e->value + "'");
    values.push_back(v);
  }
  out = std::move(values);
  return true;
}

bool Reader::read_grids(const std::string& key,
                        std::vector<std::pair<std::size_t, std::size_t>>& out) {
  const Entry* e = find(key);
  if (!e) return false;
  std::vector<std::pair<std::size_t, std::size_t>> grids;
  for (auto part : split(e->value, ',')) {
    const auto x = part.find('x');
    std::size_t r = 0, c = 0;
    if (x == std::string_view::npos || !parse_number(part.substr(0, x), r) ||
        !parse_number(part.substr(x + 1), c)) {
      fail(key, "expected grids like '1x1,2x2', got '" + e->value + "'");
    }
    grids.emplace_back(r, c);
  }
  out = std::move(grids);
  return true;
}

std::vector<std::pair<std::string, int>> Reader::unknown() const {
  std::vector<std::pair<std::string, int>> result;
  for (const auto& [key, entry] : map_) {
    if (!consumed_.count(key)) result.emplace_back(key, entry.line);
  }
  return result;
}

void Reader::reject_unknown() const {
  const auto bad = unknown();
  if (bad.empty()) return;
  std::ostringstream msg;
  msg << "line " << bad.front().second << ": unknown key '" << bad.front().first << "'";
  throw ConfigError(msg.str());
}

std::string format_value(double v) { return format_double(v); }
std::string format_value(std::size_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(const std::vector<std::size_t>& v) { return format_list(v); }
std::string format_value(const std::vector<double>& v) { return format_list(v); }

std::string format_value(const Grids& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i].first) + "x" + std::to_string(v[i].second);
  }
  return out;
}

void read_value(Reader& r, const std::string& key, double& v) { r.read(key, v); }
void read_value(Reader& r, const std::string& key, std::size_t& v) { r.read(key, v); }
void read_value(Reader& r, const std::string& key, bool& v) { r.read(key, v); }
void read_value(Reader& r, const std::string& key, std::string& v) { r.read(key, v); }
void read_value(Reader& r, const std::string& key, std::vector<std::size_t>& v) { r.read(key, v); }
void read_value(Reader& r, const std::string& key, std::vector<double>& v) { r.read(key, v); }
void read_value(Reader& r, const std::string& key, Grids& v) { r.read_grids(key, v); }

}  // namespace mssr::kv
