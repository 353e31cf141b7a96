#pragma once

// Flat `key = value` configuration text with `#` comments.

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mssr::kv {

struct Entry {
  std::string value;
  int line = 0;
};

using Map = std::map<std::string, Entry>;

// Throws ConfigError("line N: ...") on syntax errors and duplicate keys.
Map parse(std::string_view text);

// Canonical number formatting (shortest round-trip representation).
std::string format_double(double v);
std::string format_list(const std::vector<std::size_t>& v);
std::string format_list(const std::vector<double>& v);

// Typed reads from a parsed map. Every key that is looked up is marked as
// consumed; `unknown()` lists the rest.
class Reader {
 public:
  explicit Reader(const Map& map) : map_(map) {}

  bool read(const std::string& key, double& out);
  bool read(const std::string& key, std::size_t& out);
  bool read(const std::string& key, int& out);
  bool read(const std::string& key, bool& out);
  bool read(const std::string& key, std::string& out);
  bool read(const std::string& key, std::vector<std::size_t>& out);
  bool read(const std::string& key, std::vector<double>& out);

  // Grid list such as "1x1,2x2".
  bool read_grids(const std::string& key,
                  std::vector<std::pair<std::size_t, std::size_t>>& out);

  std::vector<std::pair<std::string, int>> unknown() const;
  void reject_unknown() const;

  [[noreturn]] void fail(const std::string& key, const std::string& why) const;

 private:
  const Entry* find(const std::string& key);

  const Map& map_;
  std::set<std::string> consumed_;
};

// Documentation row for `--help` and for canonical serialization order.
struct KeyDoc {
  std::string key;
  std::string default_value;
  std::string help;
};

using Grids = std::vector<std::pair<std::size_t, std::size_t>>;

// Canonical text of one value. Enum-typed fields supply their own overloads
// in their namespace (found by argument-dependent lookup).
std::string format_value(double v);
std::string format_value(std::size_t v);
std::string format_value(bool v);
std::string format_value(const std::string& v);
std::string format_value(const std::vector<std::size_t>& v);
std::string format_value(const std::vector<double>& v);
std::string format_value(const Grids& v);

void read_value(Reader& r, const std::string& key, double& v);
void read_value(Reader& r, const std::string& key, std::size_t& v);
void read_value(Reader& r, const std::string& key, bool& v);
void read_value(Reader& r, const std::string& key, std::string& v);
void read_value(Reader& r, const std::string& key, std::vector<std::size_t>& v);
void read_value(Reader& r, const std::string& key, std::vector<double>& v);
void read_value(Reader& r, const std::string& key, Grids& v);

// Visitors for a config struct's `visit(visitor, cfg)` field list.
struct ReadVisitor {
  Reader& reader;
  template <typename T>
  void operator()(const char* key, T& field, const char*) {
    read_value(reader, key, field);
  }
};

struct WriteVisitor {
  std::string& out;
  template <typename T>
  void operator()(const char* key, const T& field, const char*) {
    out += std::string(key) + " = " + format_value(field) + "\n";
  }
};

struct DocVisitor {
  std::vector<KeyDoc>& docs;
  template <typename T>
  void operator()(const char* key, const T& field, const char* help) {
    docs.push_back({key, format_value(field), help});
  }
};

}  // namespace mssr::kv
