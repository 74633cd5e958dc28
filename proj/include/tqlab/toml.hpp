// Minimal TOML reader covering the config schema: tables, arrays of tables,
// scalar values (string, integer, float, bool), and possibly-multiline
// arrays. Values remember the line they came from so validation errors can
// point at the source.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "tqlab/common.hpp"

namespace tqlab::toml {

class Value;
using Array = std::vector<Value>;
using Table = std::map<std::string, Value>;

class Value {
 public:
  using Data = std::variant<std::string, std::int64_t, double, bool, Array, Table>;

  Value() : data_(Table{}) {}
  explicit Value(Data data, int line = 0) : data_(std::move(data)), line_(line) {}

  int line() const { return line_; }

  bool is_table() const { return std::holds_alternative<Table>(data_); }
  bool is_array() const { return std::holds_alternative<Array>(data_); }
  bool is_string() const { return std::holds_alternative<std::string>(data_); }
  bool is_bool() const { return std::holds_alternative<bool>(data_); }
  bool is_int() const { return std::holds_alternative<std::int64_t>(data_); }
  bool is_number() const { return is_int() || std::holds_alternative<double>(data_); }

  // Accessors throw ConfigError naming the field and line on type mismatch.
  const Table& as_table(const std::string& field) const;
  Table& as_table(const std::string& field);
  const Array& as_array(const std::string& field) const;
  Array& as_array(const std::string& field);
  const std::string& as_string(const std::string& field) const;
  bool as_bool(const std::string& field) const;
  std::int64_t as_int(const std::string& field) const;
  double as_number(const std::string& field) const;  // int or float

 private:
  Data data_;
  int line_ = 0;
};

// Both throw ConfigError with "origin:line:" prefixes on malformed input.
Value parse_string(std::string_view text, const std::string& origin);
Value parse_file(const std::string& path);

// Helpers for schema validation over parsed tables.
const Value* find(const Table& table, const std::string& key);
// Rejects keys outside `allowed`, naming section.key and its line.
void check_keys(const Table& table, std::initializer_list<const char*> allowed,
                const std::string& section);

}  // namespace tqlab::toml
