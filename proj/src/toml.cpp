#include "tqlab/toml.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace tqlab::toml {

namespace {

[[noreturn]] void type_error(const std::string& field, const char* want, int line) {
  std::ostringstream msg;
  msg << "field " << field << " must be " << want << " (line " << line << ")";
  throw ConfigError(msg.str());
}

}  // namespace

const Table& Value::as_table(const std::string& field) const {
  if (const Table* t = std::get_if<Table>(&data_)) return *t;
  type_error(field, "a table", line_);
}

Table& Value::as_table(const std::string& field) {
  if (Table* t = std::get_if<Table>(&data_)) return *t;
  type_error(field, "a table", line_);
}

const Array& Value::as_array(const std::string& field) const {
  if (const Array* a = std::get_if<Array>(&data_)) return *a;
  type_error(field, "an array", line_);
}

Array& Value::as_array(const std::string& field) {
  if (Array* a = std::get_if<Array>(&data_)) return *a;
  type_error(field, "an array", line_);
}

const std::string& Value::as_string(const std::string& field) const {
  if (const std::string* s = std::get_if<std::string>(&data_)) return *s;
  type_error(field, "a string", line_);
}

bool Value::as_bool(const std::string& field) const {
  if (const bool* b = std::get_if<bool>(&data_)) return *b;
  type_error(field, "a boolean", line_);
}

std::int64_t Value::as_int(const std::string& field) const {
  if (const std::int64_t* i = std::get_if<std::int64_t>(&data_)) return *i;
  type_error(field, "an integer", line_);
}

double Value::as_number(const std::string& field) const {
  if (const std::int64_t* i = std::get_if<std::int64_t>(&data_))
    return static_cast<double>(*i);
  if (const double* d = std::get_if<double>(&data_)) return *d;
  type_error(field, "a number", line_);
}

namespace {

class Parser {
 public:
  Parser(std::string_view text, std::string origin)
      : text_(text), origin_(std::move(origin)) {}

  Value run() {
    Table root;
    Table* current = &root;
    std::set<std::string> headers;
    while (true) {
      skip_blank();
      if (at_end()) break;
      if (peek() == '[') {
        current = header(root, headers);
        continue;
      }
      const int key_line = line_;
      const std::string key = bare_key();
      skip_spaces();
      if (at_end() || peek() != '=') fail("expected '=' after key '" + key + "'");
      ++pos_;
      skip_spaces();
      Value v = value();
      if (!current->emplace(key, std::move(v)).second)
        fail_at(key_line, "duplicate key '" + key + "'");
      end_of_statement();
    }
    return Value(std::move(root), 0);
  }

 private:
  bool at_end() const { return pos_ >= text_.size(); }
  char peek() const { return text_[pos_]; }

  char take() {
    const char c = text_[pos_++];
    if (c == '\n') ++line_;
    return c;
  }

  [[noreturn]] void fail(const std::string& what) const { fail_at(line_, what); }

  [[noreturn]] void fail_at(int line, const std::string& what) const {
    std::ostringstream msg;
    msg << origin_ << ":" << line << ": " << what;
    throw ConfigError(msg.str());
  }

  void skip_spaces() {
    while (!at_end() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }

  void skip_comment() {
    while (!at_end() && peek() != '\n') ++pos_;
  }

  // Whitespace, newlines, and comments between statements.
  void skip_blank() {
    while (!at_end()) {
      const char c = peek();
      if (c == ' ' || c == '\t') {
        ++pos_;
      } else if (c == '\n' || c == '\r') {
        take_newline();
      } else if (c == '#') {
        skip_comment();
      } else {
        break;
      }
    }
  }

  void take_newline() {
    if (peek() == '\r') ++pos_;
    if (!at_end() && peek() == '\n') take();
  }

  void end_of_statement() {
    skip_spaces();
    if (at_end()) return;
    if (peek() == '#') skip_comment();
    if (at_end()) return;
    if (peek() == '\r' || peek() == '\n') {
      take_newline();
      return;
    }
    fail("unexpected trailing content");
  }

  static bool is_key_char(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
           c == '_' || c == '-';
  }

  std::string bare_key() {
    std::string key;
    while (!at_end() && is_key_char(peek())) key.push_back(text_[pos_++]);
    if (key.empty()) fail("expected a key");
    return key;
  }

  // [a.b] opens (creating as needed) a table; [[a.b]] appends to an array of
  // tables. Returns the table new keys land in.
  Table* header(Table& root, std::set<std::string>& headers) {
    const int header_line = line_;
    ++pos_;  // consume '['
    const bool array_of_tables = !at_end() && peek() == '[';
    if (array_of_tables) ++pos_;
    std::vector<std::string> path;
    while (true) {
      skip_spaces();
      path.push_back(bare_key());
      skip_spaces();
      if (at_end()) fail("unterminated table header");
      if (peek() == '.') {
        ++pos_;
        continue;
      }
      break;
    }
    if (peek() != ']') fail("expected ']' in table header");
    ++pos_;
    if (array_of_tables) {
      if (at_end() || peek() != ']') fail("expected ']]' in array-of-tables header");
      ++pos_;
    }
    end_of_statement();

    Table* t = &root;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      Value& v = (*t)[path[i]];
      t = &v.as_table(path[i]);
    }
    const std::string& last = path.back();
    std::string full;
    for (const std::string& p : path) {
      if (!full.empty()) full.push_back('.');
      full += p;
    }
    if (array_of_tables) {
      auto it = t->find(last);
      if (it == t->end()) {
        it = t->emplace(last, Value(Array{}, header_line)).first;
      } else if (!it->second.is_array()) {
        fail_at(header_line, "'" + full + "' is not an array of tables");
      }
      Array& arr = it->second.as_array(full);
      arr.push_back(Value(Table{}, header_line));
      return &arr.back().as_table(full);
    }
    if (!headers.insert(full).second) fail_at(header_line, "duplicate table [" + full + "]");
    return &(*t)[last].as_table(full);
  }

  Value value() {
    if (at_end()) fail("expected a value");
    const int value_line = line_;
    const char c = peek();
    if (c == '"') return Value(string_literal(), value_line);
    if (c == '[') return array_literal(value_line);
    return scalar(value_line);
  }

  std::string string_literal() {
    ++pos_;  // consume '"'
    std::string out;
    while (true) {
      if (at_end()) fail("unterminated string");
      char c = take();
      if (c == '\n') fail("unterminated string");
      if (c == '"') break;
      if (c == '\\') {
        if (at_end()) fail("unterminated escape");
        const char e = take();
        switch (e) {
          case '"': out.push_back('"'); break;
          case '\\': out.push_back('\\'); break;
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          default: fail(std::string("unsupported escape '\\") + e + "'");
        }
        continue;
      }
      out.push_back(c);
    }
    return out;
  }

  Value array_literal(int value_line) {
    ++pos_;  // consume '['
    Array items;
    while (true) {
      skip_blank();
      if (at_end()) fail("unterminated array");
      if (peek() == ']') {
        ++pos_;
        break;
      }
      items.push_back(value());
      skip_blank();
      if (at_end()) fail("unterminated array");
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      if (peek() != ']') fail("expected ',' or ']' in array");
    }
    return Value(std::move(items), value_line);
  }

  Value scalar(int value_line) {
    std::string tok;
    while (!at_end()) {
      const char c = peek();
      if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == ',' || c == ']' || c == '#')
        break;
      tok.push_back(text_[pos_++]);
    }
    if (tok == "true") return Value(true, value_line);
    if (tok == "false") return Value(false, value_line);
    if (tok.empty()) fail("expected a value");
    const bool looks_float = tok.find_first_of(".eE") != std::string::npos ||
                             tok == "inf" || tok == "-inf" || tok == "+inf" || tok == "nan";
    const char* begin = tok.c_str();
    char* end = nullptr;
    if (!looks_float) {
      const long long i = std::strtoll(begin, &end, 10);
      if (end == begin + tok.size()) return Value(static_cast<std::int64_t>(i), value_line);
    }
    const double d = std::strtod(begin, &end);
    if (end == begin + tok.size()) return Value(d, value_line);
    fail("cannot parse value '" + tok + "'");
  }

  std::string_view text_;
  std::string origin_;
  std::size_t pos_ = 0;
  int line_ = 1;
};

}  // namespace

Value parse_string(std::string_view text, const std::string& origin) {
  return Parser(text, origin).run();
}

Value parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str(), path);
}

const Value* find(const Table& table, const std::string& key) {
  const auto it = table.find(key);
  return it == table.end() ? nullptr : &it->second;
}

void check_keys(const Table& table, std::initializer_list<const char*> allowed,
                const std::string& section) {
  for (const auto& [key, value] : table) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) {
      std::ostringstream msg;
      msg << "unknown field " << section << "." << key << " (line " << value.line() << ")";
      throw ConfigError(msg.str());
    }
  }
}

}  // namespace tqlab::toml
