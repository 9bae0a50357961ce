#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vffr {

/// Flat TOML subset: [section] headers, `key = value` lines, # comments.
/// Values: basic strings, integers, floats, booleans, one-level arrays.
/// Keys are exposed as "section.key".
class TomlTable {
 public:
  static TomlTable parse(const std::string& text) {
    TomlTable t;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = strip_comment(line);
      s = trim(s);
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') throw std::invalid_argument(err(lineno, "unterminated section header"));
        section = trim(s.substr(1, s.size() - 2));
        if (section.empty()) throw std::invalid_argument(err(lineno, "empty section name"));
        continue;
      }
      auto eq = s.find('=');
      if (eq == std::string::npos) throw std::invalid_argument(err(lineno, "expected key = value"));
      std::string key = trim(s.substr(0, eq));
      std::string val = trim(s.substr(eq + 1));
      if (key.empty() || val.empty()) throw std::invalid_argument(err(lineno, "empty key or value"));
      std::string full = section.empty() ? key : section + "." + key;
      if (t.values_.count(full)) throw std::invalid_argument(err(lineno, "duplicate key " + full));
      t.values_[full] = val;
    }
    return t;
  }

  static TomlTable parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return unquote(it->second, key);
  }

  long get_int(const std::string& key, long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return to_int(it->second, key);
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return to_double(it->second, key);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw std::invalid_argument(key + ": not a boolean: " + it->second);
  }

  std::vector<double> get_double_array(const std::string& key, std::vector<double> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const auto& tok : split_array(it->second, key)) out.push_back(to_double(tok, key));
    return out;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> k;
    for (const auto& [key, _] : values_) k.push_back(key);
    return k;
  }

 private:
  static std::string err(int lineno, const std::string& what) {
    return "toml line " + std::to_string(lineno) + ": " + what;
  }

  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
  }

  static std::string unquote(const std::string& v, const std::string& key) {
    if (v.size() < 2 || v.front() != '"' || v.back() != '"')
      throw std::invalid_argument(key + ": not a quoted string: " + v);
    return v.substr(1, v.size() - 2);
  }

  static long to_int(const std::string& v, const std::string& key) {
    size_t pos = 0;
    long x = 0;
    try {
      x = std::stol(v, &pos);
    } catch (const std::exception&) {
      throw std::invalid_argument(key + ": not an integer: " + v);
    }
    if (pos != v.size()) throw std::invalid_argument(key + ": not an integer: " + v);
    return x;
  }

  static double to_double(const std::string& v, const std::string& key) {
    size_t pos = 0;
    double x = 0;
    try {
      x = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw std::invalid_argument(key + ": not a number: " + v);
    }
    if (pos != v.size()) throw std::invalid_argument(key + ": not a number: " + v);
    return x;
  }

  static std::vector<std::string> split_array(const std::string& v, const std::string& key) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
      throw std::invalid_argument(key + ": not an array: " + v);
    std::vector<std::string> toks;
    std::string body = v.substr(1, v.size() - 2);
    std::string cur;
    for (char c : body) {
      if (c == ',') {
        toks.push_back(trim(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    std::string last = trim(cur);
    if (!last.empty()) toks.push_back(last);
    for (const auto& t : toks)
      if (t.empty()) throw std::invalid_argument(key + ": empty array element");
    return toks;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace vffr
