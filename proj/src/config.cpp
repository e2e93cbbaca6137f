#include "snvme/config.hpp"

#include <cctype>

#include "snvme/error.hpp"

namespace snvme {
namespace {

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw Error(ErrorKind::kConfig,
              "config line " + std::to_string(line) + ": " + what);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
    s.remove_prefix(1);
  }
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
    s.remove_suffix(1);
  }
  return s;
}

bool bare_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') {
      return false;
    }
  }
  return true;
}

// Parses a basic string starting at s[0] == '"'; returns the rest.
std::string_view parse_string(std::string_view s, std::string& out,
                              std::size_t line) {
  std::size_t i = 1;
  for (; i < s.size() && s[i] != '"'; ++i) {
    char c = s[i];
    if (c != '\\') {
      out.push_back(c);
      continue;
    }
    if (++i == s.size()) break;
    switch (s[i]) {
      case 'n': out.push_back('\n'); break;
      case 't': out.push_back('\t'); break;
      case '"': out.push_back('"'); break;
      case '\\': out.push_back('\\'); break;
      default: fail(line, "unsupported escape");
    }
  }
  if (i >= s.size()) fail(line, "unterminated string");
  return s.substr(i + 1);
}

TomlValue parse_value(std::string_view v, std::size_t line) {
  if (v.empty()) fail(line, "missing value");
  if (v.front() == '"') {
    std::string out;
    auto rest = trim(parse_string(v, out, line));
    if (!rest.empty() && rest.front() != '#') fail(line, "junk after string");
    return out;
  }
  if (auto hash = v.find('#'); hash != std::string_view::npos) {
    v = trim(v.substr(0, hash));
  }
  if (v == "true") return true;
  if (v == "false") return false;
  std::size_t i = 0;
  bool neg = false;
  if (v[0] == '+' || v[0] == '-') {
    neg = v[0] == '-';
    i = 1;
  }
  if (i == v.size()) fail(line, "bad integer");
  std::uint64_t acc = 0;
  char prev = '_';
  for (; i < v.size(); ++i) {
    char c = v[i];
    if (c == '_') {
      if (prev == '_') fail(line, "bad underscore in integer");
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      std::uint64_t next = acc * 10 + static_cast<std::uint64_t>(c - '0');
      if (next / 10 != acc || next > (std::uint64_t{1} << 63) - (neg ? 0 : 1)) {
        fail(line, "integer out of range");
      }
      acc = next;
    } else {
      fail(line, "unsupported value '" + std::string(v) + "'");
    }
    prev = c;
  }
  if (prev == '_') fail(line, "bad underscore in integer");
  return neg ? static_cast<std::int64_t>(0 - acc)
             : static_cast<std::int64_t>(acc);
}

}  // namespace

TomlDoc parse_toml(std::string_view text) {
  TomlDoc doc;
  std::string table;
  doc[table];
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    auto nl = text.find('\n');
    auto line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{}
                                        : text.substr(nl + 1);
    if (line.empty() || line.front() == '#') continue;
    if (line.front() == '[') {
      auto close = line.find(']');
      if (close == std::string_view::npos) fail(line_no, "unterminated header");
      auto rest = trim(line.substr(close + 1));
      if (!rest.empty() && rest.front() != '#') fail(line_no, "junk after header");
      auto name = trim(line.substr(1, close - 1));
      if (!bare_key(name)) fail(line_no, "bad table name");
      table = std::string(name);
      if (doc.count(table) && !doc[table].empty()) {
        fail(line_no, "duplicate table [" + table + "]");
      }
      doc[table];
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string_view::npos) fail(line_no, "expected key = value");
    auto key = trim(line.substr(0, eq));
    if (!bare_key(key)) fail(line_no, "bad key");
    auto& t = doc[table];
    if (t.count(std::string(key))) {
      fail(line_no, "duplicate key '" + std::string(key) + "'");
    }
    t[std::string(key)] = parse_value(trim(line.substr(eq + 1)), line_no);
  }
  return doc;
}

}  // namespace snvme
