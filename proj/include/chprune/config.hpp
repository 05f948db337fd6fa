#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "chprune/tensor.hpp"

// Line-oriented text config shared by architecture and experiment files.
//
//   # comment
//   key = value
//   layer conv2d out=16 kernel=3 pad=1
//
// `layer` lines keep their order; plain keys must be unique.

namespace chprune {

struct LayerLine {
  std::string kind;
  std::map<std::string, std::string> attrs;
  int line = 0;
};

struct ConfigDocument {
  std::map<std::string, std::string> values;
  std::map<std::string, int> value_lines;
  std::vector<LayerLine> layers;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream iss{std::string(s)};
  for (std::string tok; iss >> tok;) out.push_back(tok);
  return out;
}

}  // namespace detail

inline ConfigDocument parse_config(std::string_view text) {
  ConfigDocument doc;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;

    if (line.starts_with("layer ") || line.starts_with("layer\t")) {
      auto tokens = detail::split_ws(line.substr(6));
      if (tokens.empty()) throw Error("line " + std::to_string(line_no) + ": layer without kind");
      LayerLine layer{tokens[0], {}, line_no};
      for (std::size_t i = 1; i < tokens.size(); ++i) {
        const auto eq = tokens[i].find('=');
        if (eq == std::string::npos || eq == 0) {
          throw Error("line " + std::to_string(line_no) + ": expected attr=value, got '" +
                      tokens[i] + "'");
        }
        auto key = tokens[i].substr(0, eq);
        if (!layer.attrs.emplace(key, tokens[i].substr(eq + 1)).second) {
          throw Error("line " + std::to_string(line_no) + ": duplicate layer attribute '" + key + "'");
        }
      }
      doc.layers.push_back(std::move(layer));
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error("line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                  std::string(line) + "'");
    }
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string value(detail::trim(line.substr(eq + 1)));
    if (key.empty()) throw Error("line " + std::to_string(line_no) + ": empty key");
    if (!doc.values.emplace(key, value).second) {
      throw Error("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    doc.value_lines[key] = line_no;
  }
  return doc;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream oss;
  oss << in.rdbuf();
  return oss.str();
}

/// Typed, consuming view over a ConfigDocument's plain keys. `finish()`
/// rejects any key nobody asked for.
class ConfigReader {
 public:
  explicit ConfigReader(const ConfigDocument& doc) : doc_(doc) {}

  bool has(const std::string& key) const { return doc_.values.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    auto it = doc_.values.find(key);
    return it == doc_.values.end() ? fallback : it->second;
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    auto it = doc_.values.find(key);
    if (it == doc_.values.end()) return fallback;
    return parse_value<T>(key, it->second);
  }

  void finish() const {
    for (const auto& [key, value] : doc_.values) {
      if (!used_.count(key)) {
        throw Error("line " + std::to_string(doc_.value_lines.at(key)) + ": unknown config key '" +
                    key + "'");
      }
    }
  }

  template <typename T>
  static T parse_value(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1" || text == "on") return true;
      if (text == "false" || text == "0" || text == "off") return false;
      throw Error("config key '" + key + "': expected boolean, got '" + text + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(text, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != text.size() || text.empty()) {
        throw Error("config key '" + key + "': expected number, got '" + text + "'");
      }
      return static_cast<T>(v);
    } else {
      T v{};
      auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw Error("config key '" + key + "': expected integer, got '" + text + "'");
      }
      return v;
    }
  }

  template <typename T>
  static std::vector<T> parse_list(const std::string& key, const std::string& text) {
    std::vector<T> out;
    std::string item;
    std::istringstream iss(text);
    while (std::getline(iss, item, ',')) {
      auto trimmed = std::string(detail::trim(item));
      if (!trimmed.empty()) out.push_back(parse_value<T>(key, trimmed));
    }
    return out;
  }

 private:
  const ConfigDocument& doc_;
  std::set<std::string> used_;
};

}  // namespace chprune
