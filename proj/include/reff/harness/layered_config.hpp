#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "reff/harness/config.hpp"

namespace reff::harness {

/// Dotted paths of every leaf, in document order.
inline std::vector<std::string> config_keys(const ordered_json& j, const std::string& prefix = "") {
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string k = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      auto sub = config_keys(*it, k);
      keys.insert(keys.end(), sub.begin(), sub.end());
    } else {
      keys.push_back(k);
    }
  }
  return keys;
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] != b[j - 1])});
      diag = up;
    }
  }
  return row[b.size()];
}

inline std::string nearest_key(const std::string& key, const std::vector<std::string>& keys) {
  std::string best;
  std::size_t best_d = SIZE_MAX;
  for (const auto& k : keys) {
    // Compare against the full path and its last component, so "lamda"
    // finds "reff.lambda".
    const auto leaf = k.substr(k.rfind('.') + 1);
    const std::size_t d = std::min(edit_distance(key, k), edit_distance(key, leaf));
    if (d < best_d) best_d = d, best = k;
  }
  return best;
}

/// A configuration document built up in layers; every later layer overrides
/// the earlier ones key by key.
class LayeredConfig {
 public:
  explicit LayeredConfig(const ExperimentConfig& defaults) : doc_(to_json(defaults)), keys_(config_keys(doc_)) {}

  const ordered_json& document() const { return doc_; }
  const std::vector<std::string>& keys() const { return keys_; }

  /// Sets one dotted key to an already typed JSON value.
  void set(const std::string& key, const json& value) {
    ordered_json::json_pointer ptr = pointer(key);
    const json& old = doc_.at(ptr);
    if (old.is_number() && !value.is_number())
      throw ConfigError(key + ": expected a number, got " + value.dump());
    if (old.is_number_unsigned() && !value.is_number_unsigned())
      throw ConfigError(key + ": expected a non-negative integer, got " + value.dump());
    if (old.is_boolean() && !value.is_boolean()) throw ConfigError(key + ": expected true or false, got " + value.dump());
    if (old.is_string() && !value.is_string()) throw ConfigError(key + ": expected a string, got " + value.dump());
    if (old.is_array() && !value.is_array()) throw ConfigError(key + ": expected a list, got " + value.dump());
    doc_[ptr] = value;
  }

  /// Sets a key from command-line text, converted by the type of its current value.
  void set_text(const std::string& key, const std::string& text) {
    const json& old = doc_.at(pointer(key));
    if (old.is_string()) return set(key, text);
    if (old.is_boolean()) {
      if (text == "true" || text == "1") return set(key, true);
      if (text == "false" || text == "0") return set(key, false);
      throw ConfigError(key + ": expected true or false, got '" + text + "'");
    }
    if (old.is_array()) {
      json arr = json::array();
      std::stringstream ss(text);
      std::string tok;
      const json proto = old.empty() ? json(0u) : old[0];
      while (std::getline(ss, tok, ',')) arr.push_back(number(key, tok, proto));
      return set(key, arr);
    }
    return set(key, number(key, text, old));
  }

  /// "key=value".
  void set_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_text(kv.substr(0, eq), kv.substr(eq + 1));
  }

  /// Merges a JSON document: nested objects or dotted top-level keys.
  void merge(const json& j, const std::string& prefix = "") {
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string k = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (it->is_object()) merge(*it, k);
      else set(k, *it);
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    merge(j);
  }

  ExperimentConfig resolve() const { return from_json(doc_); }

 private:
  ordered_json::json_pointer pointer(const std::string& key) const {
    if (std::find(keys_.begin(), keys_.end(), key) == keys_.end())
      throw ConfigError("unknown config key '" + key + "' (did you mean '" + nearest_key(key, keys_) + "'?)");
    std::string p = "/" + key;
    std::replace(p.begin(), p.end(), '.', '/');
    return ordered_json::json_pointer(p);
  }

  /// Parses `text` as the same kind of number as `proto`.
  static json number(const std::string& key, const std::string& text, const json& proto) {
    const bool integral = proto.is_number_integer();
    try {
      std::size_t pos;
      if (proto.is_number_unsigned()) {
        if (!text.empty() && text[0] == '-') throw std::invalid_argument(text);
        const unsigned long long v = std::stoull(text, &pos);
        if (pos == text.size()) return v;
      } else if (integral) {
        const long long v = std::stoll(text, &pos);
        if (pos == text.size()) return v;
      } else {
        const double v = std::stod(text, &pos);
        if (pos == text.size()) return v;
      }
    } catch (...) {
    }
    throw ConfigError(key + ": '" + text + "' is not a " + (proto.is_number_unsigned() ? "non-negative integer" : integral ? "integer" : "number"));
  }

  ordered_json doc_;
  std::vector<std::string> keys_;
};

}  // namespace reff::harness
