#pragma once

#include <json.hpp>
#include <set>
#include <string>

#include "sgdc/errors.hpp"

namespace sgdc {

// Reads an object field by field and rejects keys nobody asked for.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  // Leaves `out` untouched when the key is absent.
  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const nlohmann::json* sub(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace sgdc
