#pragma once

#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"

// Strict object reader over nlohmann::json: every key must be consumed by a
// get/require/child call, and finish() rejects leftovers by path.

namespace us3l::detail {

class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path)
      : json_(j), path_(std::move(path)) {
    if (!json_.is_object())
      throw std::invalid_argument("config: " + path_ + " must be an object");
  }

  bool has(const std::string& key) const { return json_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!json_.contains(key)) return fallback;
    try {
      return json_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config: bad value for " + path_ + "." +
                                  key + ": " + e.what());
    }
  }

  template <typename T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!json_.contains(key))
      throw std::invalid_argument("config: missing required key " + path_ +
                                  "." + key);
    try {
      return json_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config: bad value for " + path_ + "." +
                                  key + ": " + e.what());
    }
  }

  // Marks the key consumed and returns the child object (empty object when
  // absent) for nested strict reading.
  nlohmann::json child(const std::string& key) {
    seen_.insert(key);
    if (!json_.contains(key)) return nlohmann::json::object();
    return json_.at(key);
  }

  std::string child_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (auto it = json_.begin(); it != json_.end(); ++it)
      if (!seen_.contains(it.key()))
        throw std::invalid_argument(
            "config: unknown key '" +
            (path_.empty() ? it.key() : path_ + "." + it.key()) + "'");
  }

 private:
  const nlohmann::json& json_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace us3l::detail
