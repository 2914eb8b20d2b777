#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"

#include "warm/error.hpp"
#include "warm/matrix.hpp"

namespace warm {

// Rejects keys outside `allowed`, naming the offending key and section.
void reject_unknown_keys(const nlohmann::json& j, std::string_view section,
                         std::initializer_list<std::string_view> allowed);

// Reads j[key] into out when present; wrong types raise a Config error naming the field.
template <typename T>
void read_field(const nlohmann::json& j, std::string_view section, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config,
         std::string(section) + "." + key + ": " + e.what());
  }
}

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j, const char* name);

// FNV-1a 64 over the compact dump; used as a content hash in sidecars.
std::uint64_t content_hash(const nlohmann::json& j);
std::string hash_hex(std::uint64_t h);

}  // namespace warm
