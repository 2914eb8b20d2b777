#include "warm/json_util.hpp"

#include <algorithm>
#include <cstdio>

namespace warm {

void reject_unknown_keys(const nlohmann::json& j, std::string_view section,
                         std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) fail(ErrorKind::Config, std::string(section) + ": expected a JSON object");
  for (const auto& item : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      fail(ErrorKind::Config, std::string(section) + ": unknown field '" + item.key() + "'");
  }
}

nlohmann::json matrix_to_json(const Matrix& m) {
  auto rows = nlohmann::json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j, const char* name) {
  if (!j.is_array()) fail(ErrorKind::Checkpoint, std::string(name) + ": expected array of rows");
  std::vector<std::vector<double>> rows;
  try {
    rows = j.get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Checkpoint, std::string(name) + ": " + e.what());
  }
  try {
    return Matrix::from_rows(rows);
  } catch (const Error& e) {
    fail(ErrorKind::Checkpoint, std::string(name) + ": " + e.what());
  }
}

std::uint64_t content_hash(const nlohmann::json& j) {
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace warm
