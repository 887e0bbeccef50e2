#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace moelab {

/// Record of one CLI invocation, written beside its outputs. Holds no
/// timestamps, so identical invocations produce identical manifests.
struct RunManifest {
  std::string command;
  nlohmann::json parameters = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;

  /// Hashes every input; throws IoError if one is unreadable.
  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

std::string tool_version();

}  // namespace moelab
