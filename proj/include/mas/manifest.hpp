#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace mas {

/// Written to <run_dir>/manifest.json before work starts; finalize() fills
/// the end time once, after which the file is left alone.
struct RunManifest {
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string command;
  std::string git_describe;
  std::string start_time;
  std::string end_time;
  std::vector<std::string> artifacts;

  void write(const std::string& path) const;
};

std::string now_iso8601();
std::string git_describe_string();

RunManifest begin_manifest(const std::string& command, const nlohmann::json& config,
                           std::uint64_t seed);

}  // namespace mas
