#include "mas/manifest.hpp"

#include <cstdio>
#include <ctime>
#include <fstream>

#include "mas/common.hpp"
#include "mas/weights_io.hpp"

namespace mas {

std::string now_iso8601() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string git_describe_string() {
  FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
  if (!pipe) return "unknown";
  char buf[128] = {0};
  std::string out;
  while (fgets(buf, sizeof(buf), pipe)) out += buf;
  pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

RunManifest begin_manifest(const std::string& command, const nlohmann::json& config,
                           std::uint64_t seed) {
  RunManifest m;
  m.command = command;
  m.config = config;
  m.seed = seed;
  m.git_describe = git_describe_string();
  m.start_time = now_iso8601();
  return m;
}

void RunManifest::write(const std::string& path) const {
  nlohmann::json j{{"command", command},
                   {"config", config},
                   {"seed", seed},
                   {"git_describe", git_describe},
                   {"start_time", start_time},
                   {"end_time", end_time},
                   {"artifacts", artifacts}};
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io", "cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) fail("io", "failed writing " + path);
}

std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace mas
