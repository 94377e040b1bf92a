#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace pivl::manifest {

// SHA-1 of "blob <size>\0<content>", as git computes object ids.
std::string git_blob_sha1(const std::string& content);
std::string git_blob_sha1_file(const std::filesystem::path& path);
// For a directory: SHA-1 over "<blob sha> <relative path>\n" lines of every
// regular file, sorted by path. For a file: its blob hash.
std::string content_hash(const std::filesystem::path& path);

std::string utc_timestamp();

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_digest;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string started_at;
  std::string finished_at;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> artifacts;

  // Hashes every listed path relative to `root` and writes
  // <dir>/manifest_<command>.json atomically.
  nlohmann::json to_json(const std::filesystem::path& root) const;
  void write(const std::filesystem::path& dir, const std::filesystem::path& root) const;
};

}  // namespace pivl::manifest
