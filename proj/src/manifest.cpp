#include "pivl/manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pivl/pipeline.hpp"

namespace pivl::manifest {

namespace fs = std::filesystem;

namespace {

std::string sha1_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("SHA-1 digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string git_blob_sha1(const std::string& content) {
  std::string obj = "blob " + std::to_string(content.size());
  obj.push_back('\0');
  obj += content;
  return sha1_hex(obj);
}

std::string git_blob_sha1_file(const fs::path& path) { return git_blob_sha1(read_all(path)); }

std::string content_hash(const fs::path& path) {
  if (!fs::is_directory(path)) return git_blob_sha1_file(path);
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), path).generic_string());
  std::sort(rel.begin(), rel.end());
  std::string listing;
  for (const auto& r : rel) listing += git_blob_sha1_file(path / r) + " " + r + "\n";
  return sha1_hex(listing);
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json RunManifest::to_json(const fs::path& root) const {
  auto entries = [&](const std::vector<fs::path>& paths) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : paths) {
      const fs::path full = p.is_absolute() ? p : root / p;
      arr.push_back({{"path", p.generic_string()},
                     {"kind", fs::is_directory(full) ? "tree" : "blob"},
                     {"sha1", content_hash(full)}});
    }
    return arr;
  };
  return {{"command", command},
          {"argv", argv},
          {"config_digest", config_digest},
          {"seed", seed},
          {"workers", workers},
          {"started_at", started_at},
          {"finished_at", finished_at},
          {"inputs", entries(inputs)},
          {"artifacts", entries(artifacts)}};
}

void RunManifest::write(const fs::path& dir, const fs::path& root) const {
  pipeline::write_file_atomic(dir / ("manifest_" + command + ".json"), to_json(root).dump(2) + "\n");
}

}  // namespace pivl::manifest
