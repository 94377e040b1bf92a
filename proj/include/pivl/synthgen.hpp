#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pivl/tensor.hpp"

// Deterministic renderer of synthetic "pedestrians": stacked axis-aligned
// body-part regions over a cluttered background, with an exact parsing map.
namespace pivl::synthgen {

// Parsing id reserved for pixels that must not supervise anything
// (erased by augmentation).
inline constexpr std::uint8_t kIgnore = 255;
inline constexpr int kMaxParts = 20;

class PartVocabulary {
 public:
  // First `count` names of the fixed vocabulary; count in [2, 20].
  static PartVocabulary standard(int count = 5);

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int id) const;
  int id(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
};

using Rgb = std::array<double, 3>;

struct IdentitySpec {
  int identity = 0;
  // Index p-1 holds part p (background has no identity color).
  std::vector<Rgb> part_colors;
  std::vector<double> part_heights;  // relative band heights, each in (0,1)
  std::vector<double> part_widths;   // fraction of image width, each in (0,1)
};

struct RenderConfig {
  int height = 64;
  int width = 32;
  int num_parts = 5;
  double body_fraction = 0.8;   // body height / image height at scale 1
  double scale_jitter = 0.15;
  int max_shift_x = 3;
  int max_shift_y = 2;
  double brightness_jitter = 0.15;
  double camera_cast = 0.08;    // per-camera per-channel gain deviation
  double pixel_noise = 0.03;
  int clutter_blobs = 4;
};

struct SyntheticSample {
  Tensor image;                       // [3,H,W], values in [0,1] on the 8-bit grid
  std::vector<std::uint8_t> parsing;  // H*W part ids
  int height = 0;
  int width = 0;
  int identity = 0;
  int camera = 0;
};

struct DatasetConfig {
  RenderConfig render;
  int train_identities = 32;
  int test_identities = 16;
  int instances_per_identity = 8;
  int cameras = 4;
  int queries_per_identity = 2;
  double color_separation = 0.15;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct DatasetSplit {
  std::vector<SyntheticSample> train;
  std::vector<SyntheticSample> query;
  std::vector<SyntheticSample> gallery;
  int num_parts = 5;
  int num_train_identities = 0;  // train identities are 0..num_train_identities-1
};

// splitmix64-based combination used for counter-based seeding.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t sample_seed(std::uint64_t dataset_seed, int identity, int instance);

// Throws std::invalid_argument if any part would render with zero or
// sub-1% area at the smallest jittered scale.
void validate_spec(const IdentitySpec& spec, const RenderConfig& cfg);

SyntheticSample render_sample(const IdentitySpec& spec, std::uint64_t variation_seed, int camera,
                              const RenderConfig& cfg = {});

// Rejection-sampled identities; any two differ in at least one part color by
// >= separation (Euclidean RGB).
std::vector<IdentitySpec> make_identities(int count, const RenderConfig& cfg, double separation,
                                          std::uint64_t seed);

DatasetSplit generate_dataset(const DatasetConfig& cfg);

// Majority vote per stride x stride block, ignoring kIgnore pixels; ties go
// to the smaller id; fully ignored blocks yield kIgnore.
std::vector<std::uint8_t> downsample_parsing(std::span<const std::uint8_t> parsing, int height, int width,
                                             int stride);

// Nearest-centroid identity accuracy on per-part mean colors (ground-truth
// parsing), trained and scored on the same samples.
double part_color_separability(std::span<const SyntheticSample> samples, int num_parts);

// Every query identity has a gallery entry from another camera.
bool evaluable(const DatasetSplit& split);

// ---- on-disk format: <root>/{train,query,gallery}/ with binary PPM images,
// PGM parsing maps and a manifest.jsonl per split.
void write_dataset(const DatasetSplit& split, const std::filesystem::path& root);
DatasetSplit read_dataset(const std::filesystem::path& root);

void write_ppm(const std::filesystem::path& path, const Tensor& chw);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> pixels, int height, int width);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& height, int& width);

}  // namespace pivl::synthgen
