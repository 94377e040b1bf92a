#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pivl/config.hpp"
#include "pivl/encoders.hpp"
#include "pivl/fusion.hpp"
#include "pivl/prompts.hpp"
#include "pivl/synthgen.hpp"

namespace pivl::pipeline {

using ag::Var;
using Rng = std::mt19937_64;

// Table-2 toggles. H and P select the part-prompt mode, F the fusion head.
struct AblationFlags {
  bool H = false;
  bool P = false;
  bool F = false;

  static AblationFlags parse(const std::string& csv);  // "", "H", "P,F", ...
  std::string name() const;                             // "B", "B+H", "B+P", "B+P+F", ...
  std::string csv() const;
  bool align() const { return H || P; }
  void validate() const;
};

// ----------------------------------------------------------------- sampling
// P distinct identities, K instances each (with replacement only when an
// identity has fewer than K). Returns indices into `samples`.
std::vector<int> pk_sample(std::span<const synthgen::SyntheticSample> samples, int P, int K, Rng& rng);

// ------------------------------------------------------------- augmentation
struct AugmentedSample {
  Tensor image;                       // [3,H,W]
  std::vector<std::uint8_t> parsing;  // H*W, erased pixels = kIgnore
};

// Pad-and-crop, horizontal flip and random erasing applied jointly to image
// and parsing. Padding counts as background; erasing fills the image with
// the per-channel mean and marks the parsing as kIgnore.
AugmentedSample augment(const synthgen::SyntheticSample& s, const AugmentConfig& cfg, Rng& rng);

// Stacks images into [B,3,H,W] with the fixed input normalization.
Tensor make_image_batch(std::span<const Tensor* const> images);
Tensor make_image_batch(std::span<const synthgen::SyntheticSample> samples);

// ---------------------------------------------------------------- schedules
// Cosine over all stage-1 epochs (phase B continues phase A's curve).
double stage1_lr(const TrainConfig& cfg, int epoch);
// Linear warmup from warmup_factor*base, then base * {1, 0.1, 0.01} split at
// the two milestone epochs.
double stage2_lr(const TrainConfig& cfg, int epoch);

// ---------------------------------------------------------------- logging
// JSON-lines training log: {"step": n, "stage": s, "<term>": value, ...}.
class TrainingLog {
 public:
  TrainingLog() = default;
  explicit TrainingLog(const std::filesystem::path& path);
  void write(long step, const std::string& stage, const losses::LossTerms& terms);
  const std::vector<nlohmann::json>& entries() const { return entries_; }

 private:
  std::ofstream out_;
  std::vector<nlohmann::json> entries_;
};

// ---------------------------------------------------------------- models
// Seeds for each randomly initialized component, derived from the run seed.
struct SeedPlan {
  std::uint64_t image;
  std::uint64_t text;
  std::uint64_t prompts;
  std::uint64_t head;
  std::uint64_t stage1;
  std::uint64_t stage2;
  std::uint64_t classifier;
  static SeedPlan from(std::uint64_t seed);
};

encoders::EncoderConfig student_config(const Config& cfg);

struct PromptArtifacts {
  std::unique_ptr<encoders::TextEncoder> text;
  std::unique_ptr<prompts::PromptContextStore> store;
  std::uint64_t encoder_digest = 0;  // image encoder the prompts were tuned against
  std::uint64_t text_digest = 0;
  std::vector<double> phase_a_losses;  // per step
  std::vector<double> phase_b_losses;
  std::string rng_digest;
};

struct Stage2Result {
  std::unique_ptr<encoders::ImageEncoder> encoder;
  std::unique_ptr<nn::Linear> classifier;
  std::unique_ptr<fusion::FusionHead> head;  // null for B and student-baseline
  AblationFlags flags;
  bool text_terms = true;
  int epochs = 0;
  std::string rng_digest;

  encoders::ModelComponents components() const;
};

// Builds the frozen text tower and prompt store for `num_identities` train
// identities from the run seed.
PromptArtifacts make_prompt_artifacts(const Config& cfg, int num_identities);

// Phase A: L_stage1 for stage1_id_epochs; phase B: L_stage1 + L_part for
// stage1_part_epochs. Only context tokens receive updates.
PromptArtifacts run_stage1(const synthgen::DatasetSplit& data, const Config& cfg, TrainingLog* log = nullptr);

struct Stage2Options {
  AblationFlags flags;
  bool text_terms = true;  // false: L_id + L_tri only (student baseline)
  std::optional<encoders::EncoderConfig> encoder;  // override (student)
  std::string stage_tag = "stage2";
};

Stage2Result run_stage2(const synthgen::DatasetSplit& data, const PromptArtifacts& prompts, const Config& cfg,
                        const Stage2Options& opts, TrainingLog* log = nullptr);

// ------------------------------------------------------------- checkpoints
struct BlobEntry {
  std::string module;
  std::string name;
  Var* var;
  bool training_only;
};

// Every parameter of `module`, optionally only names starting with `prefix`.
std::vector<BlobEntry> blob_entries(const std::string& module_name, const nn::Module& module, bool training_only,
                                    const std::string& prefix = "");

// Writes <path> (raw little-endian doubles in entry order) and <path>.json
// (sidecar: meta plus a parameter table), each via temp-file-then-rename.
void save_checkpoint(const std::filesystem::path& path, std::span<const BlobEntry> entries, nlohmann::json meta);
// Fills every entry from the checkpoint; returns the sidecar.
nlohmann::json load_checkpoint(const std::filesystem::path& path, std::span<const BlobEntry> entries);
nlohmann::json read_sidecar(const std::filesystem::path& path);

nlohmann::json encoder_to_json(const encoders::EncoderConfig& e);
encoders::EncoderConfig encoder_from_json(const nlohmann::json& j);

void save_prompts(const std::filesystem::path& path, const PromptArtifacts& prompts, const Config& cfg);
PromptArtifacts load_prompts(const std::filesystem::path& path, const Config& cfg);

void save_stage2(const std::filesystem::path& path, const Stage2Result& result, const Config& cfg);
Stage2Result load_stage2(const std::filesystem::path& path, const Config& cfg);

// Atomic text write: temp file then rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string rng_digest(const Rng& rng);

}  // namespace pivl::pipeline
