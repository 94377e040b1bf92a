#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivl/eval.hpp"
#include "pivl/pipeline.hpp"

namespace pivl::experiments {

using pipeline::AblationFlags;

// Table-2 variants in report order.
std::vector<AblationFlags> table_variants();

struct StudentResult {
  eval::RetrievalReport with_prompts;
  eval::RetrievalReport baseline;
  std::size_t student_params = 0;  // deployed
  std::size_t teacher_params = 0;  // deployed
};

// Trains the half-width student twice on the same batches: with the frozen
// prompts' text terms and π-VL alignment (P,F), and with L_id + L_tri only.
StudentResult train_student(const synthgen::DatasetSplit& data, const pipeline::PromptArtifacts& prompts,
                            const Config& cfg, pipeline::TrainingLog* log = nullptr);

using Progress = std::function<void(const std::string&)>;

struct SeedRun {
  std::uint64_t seed = 0;
  std::map<std::string, eval::RetrievalReport> variants;  // keyed by flags.name()
  std::optional<StudentResult> student;
};

// One seed: generate data, one shared stage-1 run, then a stage-2 run and an
// evaluation per variant (and optionally the student pair).
SeedRun run_seed(const Config& cfg, std::uint64_t seed, const std::vector<AblationFlags>& variants, bool student,
                 int workers = 1, const Progress& progress = {});

struct VariantRow {
  std::string name;
  std::vector<double> rank1, map, probe, intra, inter;  // per seed
  double med_rank1 = 0, med_map = 0, med_probe = 0, med_intra = 0, med_inter = 0;
  double d_rank1 = 0, d_map = 0, d_probe = 0;  // vs B
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<VariantRow> rows;
  nlohmann::json to_json() const;
};

double median(std::vector<double> v);

AblationTable tabulate(const std::vector<SeedRun>& runs, const std::vector<AblationFlags>& variants);

// Seeds seed, seed+1, ... (cfg.train.ablation_seeds of them).
AblationTable ablation_harness(const Config& cfg, int workers = 1, const Progress& progress = {});

eval::ProbeConfig probe_config(const Config& cfg);

}  // namespace pivl::experiments
