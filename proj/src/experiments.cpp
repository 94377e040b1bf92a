#include "pivl/experiments.hpp"

#include <algorithm>
#include <stdexcept>

namespace pivl::experiments {

using nlohmann::json;

std::vector<AblationFlags> table_variants() {
  return {AblationFlags{}, AblationFlags{true, false, false}, AblationFlags{false, true, false},
          AblationFlags{false, true, true}};
}

eval::ProbeConfig probe_config(const Config& cfg) {
  eval::ProbeConfig p;
  p.seed = synthgen::mix_seed(cfg.train.seed, 201);
  return p;
}

StudentResult train_student(const synthgen::DatasetSplit& data, const pipeline::PromptArtifacts& prompts,
                            const Config& cfg, pipeline::TrainingLog* log) {
  StudentResult out;
  pipeline::Stage2Options opts;
  opts.encoder = pipeline::student_config(cfg);
  opts.flags = AblationFlags{false, true, true};
  opts.stage_tag = "student_prompts";
  const auto with = pipeline::run_stage2(data, prompts, cfg, opts, log);
  out.with_prompts = eval::evaluate(*with.encoder, with.head.get(), data, probe_config(cfg));

  opts.flags = AblationFlags{};
  opts.text_terms = false;
  opts.stage_tag = "student_baseline";
  const auto base = pipeline::run_stage2(data, prompts, cfg, opts, log);
  out.baseline = eval::evaluate(*base.encoder, nullptr, data, probe_config(cfg));

  out.student_params = encoders::count_inference_params(with.components(), true);
  auto teacher = encoders::make_image_encoder(cfg.encoder, 0);
  out.teacher_params = encoders::count_inference_params({teacher.get(), {}}, true);
  return out;
}

SeedRun run_seed(const Config& base, std::uint64_t seed, const std::vector<AblationFlags>& variants, bool student,
                 int workers, const Progress& progress) {
  Config cfg = base;
  cfg.train.seed = seed;
  cfg.data.seed = seed;
  cfg.data.workers = workers;
  auto note = [&](const std::string& s) {
    if (progress) progress("seed " + std::to_string(seed) + ": " + s);
  };
  SeedRun run;
  run.seed = seed;
  const auto data = synthgen::generate_dataset(cfg.data);
  note("stage1");
  const auto prompts = pipeline::run_stage1(data, cfg);
  for (const auto& flags : variants) {
    note("stage2 " + flags.name());
    pipeline::Stage2Options opts;
    opts.flags = flags;
    const auto res = pipeline::run_stage2(data, prompts, cfg, opts);
    run.variants[flags.name()] = eval::evaluate(*res.encoder, res.head.get(), data, probe_config(cfg), workers);
  }
  if (student) {
    note("student");
    run.student = train_student(data, prompts, cfg);
  }
  return run;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

AblationTable tabulate(const std::vector<SeedRun>& runs, const std::vector<AblationFlags>& variants) {
  AblationTable t;
  for (const auto& r : runs) t.seeds.push_back(r.seed);
  for (const auto& flags : variants) {
    VariantRow row;
    row.name = flags.name();
    for (const auto& r : runs) {
      const auto& rep = r.variants.at(row.name);
      row.rank1.push_back(rep.rank(1));
      row.map.push_back(rep.map);
      row.probe.push_back(rep.consistency.part_probe_acc);
      row.intra.push_back(rep.consistency.intra_part_sim);
      row.inter.push_back(rep.consistency.inter_part_sim);
    }
    row.med_rank1 = median(row.rank1);
    row.med_map = median(row.map);
    row.med_probe = median(row.probe);
    row.med_intra = median(row.intra);
    row.med_inter = median(row.inter);
    t.rows.push_back(std::move(row));
  }
  const auto b = std::find_if(t.rows.begin(), t.rows.end(), [](const VariantRow& r) { return r.name == "B"; });
  if (b != t.rows.end()) {
    const VariantRow ref = *b;
    for (auto& r : t.rows) {
      r.d_rank1 = r.med_rank1 - ref.med_rank1;
      r.d_map = r.med_map - ref.med_map;
      r.d_probe = r.med_probe - ref.med_probe;
    }
  }
  return t;
}

AblationTable ablation_harness(const Config& cfg, int workers, const Progress& progress) {
  const auto variants = table_variants();
  std::vector<SeedRun> runs;
  for (int s = 0; s < cfg.train.ablation_seeds; ++s)
    runs.push_back(run_seed(cfg, cfg.train.seed + static_cast<std::uint64_t>(s), variants, false, workers, progress));
  return tabulate(runs, variants);
}

json AblationTable::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows)
    rows_j.push_back({{"variant", r.name},
                      {"rank1", r.med_rank1},
                      {"map", r.med_map},
                      {"part_probe_acc", r.med_probe},
                      {"intra_part_sim", r.med_intra},
                      {"inter_part_sim", r.med_inter},
                      {"delta_rank1", r.d_rank1},
                      {"delta_map", r.d_map},
                      {"delta_part_probe_acc", r.d_probe},
                      {"per_seed", {{"rank1", r.rank1}, {"map", r.map}, {"part_probe_acc", r.probe}}}});
  return {{"seeds", seeds}, {"rows", rows_j}};
}

}  // namespace pivl::experiments
