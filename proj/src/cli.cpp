#include "pivl/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "pivl/config.hpp"
#include "pivl/eval.hpp"
#include "pivl/experiments.hpp"
#include "pivl/manifest.hpp"
#include "pivl/pipeline.hpp"

namespace pivl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Options {
  std::string config;
  std::string out = ".";
  int workers = 1;
  std::string data = "data";
  std::string prompts = "prompts.ckpt";
  std::string checkpoint = "model.ckpt";
  std::string report = "report.json";
  std::string flags;
  std::vector<std::pair<std::string, std::string>> overrides;
};

// Anything CLI11 did not recognize must be a dotted config override.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos || a.size() < 4)
      throw UsageError("unknown flag or argument '" + a + "'");
    const std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw UsageError("override '" + a + "' needs a value");
      out.emplace_back(body, extras[++i]);
    }
  }
  return out;
}

Config resolve_config(const Options& o, const fs::path& root) {
  json j = json::object();
  if (!o.config.empty()) {
    const fs::path p = fs::path(o.config).is_absolute() || fs::exists(o.config) ? fs::path(o.config) : root / o.config;
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot open config '" + p.string() + "'");
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config '" + p.string() + "' is not valid JSON");
  }
  for (const auto& [k, v] : o.overrides) apply_override(j, k, v);
  if (const char* env = std::getenv("PIVL_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long s = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("");
      j["train"]["seed"] = s;
    } catch (const std::exception&) {
      throw ConfigError(std::string("PIVL_SEED='") + env + "' is not a non-negative integer");
    }
  }
  Config cfg = config_from_json(j);
  cfg.data.seed = cfg.train.seed;
  cfg.data.workers = o.workers;
  return cfg;
}

fs::path under(const fs::path& root, const std::string& p) {
  const fs::path x(p);
  return x.is_absolute() ? x : root / x;
}

void write_json(const fs::path& path, const json& j) { pipeline::write_file_atomic(path, j.dump(2) + "\n"); }

class Run {
 public:
  Run(std::string command, const Options& o, int argc, const char* const* argv)
      : o_(o), root_(o.out) {
    if (o.workers < 1) throw UsageError("--workers must be >= 1");
    fs::create_directories(root_);
    cfg_ = resolve_config(o, root_);
    m_.command = std::move(command);
    for (int i = 0; i < argc; ++i) m_.argv.emplace_back(argv[i]);
    m_.config_digest = config_digest(cfg_);
    m_.seed = cfg_.train.seed;
    m_.workers = o.workers;
    m_.started_at = manifest::utc_timestamp();
  }

  const Config& cfg() const { return cfg_; }
  const fs::path& root() const { return root_; }
  fs::path in(const std::string& p) {
    const fs::path full = under(root_, p);
    if (!fs::exists(full)) throw std::invalid_argument("input '" + full.string() + "' does not exist");
    m_.inputs.push_back(fs::path(p).is_absolute() ? full : fs::path(p));
    return full;
  }
  fs::path out(const std::string& p) {
    m_.artifacts.push_back(p);
    return under(root_, p);
  }
  void finish(const fs::path& manifest_dir) {
    m_.finished_at = manifest::utc_timestamp();
    m_.write(manifest_dir, root_);
  }

 private:
  Options o_;
  fs::path root_;
  Config cfg_;
  manifest::RunManifest m_;
};

synthgen::DatasetSplit load_data(Run& run, const std::string& data) {
  const fs::path p = run.in(data);
  auto split = synthgen::read_dataset(p);
  if (split.num_parts != run.cfg().data.render.num_parts)
    throw std::invalid_argument("dataset has " + std::to_string(split.num_parts) + " parts, config expects " +
                                std::to_string(run.cfg().data.render.num_parts));
  return split;
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "JSON config (defaults when omitted)");
  sub->add_option("--out", o.out, "output root; relative paths resolve against it");
  sub->add_option("--workers", o.workers, "worker threads (default 1)");
  sub->allow_extras();
}

int cmd_gen(const Options& o, int argc, const char* const* argv, std::ostream& out) {
  Run run("gen", o, argc, argv);
  auto split = synthgen::generate_dataset(run.cfg().data);
  synthgen::write_dataset(split, run.root());
  for (const char* s : {"train", "query", "gallery"}) run.out(s);
  run.out("dataset.json");
  run.finish(run.root());
  out << "generated " << split.train.size() << " train, " << split.query.size() << " query, " << split.gallery.size()
      << " gallery samples in " << run.root().string() << "\n";
  return kOk;
}

int cmd_stage1(const Options& o, int argc, const char* const* argv, std::ostream& out) {
  Run run("stage1", o, argc, argv);
  const auto data = load_data(run, o.data);
  const auto log_path = run.out("stage1_log.jsonl");
  pipeline::TrainingLog log(log_path);
  const auto prompts = pipeline::run_stage1(data, run.cfg(), &log);
  const auto ck = run.out(o.prompts);
  run.out(o.prompts + ".json");
  pipeline::save_prompts(ck, prompts, run.cfg());
  run.finish(run.root());
  out << "stage1: " << prompts.phase_a_losses.size() + prompts.phase_b_losses.size() << " steps, prompts -> "
      << ck.string() << "\n";
  return kOk;
}

int cmd_stage2(const Options& o, int argc, const char* const* argv, std::ostream& out) {
  Run run("stage2", o, argc, argv);
  pipeline::Stage2Options opts;
  opts.flags = pipeline::AblationFlags::parse(o.flags);
  const auto data = load_data(run, o.data);
  const auto prompts = pipeline::load_prompts(run.in(o.prompts), run.cfg());
  const auto log_path = run.out("stage2_log.jsonl");
  pipeline::TrainingLog log(log_path);
  const auto res = pipeline::run_stage2(data, prompts, run.cfg(), opts, &log);
  const auto ck = run.out(o.checkpoint);
  run.out(o.checkpoint + ".json");
  pipeline::save_stage2(ck, res, run.cfg());
  run.finish(run.root());
  out << "stage2 " << opts.flags.name() << ": checkpoint -> " << ck.string() << "\n";
  return kOk;
}

int cmd_eval(const Options& o, int argc, const char* const* argv, std::ostream& out) {
  Run run("eval", o, argc, argv);
  const auto data = load_data(run, o.data);
  const auto model = pipeline::load_stage2(run.in(o.checkpoint), run.cfg());
  const auto rep = eval::evaluate(*model.encoder, model.head.get(), data, experiments::probe_config(run.cfg()),
                                  o.workers);
  const json j = eval::report_json(rep, config_digest(run.cfg()));
  const auto path = run.out(o.report);
  write_json(path, j);
  run.finish(path.parent_path());
  out << j.dump() << "\n";
  return kOk;
}

int cmd_probe(const Options& o, int argc, const char* const* argv, std::ostream& out) {
  Run run("probe", o, argc, argv);
  const auto data = load_data(run, o.data);
  const auto model = pipeline::load_stage2(run.in(o.checkpoint), run.cfg());
  std::vector<synthgen::SyntheticSample> test = data.query;
  test.insert(test.end(), data.gallery.begin(), data.gallery.end());
  const auto c = eval::part_consistency_probe(*model.encoder, model.head.get(), test,
                                              experiments::probe_config(run.cfg()));
  const json j = {{"consistency",
                   {{"intra_part_sim", c.intra_part_sim},
                    {"inter_part_sim", c.inter_part_sim},
                    {"part_probe_acc", c.part_probe_acc}}},
                  {"config_digest", config_digest(run.cfg())}};
  const auto path = run.out(o.report == "report.json" ? "probe.json" : o.report);
  write_json(path, j);
  run.finish(path.parent_path());
  out << j.dump() << "\n";
  return kOk;
}

int cmd_ablate(const Options& o, int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Run run("ablate", o, argc, argv);
  const auto table = experiments::ablation_harness(run.cfg(), o.workers, [&](const std::string& s) {
    err << "[ablate] " << s << "\n";
  });
  json j = table.to_json();
  j["config_digest"] = config_digest(run.cfg());
  const auto path = run.out(o.report == "report.json" ? "ablation.json" : o.report);
  write_json(path, j);
  run.finish(path.parent_path());
  out << j.dump(2) << "\n";
  return kOk;
}

int cmd_transfer(const Options& o, int argc, const char* const* argv, std::ostream& out) {
  Run run("transfer", o, argc, argv);
  const auto data = load_data(run, o.data);
  const auto prompts = pipeline::load_prompts(run.in(o.prompts), run.cfg());
  const auto log_path = run.out("transfer_log.jsonl");
  pipeline::TrainingLog log(log_path);
  const auto res = experiments::train_student(data, prompts, run.cfg(), &log);
  const std::string digest = config_digest(run.cfg());
  const json j = {{"student_with_prompts", eval::report_json(res.with_prompts, digest)},
                  {"student_baseline", eval::report_json(res.baseline, digest)},
                  {"student_params", res.student_params},
                  {"teacher_params", res.teacher_params},
                  {"config_digest", digest}};
  const auto path = run.out(o.report == "report.json" ? "transfer.json" : o.report);
  write_json(path, j);
  run.finish(path.parent_path());
  out << j.dump(2) << "\n";
  return kOk;
}

int cmd_export(const Options& o, int argc, const char* const* argv, std::ostream& out) {
  Run run("export", o, argc, argv);
  const auto data = load_data(run, o.data);
  const auto model = pipeline::load_stage2(run.in(o.checkpoint), run.cfg());
  for (const auto* split : {&data.query, &data.gallery}) {
    std::vector<int> ids, cams;
    for (const auto& s : *split) {
      ids.push_back(s.identity);
      cams.push_back(s.camera);
    }
    const auto g = eval::make_gallery(eval::embed(*model.encoder, *split), ids, cams);
    const std::string name = split == &data.query ? "query_embeddings.csv" : "gallery_embeddings.csv";
    eval::write_embeddings_csv(run.out(name), g);
  }
  run.finish(run.root());
  out << "exported embeddings to " << run.root().string() << "\n";
  return kOk;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Part-informed visual-language person re-ID on synthetic data", "pivl"};
  app.require_subcommand(1, 1);
  Options o;
  struct Cmd {
    CLI::App* app;
    std::string name;
  };
  std::vector<Cmd> cmds;
  auto add = [&](const char* name, const char* desc) {
    CLI::App* sub = app.add_subcommand(name, desc);
    add_common(sub, o);
    cmds.push_back({sub, name});
    return sub;
  };
  add("gen", "render a synthetic dataset into --out");
  auto* s1 = add("stage1", "tune identity and part prompts (encoders frozen)");
  auto* s2 = add("stage2", "train the image encoder with frozen prompts");
  auto* ev = add("eval", "retrieval metrics and consistency probe for a checkpoint");
  auto* pr = add("probe", "within-part consistency probe only");
  auto* ab = add("ablate", "B / B+H / B+P / B+P+F over several seeds");
  auto* tr = add("transfer", "half-width student with and without frozen prompts");
  auto* ex = add("export", "write query/gallery embedding CSVs");
  for (auto* sub : {s1, s2, ev, pr, tr, ex}) sub->add_option("--data", o.data, "dataset directory");
  for (auto* sub : {s1, s2, tr}) sub->add_option("--prompts", o.prompts, "prompt checkpoint");
  for (auto* sub : {s2, ev, pr, ex}) sub->add_option("--checkpoint", o.checkpoint, "stage-2 checkpoint");
  for (auto* sub : {ev, pr, ab, tr}) sub->add_option("--report", o.report, "report JSON path");
  s2->add_option("--flags", o.flags, "ablation flags: comma list of H, P, F (empty = B)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << app.help();
    err << "pivl: error: " << e.what() << "\n";
    return kValidation;
  }

  const Cmd* active = nullptr;
  for (const auto& c : cmds)
    if (c.app->parsed()) active = &c;
  try {
    o.overrides = parse_overrides(active->app->remaining());
    const std::string& n = active->name;
    if (n == "gen") return cmd_gen(o, argc, argv, out);
    if (n == "stage1") return cmd_stage1(o, argc, argv, out);
    if (n == "stage2") return cmd_stage2(o, argc, argv, out);
    if (n == "eval") return cmd_eval(o, argc, argv, out);
    if (n == "probe") return cmd_probe(o, argc, argv, out);
    if (n == "ablate") return cmd_ablate(o, argc, argv, out, err);
    if (n == "transfer") return cmd_transfer(o, argc, argv, out);
    if (n == "export") return cmd_export(o, argc, argv, out);
  } catch (const UsageError& e) {
    err << active->app->help();
    err << "pivl: error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::invalid_argument& e) {
    err << "pivl: error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    err << "pivl: runtime failure: " << e.what() << "\n";
    return kRuntime;
  }
  return kRuntime;
}

}  // namespace pivl::cli
