#include "pivl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "pivl/losses.hpp"

namespace pivl::pipeline {

using nlohmann::json;
using synthgen::SyntheticSample;

namespace {

constexpr double kInputMean = 0.5;
constexpr double kInputStd = 0.25;
constexpr double kEraseFill[3] = {0.4914, 0.4822, 0.4465};

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::string part_stage_name(bool phase_b) { return phase_b ? "stage1_part" : "stage1_id"; }

// Downsampled parsing and stride-8 feature rows of one image.
struct CellView {
  std::vector<std::uint8_t> parts;
  int height = 0;
  int width = 0;
};

CellView cells_of(std::span<const std::uint8_t> parsing, int h, int w) {
  CellView v;
  v.parts = synthgen::downsample_parsing(parsing, h, w, 8);
  v.height = h / 8;
  v.width = w / 8;
  return v;
}

}  // namespace

// ------------------------------------------------------------------ flags
AblationFlags AblationFlags::parse(const std::string& csv) {
  AblationFlags f;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok.erase(std::remove_if(tok.begin(), tok.end(), ::isspace), tok.end());
    if (tok.empty() || tok == "B") continue;
    if (tok == "H") f.H = true;
    else if (tok == "P") f.P = true;
    else if (tok == "F") f.F = true;
    else throw std::invalid_argument("unknown ablation flag '" + tok + "' (expected H, P or F)");
  }
  f.validate();
  return f;
}

void AblationFlags::validate() const {
  if (H && P) throw std::invalid_argument("ablation flags H and P are mutually exclusive prompt modes");
  if (F && !H && !P) throw std::invalid_argument("ablation flag F needs a part-prompt mode (H or P)");
}

std::string AblationFlags::name() const {
  std::string s = "B";
  if (H) s += "+H";
  if (P) s += "+P";
  if (F) s += "+F";
  return s;
}

std::string AblationFlags::csv() const {
  std::string s;
  for (auto [on, c] : {std::pair{H, "H"}, {P, "P"}, {F, "F"}})
    if (on) s += (s.empty() ? "" : ",") + std::string(c);
  return s;
}

// ---------------------------------------------------------------- sampling
std::vector<int> pk_sample(std::span<const SyntheticSample> samples, int P, int K, Rng& rng) {
  require(P >= 1 && K >= 1, "pk_sample: P and K must be >= 1");
  std::map<int, std::vector<int>> by_id;
  for (std::size_t i = 0; i < samples.size(); ++i) by_id[samples[i].identity].push_back(static_cast<int>(i));
  require(static_cast<int>(by_id.size()) >= P, "pk_sample: need " + std::to_string(P) + " identities, have " +
                                                   std::to_string(by_id.size()));
  std::vector<int> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);
  // Partial Fisher-Yates for P distinct identities.
  for (int i = 0; i < P; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(ids.size()) - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(P) * K);
  for (int i = 0; i < P; ++i) {
    std::vector<int> pool = by_id[ids[i]];
    const int n = static_cast<int>(pool.size());
    if (n >= K) {
      for (int k = 0; k < K; ++k) {
        std::uniform_int_distribution<int> pick(k, n - 1);
        std::swap(pool[k], pool[pick(rng)]);
        out.push_back(pool[k]);
      }
    } else {
      std::uniform_int_distribution<int> pick(0, n - 1);
      for (int k = 0; k < K; ++k) out.push_back(pool[pick(rng)]);
    }
  }
  return out;
}

// ------------------------------------------------------------ augmentation
AugmentedSample augment(const SyntheticSample& s, const AugmentConfig& cfg, Rng& rng) {
  const int H = s.height, W = s.width;
  AugmentedSample out{s.image, s.parsing};
  if (!cfg.enabled) return out;
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  if (cfg.pad > 0) {
    std::uniform_int_distribution<int> off(-cfg.pad, cfg.pad);
    const int dy = off(rng), dx = off(rng);
    Tensor img({3, H, W}, 0.0);
    std::vector<std::uint8_t> par(static_cast<std::size_t>(H) * W, 0);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int sy = y + dy, sx = x + dx;
        if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
        for (int c = 0; c < 3; ++c) img.data[(c * H + y) * W + x] = out.image.data[(c * H + sy) * W + sx];
        par[y * W + x] = out.parsing[sy * W + sx];
      }
    out.image = std::move(img);
    out.parsing = std::move(par);
  }
  if (u01(rng) < cfg.flip_prob) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W / 2; ++x) {
        for (int c = 0; c < 3; ++c)
          std::swap(out.image.data[(c * H + y) * W + x], out.image.data[(c * H + y) * W + (W - 1 - x)]);
        std::swap(out.parsing[y * W + x], out.parsing[y * W + (W - 1 - x)]);
      }
  }
  if (u01(rng) < cfg.erase_prob) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double area = (cfg.erase_area_min + (cfg.erase_area_max - cfg.erase_area_min) * u01(rng)) * H * W;
      const double log_a = std::log(cfg.erase_aspect_min);
      const double aspect = std::exp(log_a + (-2.0 * log_a) * u01(rng));
      const int eh = static_cast<int>(std::lround(std::sqrt(area * aspect)));
      const int ew = static_cast<int>(std::lround(std::sqrt(area / aspect)));
      if (eh < 1 || ew < 1 || eh >= H || ew >= W) continue;
      const int y0 = std::uniform_int_distribution<int>(0, H - eh)(rng);
      const int x0 = std::uniform_int_distribution<int>(0, W - ew)(rng);
      for (int y = y0; y < y0 + eh; ++y)
        for (int x = x0; x < x0 + ew; ++x) {
          for (int c = 0; c < 3; ++c) out.image.data[(c * H + y) * W + x] = kEraseFill[c];
          out.parsing[y * W + x] = synthgen::kIgnore;
        }
      break;
    }
  }
  return out;
}

Tensor make_image_batch(std::span<const Tensor* const> images) {
  require(!images.empty(), "empty image batch");
  const Shape& s = images.front()->shape;
  require(s.size() == 3 && s[0] == 3, "images must be [3,H,W]");
  const std::size_t per = images.front()->numel();
  Tensor out({static_cast<int>(images.size()), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i]->shape == s, "image batch has mixed sizes");
    for (std::size_t k = 0; k < per; ++k) out.data[i * per + k] = (images[i]->data[k] - kInputMean) / kInputStd;
  }
  return out;
}

Tensor make_image_batch(std::span<const SyntheticSample> samples) {
  std::vector<const Tensor*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s.image);
  return make_image_batch(ptrs);
}

// --------------------------------------------------------------- schedules
double stage1_lr(const TrainConfig& cfg, int epoch) {
  const int total = cfg.stage1_id_epochs + cfg.stage1_part_epochs;
  if (total <= 0) return cfg.lr_stage1;
  return cfg.lr_stage1 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total));
}

double stage2_lr(const TrainConfig& cfg, int epoch) {
  const double base = cfg.stage2_lr();
  const double warm = cfg.warmup_fraction * cfg.stage2_epochs;
  if (epoch < warm) return base * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * epoch / warm);
  if (epoch >= cfg.milestone_epoch(2)) return base * 0.01;
  if (epoch >= cfg.milestone_epoch(1)) return base * 0.1;
  return base;
}

// ----------------------------------------------------------------- logging
TrainingLog::TrainingLog(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw std::runtime_error("cannot open training log '" + path.string() + "'");
}

void TrainingLog::write(long step, const std::string& stage, const losses::LossTerms& terms) {
  json j = {{"step", step}, {"stage", stage}};
  for (const auto& [name, v] : terms.terms) j[name] = v.item();
  if (out_.is_open()) out_ << j.dump() << '\n';
  entries_.push_back(std::move(j));
}

// ------------------------------------------------------------------ models
SeedPlan SeedPlan::from(std::uint64_t seed) {
  using synthgen::mix_seed;
  return {mix_seed(seed, 101), mix_seed(seed, 102), mix_seed(seed, 103), mix_seed(seed, 104),
          mix_seed(seed, 105), mix_seed(seed, 106), mix_seed(seed, 107)};
}

encoders::EncoderConfig student_config(const Config& cfg) {
  encoders::EncoderConfig s = cfg.encoder;
  s.variant = encoders::Variant::Conv;
  for (int& c : s.channels) c = std::max(1, static_cast<int>(std::lround(c * cfg.train.student_width)));
  return s;
}

std::string rng_digest(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  const std::string s = os.str();
  return nn::hex64(nn::fnv1a(s.data(), s.size()));
}

encoders::ModelComponents Stage2Result::components() const {
  encoders::ModelComponents m;
  m.image = encoder.get();
  if (classifier) m.training_only.push_back(classifier.get());
  if (head) m.training_only.push_back(head.get());
  return m;
}

PromptArtifacts make_prompt_artifacts(const Config& cfg, int num_identities) {
  const SeedPlan seeds = SeedPlan::from(cfg.train.seed);
  PromptArtifacts a;
  a.text = std::make_unique<encoders::TextEncoder>(cfg.encoder.text_dim, cfg.encoder.embed_dim,
                                                   cfg.encoder.max_tokens, seeds.text);
  a.store = std::make_unique<prompts::PromptContextStore>(
      num_identities, cfg.train.context_tokens, synthgen::PartVocabulary::standard(cfg.data.render.num_parts),
      cfg.encoder.text_dim, seeds.prompts);
  a.text_digest = nn::parameter_digest(*a.text);
  return a;
}

namespace {

// Stride-8 alignment rows [B*h*w, d] and their grid size.
Var alignment_rows(const fusion::FusionHead& head, const encoders::FeaturePyramid& pyr, int& h, int& w) {
  const Var map = head.forward(pyr);
  h = map.dim(2);
  w = map.dim(3);
  return ag::nchw_to_rows(map);
}

}  // namespace

PromptArtifacts run_stage1(const synthgen::DatasetSplit& data, const Config& cfg, TrainingLog* log) {
  const SeedPlan seeds = SeedPlan::from(cfg.train.seed);
  const auto& train = data.train;
  require(!train.empty(), "stage1: empty training split");
  PromptArtifacts out = make_prompt_artifacts(cfg, data.num_train_identities);
  auto& store = *out.store;
  const auto& text = *out.text;

  auto encoder = encoders::make_image_encoder(cfg.encoder, seeds.image);
  encoder->set_trainable(false);
  out.encoder_digest = nn::parameter_digest(*encoder);
  fusion::FusionConfig head_cfg = cfg.fusion;
  head_cfg.mode = fusion::HeadMode::Fused;
  fusion::FusionHead head(cfg.encoder.variant, encoder->tap_channels(), head_cfg, seeds.head);
  head.set_trainable(false);

  // Encoders are frozen and stage 1 uses no augmentation, so every visual
  // feature is computed once up front.
  const int n = static_cast<int>(train.size()), d = cfg.encoder.embed_dim;
  const bool need_cells = cfg.train.stage1_part_epochs > 0;
  Tensor globals({n, d});
  std::vector<Tensor> cell_feats(n);
  std::vector<CellView> cell_views(n);
  {
    ag::NoGradGuard guard;
    constexpr int kChunk = 32;
    for (int s = 0; s < n; s += kChunk) {
      const int e = std::min(n, s + kChunk);
      const auto chunk = std::span(train).subspan(s, e - s);
      const auto pyr = encoder->forward(Var(make_image_batch(chunk)));
      std::copy(pyr.global.value().data.begin(), pyr.global.value().data.end(),
                globals.data.begin() + static_cast<std::ptrdiff_t>(s) * d);
      if (!need_cells) continue;
      int h = 0, w = 0;
      const Var rows = alignment_rows(head, pyr, h, w);
      const int cells = h * w;
      for (int i = s; i < e; ++i) {
        cell_feats[i] = ag::slice_rows(rows, (i - s) * cells, (i - s + 1) * cells).value();
        cell_views[i] = cells_of(train[i].parsing, train[i].height, train[i].width);
        require(cell_views[i].height == h && cell_views[i].width == w, "stage1: alignment grid mismatch");
      }
    }
  }

  std::vector<Var*> params;
  for (int i = 0; i < store.num_identities(); ++i) params.push_back(&store.context(i));
  store.set_context_trainable(true);
  if (cfg.train.context_tokens == 0) params.clear();
  nn::Adam opt(params, nn::Adam::Options{});

  Rng rng(seeds.stage1);
  const int steps_per_epoch = cfg.train.steps_per_epoch(n);
  const int total_epochs = cfg.train.stage1_id_epochs + cfg.train.stage1_part_epochs;
  long step = 0;
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const bool phase_b = epoch >= cfg.train.stage1_id_epochs;
    const double lr = stage1_lr(cfg.train, epoch);
    for (int it = 0; it < steps_per_epoch; ++it, ++step) {
      const auto idx = pk_sample(train, cfg.train.P, cfg.train.K, rng);
      losses::PromptBatch batch;
      std::map<int, int> slot;
      std::vector<Var> id_texts;
      std::vector<int> rows;
      Tensor g({static_cast<int>(idx.size()), d});
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const int y = train[idx[b]].identity;
        if (!slot.count(y)) {
          slot[y] = static_cast<int>(id_texts.size());
          id_texts.push_back(text.forward(store.identity_prompt(y)));
        }
        rows.push_back(slot[y]);
        batch.identities.push_back(y);
        std::copy_n(globals.data.begin() + static_cast<std::ptrdiff_t>(idx[b]) * d, d,
                    g.data.begin() + static_cast<std::ptrdiff_t>(b) * d);
      }
      batch.image_globals = Var(std::move(g));
      batch.identity_texts = ag::index_rows(ag::concat_rows(id_texts), rows);

      if (phase_b) {
        std::map<std::int64_t, int> key_slot;
        std::vector<Var> part_texts;
        std::vector<int> text_rows;
        std::vector<double> feat;
        for (const int i : idx) {
          const CellView& view = cell_views[i];
          std::vector<int> parts(view.parts.begin(), view.parts.end());
          for (int& p : parts)
            if (p == synthgen::kIgnore) p = -1;
          const auto picked = losses::stratified_cells(parts, cfg.loss.cells_per_image, rng);
          const int y = train[i].identity;
          for (const int c : picked) {
            const std::int64_t key = losses::cell_key(y, parts[c]);
            if (!key_slot.count(key)) {
              key_slot[key] = static_cast<int>(part_texts.size());
              part_texts.push_back(text.forward(store.part_prompt(y, parts[c])));
            }
            text_rows.push_back(key_slot[key]);
            batch.cell_keys.push_back(key);
            const Tensor& f = cell_feats[i];
            feat.insert(feat.end(), f.data.begin() + static_cast<std::ptrdiff_t>(c) * d,
                        f.data.begin() + static_cast<std::ptrdiff_t>(c + 1) * d);
          }
        }
        batch.cell_features = Var(Tensor({static_cast<int>(batch.cell_keys.size()), d}, std::move(feat)));
        batch.cell_texts = ag::index_rows(ag::concat_rows(part_texts), text_rows);
      }

      const auto terms = losses::prompt_objective(batch, cfg.loss, phase_b);
      (phase_b ? out.phase_b_losses : out.phase_a_losses).push_back(terms.total.item());
      if (log) log->write(step, part_stage_name(phase_b), terms);
      if (!params.empty()) {
        ag::backward(terms.total);
        opt.step(lr);
      }
    }
  }
  store.set_context_trainable(false);
  if (nn::parameter_digest(*encoder) != out.encoder_digest)
    throw std::logic_error("stage1 modified the frozen image encoder");
  if (nn::parameter_digest(text) != out.text_digest) throw std::logic_error("stage1 modified the frozen text encoder");
  out.rng_digest = rng_digest(rng);
  return out;
}

Stage2Result run_stage2(const synthgen::DatasetSplit& data, const PromptArtifacts& prompts, const Config& cfg,
                        const Stage2Options& opts, TrainingLog* log) {
  opts.flags.validate();
  require(opts.text_terms || !opts.flags.align(), "stage2: part alignment needs the text terms");
  const SeedPlan seeds = SeedPlan::from(cfg.train.seed);
  const auto& train = data.train;
  require(!train.empty(), "stage2: empty training split");
  const encoders::EncoderConfig enc_cfg = opts.encoder.value_or(cfg.encoder);
  const int d = enc_cfg.embed_dim;
  if (opts.text_terms) {
    require(prompts.store && prompts.text, "stage2: prompts missing");
    if (prompts.text->embed_dim() != d)
      throw std::invalid_argument("image embedding dim " + std::to_string(d) + " does not match prompt dim " +
                                  std::to_string(prompts.text->embed_dim()));
    require(prompts.store->num_identities() == data.num_train_identities,
            "stage2: prompt store covers " + std::to_string(prompts.store->num_identities()) + " identities, data has " +
                std::to_string(data.num_train_identities));
  }

  Stage2Result res;
  res.encoder = encoders::make_image_encoder(enc_cfg, seeds.image);
  // Stage 2 starts from the encoder the prompts were tuned against.
  if (opts.text_terms && !opts.encoder && prompts.encoder_digest != 0 &&
      nn::parameter_digest(*res.encoder) != prompts.encoder_digest)
    throw std::invalid_argument("prompts were tuned against a different image encoder (seed or architecture mismatch)");
  res.flags = opts.flags;
  res.text_terms = opts.text_terms;
  res.encoder->set_trainable(true);
  {
    nn::Rng crng(seeds.classifier);
    res.classifier = std::make_unique<nn::Linear>(d, data.num_train_identities, crng, false, 0.01);
  }
  if (opts.flags.align()) {
    fusion::FusionConfig hc = cfg.fusion;
    hc.dim = d;
    hc.mode = opts.flags.F ? fusion::HeadMode::Fused : fusion::HeadMode::C4Only;
    res.head = std::make_unique<fusion::FusionHead>(enc_cfg.variant, res.encoder->tap_channels(), hc, seeds.head);
  }

  Var identity_texts;
  Tensor part_table;
  const int num_parts = cfg.data.render.num_parts;
  if (opts.text_terms) identity_texts = Var(prompts::identity_text_table(*prompts.store, *prompts.text));
  if (opts.flags.align())
    part_table = prompts::part_text_table(*prompts.store, *prompts.text,
                                          opts.flags.P ? prompts::PartPromptMode::IdentityAware
                                                       : prompts::PartPromptMode::ParsingOnly);

  std::vector<nn::NamedParameter> named = res.encoder->parameters();
  for (auto& p : res.classifier->parameters()) named.push_back(p);
  if (res.head)
    for (auto& p : res.head->parameters()) named.push_back(p);
  nn::Adam::Options aopt;
  aopt.weight_decay = cfg.train.weight_decay;
  nn::Adam opt(nn::trainable(named), aopt);

  Rng rng(seeds.stage2);
  const int steps_per_epoch = cfg.train.steps_per_epoch(static_cast<int>(train.size()));
  long step = 0;
  for (int epoch = 0; epoch < cfg.train.stage2_epochs; ++epoch) {
    const double lr = stage2_lr(cfg.train, epoch);
    for (int it = 0; it < steps_per_epoch; ++it, ++step) {
      const auto idx = pk_sample(train, cfg.train.P, cfg.train.K, rng);
      std::vector<AugmentedSample> aug;
      aug.reserve(idx.size());
      for (const int i : idx) aug.push_back(augment(train[i], cfg.train.augment, rng));
      std::vector<const Tensor*> imgs;
      for (const auto& a : aug) imgs.push_back(&a.image);
      const auto pyr = res.encoder->forward(Var(make_image_batch(imgs)));

      losses::ReidBatch batch;
      batch.globals = pyr.global;
      for (const int i : idx) batch.labels.push_back(train[i].identity);
      batch.id_logits = res.classifier->forward(pyr.global);
      if (opts.text_terms) batch.identity_texts = identity_texts;
      if (res.head) {
        int h = 0, w = 0;
        batch.aligned_cells = alignment_rows(*res.head, pyr, h, w);
        const int cells = h * w;
        batch.cell_targets = Tensor({static_cast<int>(idx.size()) * cells, d});
        for (std::size_t b = 0; b < idx.size(); ++b) {
          const CellView view = cells_of(aug[b].parsing, train[idx[b]].height, train[idx[b]].width);
          require(view.height == h && view.width == w, "stage2: alignment grid does not match target grid");
          const int y = batch.labels[b];
          for (int c = 0; c < cells; ++c) {
            const int p = view.parts[c];
            const bool ignored = p == synthgen::kIgnore;
            batch.cell_ignore.push_back(ignored ? 1 : 0);
            batch.cell_weights.push_back(p == 0 ? cfg.loss.background_weight : 1.0);
            if (ignored) continue;
            const int row = opts.flags.P ? y * num_parts + p : p;
            std::copy_n(part_table.data.begin() + static_cast<std::ptrdiff_t>(row) * d, d,
                        batch.cell_targets.data.begin() + (static_cast<std::ptrdiff_t>(b) * cells + c) * d);
          }
        }
      }
      const auto terms = losses::overall_objective(batch, cfg.loss);
      if (log) log->write(step, opts.stage_tag, terms);
      ag::backward(terms.total);
      opt.step(lr);
    }
  }
  res.encoder->set_trainable(false);
  res.epochs = cfg.train.stage2_epochs;
  res.rng_digest = rng_digest(rng);
  return res;
}

// ------------------------------------------------------------- checkpoints
void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<BlobEntry> blob_entries(const std::string& module_name, const nn::Module& module, bool training_only,
                                    const std::string& prefix) {
  std::vector<BlobEntry> out;
  for (const auto& p : module.parameters())
    if (p.name.rfind(prefix, 0) == 0) out.push_back({module_name, p.name, p.var, training_only});
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const BlobEntry> entries, json meta) {
  std::string blob;
  json table = json::array();
  std::set<std::pair<std::string, bool>> modules;
  for (const auto& e : entries) {
    const Tensor& t = e.var->value();
    table.push_back({{"module", e.module},
                     {"name", e.name},
                     {"shape", t.shape},
                     {"offset", blob.size() / sizeof(double)},
                     {"training_only", e.training_only}});
    blob.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
    modules.insert({e.module, e.training_only});
  }
  json mods = json::array();
  for (const auto& [name, to] : modules) mods.push_back({{"name", name}, {"training_only", to}});
  meta["parameters"] = std::move(table);
  meta["modules"] = std::move(mods);
  meta["blob_digest"] = nn::hex64(nn::fnv1a(blob.data(), blob.size()));
  meta["blob_bytes"] = blob.size();
  write_file_atomic(path, blob);
  write_file_atomic(path.string() + ".json", meta.dump(2) + "\n");
}

json read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".json");
  if (!in) throw std::runtime_error("missing checkpoint sidecar '" + path.string() + ".json'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("corrupt checkpoint sidecar '" + path.string() + ".json'");
  return j;
}

json load_checkpoint(const std::filesystem::path& path, std::span<const BlobEntry> entries) {
  json meta = read_sidecar(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint blob '" + path.string() + "'");
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (nn::hex64(nn::fnv1a(blob.data(), blob.size())) != meta.value("blob_digest", ""))
    throw std::runtime_error("checkpoint blob '" + path.string() + "' does not match its sidecar digest");
  std::map<std::pair<std::string, std::string>, const json*> index;
  for (const auto& p : meta.at("parameters")) index[{p.at("module"), p.at("name")}] = &p;
  for (const auto& e : entries) {
    auto it = index.find({e.module, e.name});
    if (it == index.end())
      throw std::runtime_error("checkpoint '" + path.string() + "' lacks " + e.module + "/" + e.name);
    const Shape shape = it->second->at("shape").get<Shape>();
    Tensor& t = e.var->mutable_value();
    if (shape != t.shape)
      throw std::runtime_error("checkpoint shape " + shape_str(shape) + " for " + e.module + "/" + e.name +
                               " does not match model shape " + shape_str(t.shape));
    const std::size_t off = it->second->at("offset").get<std::size_t>();
    if ((off + t.numel()) * sizeof(double) > blob.size()) throw std::runtime_error("checkpoint blob truncated");
    std::memcpy(t.data.data(), blob.data() + off * sizeof(double), t.numel() * sizeof(double));
  }
  return meta;
}

json encoder_to_json(const encoders::EncoderConfig& e) {
  return {{"variant", encoders::variant_name(e.variant)},
          {"image_height", e.image_height},
          {"image_width", e.image_width},
          {"channels", e.channels},
          {"last_stride", e.last_stride},
          {"embed_dim", e.embed_dim},
          {"vit_dim", e.vit_dim},
          {"vit_depth", e.vit_depth},
          {"patch", e.patch},
          {"text_dim", e.text_dim},
          {"max_tokens", e.max_tokens}};
}

encoders::EncoderConfig encoder_from_json(const json& j) {
  encoders::EncoderConfig e;
  e.variant = encoders::parse_variant(j.at("variant").get<std::string>());
  e.image_height = j.at("image_height");
  e.image_width = j.at("image_width");
  e.channels = j.at("channels").get<std::array<int, 4>>();
  e.last_stride = j.at("last_stride");
  e.embed_dim = j.at("embed_dim");
  e.vit_dim = j.at("vit_dim");
  e.vit_depth = j.at("vit_depth");
  e.patch = j.at("patch");
  e.text_dim = j.at("text_dim");
  e.max_tokens = j.at("max_tokens");
  return e;
}

void save_prompts(const std::filesystem::path& path, const PromptArtifacts& prompts, const Config& cfg) {
  const auto entries = blob_entries("prompts", *prompts.store, false, "context.");
  json ids = json::array();
  for (int i = 0; i < prompts.store->num_identities(); ++i) ids.push_back(i);
  json meta = {{"kind", "prompts"},
               {"stage", "stage1"},
               {"epoch", cfg.train.stage1_id_epochs + cfg.train.stage1_part_epochs},
               {"M", prompts.store->context_tokens()},
               {"identities", ids},
               {"vocab_hash", nn::hex64(prompts.store->vocab_hash())},
               {"text_digest", nn::hex64(prompts.text_digest)},
               {"encoder_digest", nn::hex64(prompts.encoder_digest)},
               {"num_parts", prompts.store->parts().size()},
               {"text_dim", prompts.store->text_dim()},
               {"embed_dim", prompts.text->embed_dim()},
               {"seed", cfg.train.seed},
               {"rng_digest", prompts.rng_digest},
               {"config_digest", config_digest(cfg)}};
  save_checkpoint(path, entries, std::move(meta));
}

PromptArtifacts load_prompts(const std::filesystem::path& path, const Config& cfg) {
  const json meta = read_sidecar(path);
  if (meta.value("kind", "") != "prompts") throw std::runtime_error("'" + path.string() + "' is not a prompt checkpoint");
  const int n = static_cast<int>(meta.at("identities").size());
  if (meta.at("M").get<int>() != cfg.train.context_tokens)
    throw std::invalid_argument("prompt checkpoint has M=" + std::to_string(meta.at("M").get<int>()) +
                                ", config expects " + std::to_string(cfg.train.context_tokens));
  Config c = cfg;
  c.train.seed = meta.at("seed").get<std::uint64_t>();
  PromptArtifacts a = make_prompt_artifacts(c, n);
  if (nn::hex64(a.store->vocab_hash()) != meta.at("vocab_hash").get<std::string>())
    throw std::runtime_error("prompt vocabulary hash mismatch for '" + path.string() + "'");
  load_checkpoint(path, blob_entries("prompts", *a.store, false, "context."));
  a.encoder_digest = std::stoull(meta.at("encoder_digest").get<std::string>(), nullptr, 16);
  a.rng_digest = meta.value("rng_digest", "");
  return a;
}

void save_stage2(const std::filesystem::path& path, const Stage2Result& r, const Config& cfg) {
  std::vector<BlobEntry> entries = blob_entries("encoder", *r.encoder, false);
  for (auto& e : blob_entries("classifier", *r.classifier, true)) entries.push_back(e);
  if (r.head)
    for (auto& e : blob_entries("fusion_head", *r.head, true)) entries.push_back(e);
  json meta = {{"kind", "stage2"},
               {"stage", "stage2"},
               {"epoch", r.epochs},
               {"architecture", encoder_to_json(r.encoder->config())},
               {"flags", r.flags.csv()},
               {"variant_name", r.flags.name()},
               {"text_terms", r.text_terms},
               {"num_identities", r.classifier->out_features()},
               {"head", r.head ? json{{"mode", r.head->config().mode == fusion::HeadMode::Fused ? "fused" : "c4"},
                                      {"include_c3", r.head->config().include_c3},
                                      {"dim", r.head->config().dim},
                                      {"training_only", true}}
                               : json(nullptr)},
               {"seed", cfg.train.seed},
               {"rng_digest", r.rng_digest},
               {"config_digest", config_digest(cfg)}};
  save_checkpoint(path, entries, std::move(meta));
}

Stage2Result load_stage2(const std::filesystem::path& path, const Config& cfg) {
  const json meta = read_sidecar(path);
  if (meta.value("kind", "") != "stage2") throw std::runtime_error("'" + path.string() + "' is not a stage-2 checkpoint");
  Stage2Result r;
  r.flags = AblationFlags::parse(meta.at("flags").get<std::string>());
  r.text_terms = meta.at("text_terms");
  r.epochs = meta.at("epoch");
  r.rng_digest = meta.value("rng_digest", "");
  const auto enc = encoder_from_json(meta.at("architecture"));
  r.encoder = encoders::make_image_encoder(enc, 0);
  nn::Rng crng(0);
  r.classifier = std::make_unique<nn::Linear>(enc.embed_dim, meta.at("num_identities").get<int>(), crng, false);
  std::vector<BlobEntry> entries = blob_entries("encoder", *r.encoder, false);
  for (auto& e : blob_entries("classifier", *r.classifier, true)) entries.push_back(e);
  if (!meta.at("head").is_null()) {
    fusion::FusionConfig hc = cfg.fusion;
    hc.mode = meta["head"].at("mode") == "fused" ? fusion::HeadMode::Fused : fusion::HeadMode::C4Only;
    hc.include_c3 = meta["head"].at("include_c3");
    hc.dim = meta["head"].at("dim");
    r.head = std::make_unique<fusion::FusionHead>(enc.variant, r.encoder->tap_channels(), hc, 0);
    for (auto& e : blob_entries("fusion_head", *r.head, true)) entries.push_back(e);
  }
  load_checkpoint(path, entries);
  r.encoder->set_trainable(false);
  return r;
}

}  // namespace pivl::pipeline
