#include "pivl/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace pivl {

using nlohmann::json;

double TrainConfig::stage2_lr() const { return lr_stage2.value_or(3e-3); }

int TrainConfig::milestone_epoch(int which) const {
  const double f = which == 1 ? milestone1 : milestone2;
  return static_cast<int>(std::lround(f * stage2_epochs));
}

int TrainConfig::steps_per_epoch(int train_samples) const {
  const int batch = P * K;
  return (train_samples + batch - 1) / batch;
}

namespace {

json render_json(const synthgen::RenderConfig& r) {
  return {{"height", r.height},
          {"width", r.width},
          {"num_parts", r.num_parts},
          {"body_fraction", r.body_fraction},
          {"scale_jitter", r.scale_jitter},
          {"max_shift_x", r.max_shift_x},
          {"max_shift_y", r.max_shift_y},
          {"brightness_jitter", r.brightness_jitter},
          {"camera_cast", r.camera_cast},
          {"pixel_noise", r.pixel_noise},
          {"clutter_blobs", r.clutter_blobs}};
}

// Reads known keys from a section and rejects anything else.
class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }
  ~Reader() = default;

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + section_ + "." + key + "' has the wrong type");
    }
  }
  template <typename T>
  void get(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }
  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + section_ + "." + it.key() + "'");
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const Config& c) {
  const auto& d = c.data;
  const auto& e = c.encoder;
  const auto& l = c.loss;
  const auto& t = c.train;
  json j;
  j["data"] = {{"render", render_json(d.render)},
               {"train_identities", d.train_identities},
               {"test_identities", d.test_identities},
               {"instances_per_identity", d.instances_per_identity},
               {"cameras", d.cameras},
               {"queries_per_identity", d.queries_per_identity},
               {"color_separation", d.color_separation}};
  j["encoder"] = {{"variant", encoders::variant_name(e.variant)},
                  {"channels", e.channels},
                  {"last_stride", e.last_stride},
                  {"embed_dim", e.embed_dim},
                  {"vit_dim", e.vit_dim},
                  {"vit_depth", e.vit_depth},
                  {"patch", e.patch},
                  {"text_dim", e.text_dim},
                  {"max_tokens", e.max_tokens},
                  {"include_c3", c.fusion.include_c3}};
  j["loss"] = {{"tau", l.tau},
               {"label_smoothing", l.label_smoothing},
               {"margin", l.margin},
               {"logit_scale", l.logit_scale},
               {"weights", {{"id", l.weights.id}, {"tri", l.weights.tri}, {"i2tce", l.weights.i2tce},
                            {"align", l.weights.align}}},
               {"cells_per_image", l.cells_per_image},
               {"background_weight", l.background_weight}};
  j["train"] = {{"stage1_id_epochs", t.stage1_id_epochs},
                {"stage1_part_epochs", t.stage1_part_epochs},
                {"stage2_epochs", t.stage2_epochs},
                {"P", t.P},
                {"K", t.K},
                {"lr_stage1", t.lr_stage1},
                {"lr_stage2", t.lr_stage2 ? json(*t.lr_stage2) : json(nullptr)},
                {"milestone1", t.milestone1},
                {"milestone2", t.milestone2},
                {"warmup_fraction", t.warmup_fraction},
                {"warmup_factor", t.warmup_factor},
                {"weight_decay", t.weight_decay},
                {"context_tokens", t.context_tokens},
                {"student_width", t.student_width},
                {"ablation_seeds", t.ablation_seeds},
                {"seed", t.seed},
                {"augment", {{"enabled", t.augment.enabled},
                             {"pad", t.augment.pad},
                             {"flip_prob", t.augment.flip_prob},
                             {"erase_prob", t.augment.erase_prob},
                             {"erase_area_min", t.augment.erase_area_min},
                             {"erase_area_max", t.augment.erase_area_max},
                             {"erase_aspect_min", t.augment.erase_aspect_min}}}};
  return j;
}

Config config_from_json(const json& j) {
  Config c;
  Reader root(j, "<root>");
  if (const json* s = root.sub("data")) {
    Reader r(*s, "data");
    if (const json* rs = r.sub("render")) {
      Reader rr(*rs, "data.render");
      auto& x = c.data.render;
      rr.get("height", x.height);
      rr.get("width", x.width);
      rr.get("num_parts", x.num_parts);
      rr.get("body_fraction", x.body_fraction);
      rr.get("scale_jitter", x.scale_jitter);
      rr.get("max_shift_x", x.max_shift_x);
      rr.get("max_shift_y", x.max_shift_y);
      rr.get("brightness_jitter", x.brightness_jitter);
      rr.get("camera_cast", x.camera_cast);
      rr.get("pixel_noise", x.pixel_noise);
      rr.get("clutter_blobs", x.clutter_blobs);
      rr.finish();
    }
    r.get("train_identities", c.data.train_identities);
    r.get("test_identities", c.data.test_identities);
    r.get("instances_per_identity", c.data.instances_per_identity);
    r.get("cameras", c.data.cameras);
    r.get("queries_per_identity", c.data.queries_per_identity);
    r.get("color_separation", c.data.color_separation);
    r.finish();
  }
  if (const json* s = root.sub("encoder")) {
    Reader r(*s, "encoder");
    std::string variant = encoders::variant_name(c.encoder.variant);
    r.get("variant", variant);
    try {
      c.encoder.variant = encoders::parse_variant(variant);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    r.get("channels", c.encoder.channels);
    r.get("last_stride", c.encoder.last_stride);
    r.get("embed_dim", c.encoder.embed_dim);
    r.get("vit_dim", c.encoder.vit_dim);
    r.get("vit_depth", c.encoder.vit_depth);
    r.get("patch", c.encoder.patch);
    r.get("text_dim", c.encoder.text_dim);
    r.get("max_tokens", c.encoder.max_tokens);
    r.get("include_c3", c.fusion.include_c3);
    r.finish();
  }
  if (const json* s = root.sub("loss")) {
    Reader r(*s, "loss");
    r.get("tau", c.loss.tau);
    r.get("label_smoothing", c.loss.label_smoothing);
    r.get("margin", c.loss.margin);
    r.get("logit_scale", c.loss.logit_scale);
    if (const json* w = r.sub("weights")) {
      Reader rw(*w, "loss.weights");
      rw.get("id", c.loss.weights.id);
      rw.get("tri", c.loss.weights.tri);
      rw.get("i2tce", c.loss.weights.i2tce);
      rw.get("align", c.loss.weights.align);
      rw.finish();
    }
    r.get("cells_per_image", c.loss.cells_per_image);
    r.get("background_weight", c.loss.background_weight);
    r.finish();
  }
  if (const json* s = root.sub("train")) {
    Reader r(*s, "train");
    auto& t = c.train;
    r.get("stage1_id_epochs", t.stage1_id_epochs);
    r.get("stage1_part_epochs", t.stage1_part_epochs);
    r.get("stage2_epochs", t.stage2_epochs);
    r.get("P", t.P);
    r.get("K", t.K);
    r.get("lr_stage1", t.lr_stage1);
    r.get("lr_stage2", t.lr_stage2);
    r.get("milestone1", t.milestone1);
    r.get("milestone2", t.milestone2);
    r.get("warmup_fraction", t.warmup_fraction);
    r.get("warmup_factor", t.warmup_factor);
    r.get("weight_decay", t.weight_decay);
    r.get("context_tokens", t.context_tokens);
    r.get("student_width", t.student_width);
    r.get("ablation_seeds", t.ablation_seeds);
    r.get("seed", t.seed);
    if (const json* a = r.sub("augment")) {
      Reader ra(*a, "train.augment");
      ra.get("enabled", t.augment.enabled);
      ra.get("pad", t.augment.pad);
      ra.get("flip_prob", t.augment.flip_prob);
      ra.get("erase_prob", t.augment.erase_prob);
      ra.get("erase_area_min", t.augment.erase_area_min);
      ra.get("erase_area_max", t.augment.erase_area_max);
      ra.get("erase_aspect_min", t.augment.erase_aspect_min);
      ra.finish();
    }
    r.finish();
  }
  root.finish();
  c.encoder.image_height = c.data.render.height;
  c.encoder.image_width = c.data.render.width;
  c.fusion.dim = c.encoder.embed_dim;
  if (c.encoder.variant == encoders::Variant::Vit && !c.train.lr_stage2) c.train.lr_stage2 = 5e-6;
  validate(c);
  return c;
}

void validate(const Config& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  const auto& r = c.data.render;
  need(r.height > 0 && r.width > 0 && r.height % 16 == 0 && r.width % 16 == 0,
       "data.render height/width must be positive multiples of 16");
  need(r.num_parts >= 2 && r.num_parts <= synthgen::kMaxParts, "data.render.num_parts must be in [2,20]");
  need(c.data.train_identities >= 2, "data.train_identities must be >= 2");
  need(c.data.test_identities >= 1, "data.test_identities must be >= 1");
  need(c.data.cameras >= 2, "data.cameras must be >= 2 (query protocol needs a second camera)");
  need(c.data.instances_per_identity >= 2, "data.instances_per_identity must be >= 2");
  need(c.data.color_separation >= 0.0, "data.color_separation must be >= 0");
  need(c.encoder.embed_dim > 0 && c.encoder.text_dim > 0, "encoder dims must be > 0");
  need(c.encoder.patch == 8, "encoder.patch must be 8 (token grid sits at stride 8)");
  need(c.encoder.last_stride == 2, "encoder.last_stride must be 2 at this image scale");
  for (int ch : c.encoder.channels) need(ch > 0, "encoder.channels must be > 0");
  try {
    losses::validate(c.loss);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto& t = c.train;
  need(t.stage1_id_epochs >= 0 && t.stage1_part_epochs >= 0, "stage-1 epochs must be >= 0");
  need(t.stage2_epochs >= 1, "train.stage2_epochs must be >= 1");
  need(t.P >= 2 && t.K >= 2, "train.P and train.K must be >= 2");
  need(t.P <= c.data.train_identities, "train.P exceeds the number of train identities");
  need(t.lr_stage1 > 0.0 && t.stage2_lr() > 0.0, "learning rates must be > 0");
  need(t.milestone1 > 0.0 && t.milestone1 < t.milestone2 && t.milestone2 < 1.0,
       "milestones must satisfy 0 < milestone1 < milestone2 < 1");
  need(t.milestone_epoch(1) < t.milestone_epoch(2), "milestone epochs must be strictly increasing");
  need(t.warmup_fraction >= 0.0 && t.warmup_fraction < t.milestone1, "warmup must end before the first milestone");
  need(t.warmup_factor > 0.0 && t.warmup_factor <= 1.0, "train.warmup_factor must be in (0,1]");
  need(t.context_tokens >= 0, "train.context_tokens must be >= 0");
  need(5 + t.context_tokens + 1 <= c.encoder.max_tokens, "part prompt would exceed encoder.max_tokens");
  need(t.student_width > 0.0 && t.student_width <= 1.0, "train.student_width must be in (0,1]");
  need(t.ablation_seeds >= 1, "train.ablation_seeds must be >= 1");
  need(t.augment.pad >= 0, "train.augment.pad must be >= 0");
  need(t.augment.erase_area_min > 0.0 && t.augment.erase_area_min <= t.augment.erase_area_max &&
           t.augment.erase_area_max < 1.0,
       "erase area range must satisfy 0 < min <= max < 1");
  need(t.augment.erase_aspect_min > 0.0 && t.augment.erase_aspect_min <= 1.0, "erase_aspect_min must be in (0,1]");
}

void apply_override(json& j, const std::string& dotted, const std::string& value) {
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("malformed override path '" + dotted + "'");
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    if (!node->is_object()) throw ConfigError("override path '" + dotted + "' descends into a non-object");
    start = dot + 1;
  }
}

std::string config_digest(const Config& cfg) {
  const std::string s = to_json(cfg).dump();  // object keys are sorted
  return nn::hex64(nn::fnv1a(s.data(), s.size()));
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config '" + path + "' is not valid JSON");
  return config_from_json(j);
}

}  // namespace pivl
