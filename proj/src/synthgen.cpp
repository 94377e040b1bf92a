#include "pivl/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace pivl::synthgen {

namespace {

const std::array<const char*, kMaxParts> kPartNames = {
    "background", "head",  "torso", "legs",  "shoes",  "hat",   "hair",  "glove", "sunglasses", "coat",
    "socks",      "pants", "dress", "scarf", "skirt",  "face",  "arm",   "hand",  "belt",       "bag"};

// Small counter RNG with explicit float conversion so renders do not depend
// on the standard library's distribution implementations.
class SplitMix {
 public:
  explicit SplitMix(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(next() % static_cast<std::uint64_t>(hi - lo + 1));
  }
  double normal() {
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t state_;
};

struct Band {
  int y0, y1, x0, x1;
};

// Geometry of every body band for a given scale/shift; shared by the renderer
// and the spec validator so both see identical rounding.
std::vector<Band> layout(const IdentitySpec& spec, const RenderConfig& cfg, double scale, int dx, int dy) {
  const int parts = static_cast<int>(spec.part_heights.size());
  const int body_h = std::min(cfg.height, static_cast<int>(std::lround(cfg.body_fraction * cfg.height * scale)));
  const int top = std::clamp((cfg.height - body_h) / 2 + dy, 0, cfg.height - body_h);
  double total = 0.0;
  for (double h : spec.part_heights) total += h;
  std::vector<Band> bands(parts);
  double cum = 0.0;
  int prev = top;
  for (int p = 0; p < parts; ++p) {
    cum += spec.part_heights[p];
    const int next = top + static_cast<int>(std::lround(body_h * cum / total));
    const int w = std::clamp(static_cast<int>(std::lround(spec.part_widths[p] * cfg.width * scale)), 0, cfg.width);
    const int x0 = std::clamp(cfg.width / 2 + dx - w / 2, 0, cfg.width - w);
    bands[p] = {prev, next, x0, x0 + w};
    prev = next;
  }
  return bands;
}

int min_part_pixels(const RenderConfig& cfg) {
  return static_cast<int>(std::ceil(0.01 * cfg.height * cfg.width));
}

Rgb camera_gain(int camera, double cast) {
  SplitMix rng(mix_seed(0xca3e7aULL, static_cast<std::uint64_t>(camera)));
  return {1.0 + rng.uniform(-cast, cast), 1.0 + rng.uniform(-cast, cast), 1.0 + rng.uniform(-cast, cast)};
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

PartVocabulary PartVocabulary::standard(int count) {
  if (count < 2 || count > kMaxParts)
    throw std::invalid_argument("part vocabulary size must be in [2, 20], got " + std::to_string(count));
  PartVocabulary v;
  v.names_.assign(kPartNames.begin(), kPartNames.begin() + count);
  return v;
}

const std::string& PartVocabulary::name(int id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("unknown part id " + std::to_string(id));
  return names_[id];
}

int PartVocabulary::id(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw std::invalid_argument("unknown part name '" + name + "'");
  return static_cast<int>(it - names_.begin());
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  SplitMix m(a ^ (b * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
  m.next();
  return m.next();
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, int identity, int instance) {
  return mix_seed(mix_seed(dataset_seed, static_cast<std::uint64_t>(identity)), static_cast<std::uint64_t>(instance));
}

void validate_spec(const IdentitySpec& spec, const RenderConfig& cfg) {
  const std::size_t parts = static_cast<std::size_t>(cfg.num_parts - 1);
  if (cfg.num_parts < 2 || cfg.num_parts > kMaxParts) throw std::invalid_argument("num_parts must be in [2, 20]");
  if (cfg.height < 8 || cfg.width < 8 || cfg.height % 8 || cfg.width % 8)
    throw std::invalid_argument("image dims must be positive multiples of 8");
  if (spec.part_colors.size() != parts || spec.part_heights.size() != parts || spec.part_widths.size() != parts)
    throw std::invalid_argument("identity " + std::to_string(spec.identity) + ": expected " +
                                std::to_string(parts) + " part entries");
  for (std::size_t p = 0; p < parts; ++p) {
    const double h = spec.part_heights[p], w = spec.part_widths[p];
    if (!(h > 0.0 && h < 1.0) || !(w > 0.0 && w < 1.0))
      throw std::invalid_argument("identity " + std::to_string(spec.identity) + ": part " + std::to_string(p + 1) +
                                  " proportions must lie in (0,1)");
    for (double c : spec.part_colors[p])
      if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("part colors must lie in [0,1]");
  }
  const auto bands = layout(spec, cfg, 1.0 - cfg.scale_jitter, 0, 0);
  for (std::size_t p = 0; p < parts; ++p) {
    const int area = (bands[p].y1 - bands[p].y0) * (bands[p].x1 - bands[p].x0);
    if (area < min_part_pixels(cfg))
      throw std::invalid_argument("identity " + std::to_string(spec.identity) + ": part " + std::to_string(p + 1) +
                                  " would cover " + std::to_string(area) + " px (< 1% of image)");
  }
}

SyntheticSample render_sample(const IdentitySpec& spec, std::uint64_t variation_seed, int camera,
                              const RenderConfig& cfg) {
  validate_spec(spec, cfg);
  if (camera < 0) throw std::invalid_argument("camera must be non-negative");
  const int h = cfg.height, w = cfg.width;
  SplitMix rng(mix_seed(variation_seed, static_cast<std::uint64_t>(camera) + 1));

  SyntheticSample s;
  s.height = h;
  s.width = w;
  s.identity = spec.identity;
  s.camera = camera;
  s.image = Tensor({3, h, w});
  s.parsing.assign(static_cast<std::size_t>(h) * w, 0);
  auto px = [&](int c, int y, int x) -> double& { return s.image.data[(static_cast<std::size_t>(c) * h + y) * w + x]; };

  // Background: camera-tinted base, vertical shading and clutter blobs.
  const Rgb cam = camera_gain(camera, 0.3);
  Rgb bg;
  for (int c = 0; c < 3; ++c) bg[c] = std::clamp(0.5 * (cam[c] - 0.7) / 0.6 + 0.5 * rng.uniform(0.1, 0.9), 0.0, 1.0);
  const double shade = rng.uniform(-0.15, 0.15);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) px(c, y, x) = bg[c] + shade * (static_cast<double>(y) / h - 0.5);
  for (int b = 0; b < cfg.clutter_blobs; ++b) {
    const int bh = rng.integer(3, h / 4), bw = rng.integer(2, w / 3);
    const int y0 = rng.integer(0, h - bh), x0 = rng.integer(0, w - bw);
    const Rgb col = {rng.uniform(), rng.uniform(), rng.uniform()};
    for (int y = y0; y < y0 + bh; ++y)
      for (int x = x0; x < x0 + bw; ++x)
        for (int c = 0; c < 3; ++c) px(c, y, x) = col[c];
  }

  // Person.
  const double scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter);
  const int dx = rng.integer(-cfg.max_shift_x, cfg.max_shift_x);
  const int dy = rng.integer(-cfg.max_shift_y, cfg.max_shift_y);
  const auto bands = layout(spec, cfg, scale, dx, dy);
  std::vector<int> area(bands.size(), 0);
  for (std::size_t p = 0; p < bands.size(); ++p) {
    const Band& band = bands[p];
    for (int y = band.y0; y < band.y1; ++y)
      for (int x = band.x0; x < band.x1; ++x) {
        for (int c = 0; c < 3; ++c) px(c, y, x) = spec.part_colors[p][c];
        s.parsing[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint8_t>(p + 1);
      }
  }
  for (std::uint8_t id : s.parsing)
    if (id > 0) ++area[id - 1];
  for (std::size_t p = 0; p < area.size(); ++p)
    if (area[p] < min_part_pixels(cfg))
      throw std::runtime_error("render_sample: part " + std::to_string(p + 1) + " lost area after layout");

  // Photometric variation.
  const double brightness = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter);
  const Rgb gain = camera_gain(camera, cfg.camera_cast);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) px(c, y, x) = quantize(px(c, y, x) * brightness * gain[c] + cfg.pixel_noise * rng.normal());
  return s;
}

std::vector<IdentitySpec> make_identities(int count, const RenderConfig& cfg, double separation, std::uint64_t seed) {
  if (count < 0) throw std::invalid_argument("identity count must be non-negative");
  const int parts = cfg.num_parts - 1;
  SplitMix rng(mix_seed(seed, 0x1d5ULL));
  static constexpr std::array<double, 4> kHeights5 = {0.15, 0.35, 0.38, 0.12};
  static constexpr std::array<double, 4> kWidths5 = {0.32, 0.62, 0.46, 0.52};

  std::vector<IdentitySpec> out;
  for (int id = 0; id < count; ++id) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw std::runtime_error("make_identities: cannot satisfy color separation");
      IdentitySpec s;
      s.identity = id;
      for (int p = 0; p < parts; ++p) {
        s.part_colors.push_back({rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)});
        if (cfg.num_parts == 5) {
          s.part_heights.push_back(kHeights5[p] * rng.uniform(0.85, 1.15));
          s.part_widths.push_back(kWidths5[p] * rng.uniform(0.85, 1.15));
        } else {
          s.part_heights.push_back(rng.uniform(0.5, 1.5) / parts);
          s.part_widths.push_back(rng.uniform(0.45, 0.75));
        }
      }
      bool separated = true;
      for (const auto& other : out) {
        double best = 0.0;
        for (int p = 0; p < parts; ++p) {
          double d2 = 0.0;
          for (int c = 0; c < 3; ++c) d2 += std::pow(s.part_colors[p][c] - other.part_colors[p][c], 2);
          best = std::max(best, std::sqrt(d2));
        }
        if (best < separation) {
          separated = false;
          break;
        }
      }
      if (!separated) continue;
      try {
        validate_spec(s, cfg);
      } catch (const std::invalid_argument&) {
        continue;
      }
      out.push_back(std::move(s));
      break;
    }
  }
  return out;
}

namespace {

struct Job {
  int identity;
  int instance;
  int camera;
};

std::vector<int> camera_assignment(std::uint64_t seed, int identity, int instances, int cameras) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    SplitMix rng(mix_seed(mix_seed(seed, 0xc0ffeeULL + attempt), static_cast<std::uint64_t>(identity)));
    std::vector<int> perm(cameras);
    for (int c = 0; c < cameras; ++c) perm[c] = c;
    for (int i = cameras - 1; i > 0; --i) std::swap(perm[i], perm[rng.integer(0, i)]);
    std::vector<int> cams(instances);
    for (int j = 0; j < instances; ++j) cams[j] = perm[j % cameras];
    if (std::count(cams.begin(), cams.end(), cams.front()) < instances) return cams;
    if (attempt > 64) throw std::runtime_error("camera assignment: identity on a single camera");
  }
}

}  // namespace

DatasetSplit generate_dataset(const DatasetConfig& cfg) {
  if (cfg.cameras < 2) throw std::invalid_argument("at least 2 cameras are required for cross-camera queries");
  if (cfg.instances_per_identity < 2) throw std::invalid_argument("at least 2 instances per identity are required");
  if (cfg.train_identities < 2 || cfg.test_identities < 1) throw std::invalid_argument("too few identities");
  if (cfg.queries_per_identity < 1 || cfg.queries_per_identity >= cfg.instances_per_identity ||
      cfg.queries_per_identity > cfg.cameras)
    throw std::invalid_argument("queries_per_identity must be in [1, min(cameras, instances-1)]");

  const int total_ids = cfg.train_identities + cfg.test_identities;
  const auto specs = make_identities(total_ids, cfg.render, cfg.color_separation, cfg.seed);

  std::vector<Job> jobs;
  for (int id = 0; id < total_ids; ++id) {
    const auto cams = camera_assignment(cfg.seed, id, cfg.instances_per_identity, cfg.cameras);
    for (int j = 0; j < cfg.instances_per_identity; ++j) jobs.push_back({id, j, cams[j]});
  }
  std::vector<SyntheticSample> rendered(jobs.size());
  const int workers = std::max(1, cfg.workers);
  auto work = [&](int start) {
    for (std::size_t i = static_cast<std::size_t>(start); i < jobs.size(); i += static_cast<std::size_t>(workers))
      rendered[i] = render_sample(specs[jobs[i].identity], sample_seed(cfg.seed, jobs[i].identity, jobs[i].instance),
                                  jobs[i].camera, cfg.render);
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work, t);
    for (auto& t : pool) t.join();
  }

  DatasetSplit split;
  split.num_parts = cfg.render.num_parts;
  split.num_train_identities = cfg.train_identities;
  const int n = cfg.instances_per_identity;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const Job& job = jobs[i];
    if (job.identity < cfg.train_identities) {
      split.train.push_back(std::move(rendered[i]));
      continue;
    }
    // Queries: the first instance on each of the first q distinct cameras.
    const std::size_t base = i - static_cast<std::size_t>(job.instance);
    std::vector<int> query_cams;
    bool is_query = false;
    for (int j = 0; j < n && static_cast<int>(query_cams.size()) < cfg.queries_per_identity; ++j) {
      const int cam = jobs[base + j].camera;
      if (std::find(query_cams.begin(), query_cams.end(), cam) != query_cams.end()) continue;
      query_cams.push_back(cam);
      is_query = is_query || j == job.instance;
    }
    (is_query ? split.query : split.gallery).push_back(std::move(rendered[i]));
  }
  if (!evaluable(split)) throw std::runtime_error("generate_dataset: produced an unevaluable query");
  return split;
}

std::vector<std::uint8_t> downsample_parsing(std::span<const std::uint8_t> parsing, int height, int width, int stride) {
  if (stride <= 0 || height % stride || width % stride)
    throw std::invalid_argument("stride " + std::to_string(stride) + " does not divide " + std::to_string(height) +
                                "x" + std::to_string(width));
  if (parsing.size() != static_cast<std::size_t>(height) * width)
    throw std::invalid_argument("parsing map size mismatch");
  const int oh = height / stride, ow = width / stride;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(oh) * ow);
  std::array<int, 256> hist{};
  for (int cy = 0; cy < oh; ++cy)
    for (int cx = 0; cx < ow; ++cx) {
      hist.fill(0);
      for (int y = cy * stride; y < (cy + 1) * stride; ++y)
        for (int x = cx * stride; x < (cx + 1) * stride; ++x) ++hist[parsing[static_cast<std::size_t>(y) * width + x]];
      int best = kIgnore, count = 0;
      for (int id = 0; id < kIgnore; ++id)
        if (hist[id] > count) {
          best = id;
          count = hist[id];
        }
      out[static_cast<std::size_t>(cy) * ow + cx] = static_cast<std::uint8_t>(best);
    }
  return out;
}

double part_color_separability(std::span<const SyntheticSample> samples, int num_parts) {
  if (samples.empty()) return 0.0;
  const int dim = 3 * (num_parts - 1);
  std::vector<std::vector<double>> feats;
  for (const auto& s : samples) {
    std::vector<double> f(dim, 0.0);
    std::vector<int> cnt(num_parts, 0);
    const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
    for (std::size_t i = 0; i < plane; ++i) {
      const int p = s.parsing[i];
      if (p == 0 || p >= num_parts) continue;
      ++cnt[p];
      for (int c = 0; c < 3; ++c) f[3 * (p - 1) + c] += s.image.data[c * plane + i];
    }
    for (int p = 1; p < num_parts; ++p)
      for (int c = 0; c < 3; ++c)
        if (cnt[p]) f[3 * (p - 1) + c] /= cnt[p];
    feats.push_back(std::move(f));
  }
  std::map<int, std::pair<std::vector<double>, int>> centroids;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& [sum, n] = centroids[samples[i].identity];
    if (sum.empty()) sum.assign(dim, 0.0);
    for (int k = 0; k < dim; ++k) sum[k] += feats[i][k];
    ++n;
  }
  for (auto& [id, c] : centroids)
    for (double& v : c.first) v /= c.second;
  int correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    int best = -1;
    double best_d = 1e300;
    for (const auto& [id, c] : centroids) {
      double d = 0.0;
      for (int k = 0; k < dim; ++k) d += (feats[i][k] - c.first[k]) * (feats[i][k] - c.first[k]);
      if (d < best_d) {
        best_d = d;
        best = id;
      }
    }
    correct += best == samples[i].identity;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

bool evaluable(const DatasetSplit& split) {
  for (const auto& q : split.query) {
    const bool ok = std::any_of(split.gallery.begin(), split.gallery.end(), [&](const SyntheticSample& g) {
      return g.identity == q.identity && g.camera != q.camera;
    });
    if (!ok) return false;
  }
  return true;
}

// ------------------------------------------------------------------- disk I/O

void write_ppm(const std::filesystem::path& path, const Tensor& chw) {
  const int h = chw.dim(1), w = chw.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P6\n" << w << ' ' << h << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> bytes(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      bytes[i * 3 + c] = static_cast<unsigned char>(std::lround(std::clamp(chw.data[c * plane + i], 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

void read_netpbm_header(std::istream& is, const std::string& magic, int& w, int& h, const std::filesystem::path& path) {
  std::string m;
  int maxval = 0;
  is >> m >> w >> h >> maxval;
  is.get();
  if (!is || m != magic || maxval != 255 || w <= 0 || h <= 0)
    throw std::runtime_error("malformed " + magic + " file " + path.string());
}

}  // namespace

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  int w = 0, h = 0;
  read_netpbm_header(is, "P6", w, h, path);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> bytes(plane * 3);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw std::runtime_error("truncated " + path.string());
  Tensor t({3, h, w});
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) t.data[c * plane + i] = bytes[i * 3 + c] / 255.0;
  return t;
}

void write_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> pixels, int height, int width) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& height, int& width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  read_netpbm_header(is, "P5", width, height, path);
  std::vector<std::uint8_t> px(static_cast<std::size_t>(height) * width);
  is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!is) throw std::runtime_error("truncated " + path.string());
  return px;
}

void write_dataset(const DatasetSplit& split, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const std::array<std::pair<const char*, const std::vector<SyntheticSample>*>, 3> parts = {
      {{"train", &split.train}, {"query", &split.query}, {"gallery", &split.gallery}}};
  for (const auto& [name, samples] : parts) {
    const fs::path dir = root / name;
    fs::create_directories(dir);
    std::ofstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
    for (std::size_t i = 0; i < samples->size(); ++i) {
      const auto& s = (*samples)[i];
      char stem[32];
      std::snprintf(stem, sizeof stem, "%05zu", i);
      write_ppm(dir / (std::string(stem) + ".ppm"), s.image);
      write_pgm(dir / (std::string(stem) + "_parsing.pgm"), s.parsing, s.height, s.width);
      nlohmann::json line = {{"file", std::string(stem) + ".ppm"},
                             {"parsing", std::string(stem) + "_parsing.pgm"},
                             {"identity", s.identity},
                             {"camera", s.camera}};
      manifest << line.dump() << '\n';
    }
  }
  nlohmann::json meta = {{"num_parts", split.num_parts}, {"num_train_identities", split.num_train_identities}};
  std::ofstream(root / "dataset.json") << meta.dump(2) << '\n';
}

DatasetSplit read_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::ifstream meta_in(root / "dataset.json");
  if (!meta_in) throw std::invalid_argument("no dataset at " + root.string() + " (missing dataset.json)");
  const auto meta = nlohmann::json::parse(meta_in);
  DatasetSplit split;
  split.num_parts = meta.at("num_parts").get<int>();
  split.num_train_identities = meta.at("num_train_identities").get<int>();
  const std::array<std::pair<const char*, std::vector<SyntheticSample>*>, 3> parts = {
      {{"train", &split.train}, {"query", &split.query}, {"gallery", &split.gallery}}};
  for (const auto& [name, samples] : parts) {
    const fs::path dir = root / name;
    std::ifstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw std::invalid_argument("missing manifest in " + dir.string());
    std::string line;
    while (std::getline(manifest, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      SyntheticSample s;
      s.image = read_ppm(dir / j.at("file").get<std::string>());
      s.parsing = read_pgm(dir / j.at("parsing").get<std::string>(), s.height, s.width);
      if (s.image.dim(1) != s.height || s.image.dim(2) != s.width)
        throw std::runtime_error("image/parsing size mismatch for " + j.at("file").get<std::string>());
      s.identity = j.at("identity").get<int>();
      s.camera = j.at("camera").get<int>();
      samples->push_back(std::move(s));
    }
  }
  return split;
}

}  // namespace pivl::synthgen
