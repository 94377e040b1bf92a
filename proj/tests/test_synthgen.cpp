#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

#include "pivl/synthgen.hpp"

using namespace pivl;
using namespace pivl::synthgen;

namespace {

IdentitySpec first_identity(const RenderConfig& cfg = {}) { return make_identities(1, cfg, 0.15, 7).front(); }

DatasetConfig small_config() {
  DatasetConfig cfg;
  cfg.train_identities = 6;
  cfg.test_identities = 4;
  cfg.instances_per_identity = 4;
  cfg.seed = 11;
  return cfg;
}

// Per-block histogram argmax, smallest id on ties, IGNORE excluded.
std::vector<std::uint8_t> brute_downsample(const std::vector<std::uint8_t>& p, int h, int w, int s) {
  std::vector<std::uint8_t> out;
  for (int by = 0; by < h / s; ++by)
    for (int bx = 0; bx < w / s; ++bx) {
      std::vector<int> hist(256, 0);
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) ++hist[p[(by * s + y) * w + bx * s + x]];
      int best = kIgnore, count = 0;
      for (int id = 0; id < kIgnore; ++id)
        if (hist[id] > count) {
          count = hist[id];
          best = id;
        }
      out.push_back(static_cast<std::uint8_t>(best));
    }
  return out;
}

}  // namespace

TEST_CASE("part vocabulary is a bijection") {
  const auto v = PartVocabulary::standard();
  CHECK(v.size() == 5);
  CHECK(v.name(0) == "background");
  for (int i = 0; i < v.size(); ++i) CHECK(v.id(v.name(i)) == i);
  CHECK(PartVocabulary::standard(20).size() == 20);
  CHECK_THROWS(PartVocabulary::standard(21));
  CHECK_THROWS(v.id("tail"));
}

TEST_CASE("rendering is deterministic and parsing ids are in range") {
  const auto spec = first_identity();
  const auto a = render_sample(spec, 0, 0), b = render_sample(spec, 0, 0);
  CHECK(a.image.data == b.image.data);
  CHECK(a.parsing == b.parsing);
  CHECK(a.image.shape == Shape{3, 64, 32});
  CHECK(a.parsing.size() == 64u * 32u);
  for (auto p : a.parsing) CHECK(p < 5);
  for (double v : a.image.data) CHECK((v >= 0.0 && v <= 1.0));

  const auto c = render_sample(spec, 1, 0);
  CHECK(c.image.data != a.image.data);
  CHECK(c.identity == a.identity);
}

TEST_CASE("every non-background part covers at least 1% of the image") {
  const RenderConfig cfg;
  const auto ids = make_identities(8, cfg, 0.15, 3);
  for (const auto& spec : ids)
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto s = render_sample(spec, seed, static_cast<int>(seed % 4), cfg);
      std::vector<int> count(cfg.num_parts, 0);
      for (auto p : s.parsing) ++count[p];
      for (int p = 1; p < cfg.num_parts; ++p) CHECK(count[p] >= 0.01 * s.parsing.size());
    }
}

TEST_CASE("invalid proportions are rejected") {
  auto spec = first_identity();
  spec.part_heights[1] = 0.0;
  CHECK_THROWS_AS(render_sample(spec, 0, 0), std::invalid_argument);
  spec = first_identity();
  spec.part_widths[0] = 1.0;
  CHECK_THROWS_AS(validate_spec(spec, {}), std::invalid_argument);
}

TEST_CASE("identities respect the color separation") {
  const auto ids = make_identities(20, {}, 0.15, 5);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      double best = 0.0;
      for (std::size_t p = 0; p < ids[i].part_colors.size(); ++p) {
        double d2 = 0.0;
        for (int c = 0; c < 3; ++c) d2 += std::pow(ids[i].part_colors[p][c] - ids[j].part_colors[p][c], 2);
        best = std::max(best, std::sqrt(d2));
      }
      CHECK(best >= 0.15);
    }
}

TEST_CASE("default dataset counts and split invariants") {
  DatasetConfig cfg;
  cfg.workers = 4;
  const auto split = generate_dataset(cfg);
  CHECK(split.train.size() == 32u * 8u);
  CHECK(split.query.size() + split.gallery.size() == 16u * 8u);
  CHECK(split.num_train_identities == 32);
  std::set<int> train_ids, test_ids;
  for (const auto& s : split.train) train_ids.insert(s.identity);
  for (const auto& s : split.query) test_ids.insert(s.identity);
  for (const auto& s : split.gallery) test_ids.insert(s.identity);
  for (int id : test_ids) CHECK(train_ids.count(id) == 0);
  CHECK(train_ids.size() == 32);
  CHECK(*train_ids.rbegin() == 31);
  CHECK(evaluable(split));
  CHECK(part_color_separability(split.train, split.num_parts) >= 0.99);
}

TEST_CASE("dataset generation is deterministic and worker independent") {
  auto cfg = small_config();
  const auto a = generate_dataset(cfg);
  cfg.workers = 3;
  const auto b = generate_dataset(cfg);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].image.data == b.train[i].image.data);
    CHECK(a.train[i].camera == b.train[i].camera);
  }
  REQUIRE(a.gallery.size() == b.gallery.size());
  for (std::size_t i = 0; i < a.gallery.size(); ++i) CHECK(a.gallery[i].parsing == b.gallery[i].parsing);
}

TEST_CASE("a single camera cannot satisfy the query protocol") {
  auto cfg = small_config();
  cfg.cameras = 1;
  CHECK_THROWS_AS(generate_dataset(cfg), std::invalid_argument);
}

TEST_CASE("parsing downsampling: uniform, tie and brute-force cases") {
  const std::vector<std::uint8_t> uniform(16, 2);
  CHECK(downsample_parsing(uniform, 4, 4, 4) == std::vector<std::uint8_t>{2});
  const std::vector<std::uint8_t> tie = {3, 1, 3, 1};
  CHECK(downsample_parsing(tie, 2, 2, 2) == std::vector<std::uint8_t>{1});
  const std::vector<std::uint8_t> erased = {kIgnore, kIgnore, kIgnore, kIgnore};
  CHECK(downsample_parsing(erased, 2, 2, 2) == std::vector<std::uint8_t>{kIgnore});
  const std::vector<std::uint8_t> mostly = {kIgnore, kIgnore, kIgnore, 4};
  CHECK(downsample_parsing(mostly, 2, 2, 2) == std::vector<std::uint8_t>{4});
  CHECK_THROWS_AS(downsample_parsing(uniform, 4, 4, 3), std::invalid_argument);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint8_t> p(64);
    for (auto& v : p) v = rng() % 7 == 0 ? kIgnore : static_cast<std::uint8_t>(rng() % 5);
    CHECK(downsample_parsing(p, 8, 8, 4) == brute_downsample(p, 8, 8, 4));
  }
}

TEST_CASE("dataset round-trips through disk") {
  const auto split = generate_dataset(small_config());
  const auto root = std::filesystem::temp_directory_path() / "pivl_synthgen_roundtrip";
  std::filesystem::remove_all(root);
  write_dataset(split, root);
  const auto back = read_dataset(root);
  REQUIRE(back.train.size() == split.train.size());
  REQUIRE(back.query.size() == split.query.size());
  for (std::size_t i = 0; i < split.query.size(); ++i) {
    CHECK(back.query[i].image.data == split.query[i].image.data);
    CHECK(back.query[i].parsing == split.query[i].parsing);
    CHECK(back.query[i].identity == split.query[i].identity);
    CHECK(back.query[i].camera == split.query[i].camera);
  }
  CHECK(back.num_train_identities == split.num_train_identities);
  std::filesystem::remove_all(root);
}
