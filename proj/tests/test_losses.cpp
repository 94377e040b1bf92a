#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "pivl/losses.hpp"

using namespace pivl;
using ag::Var;

namespace {

const double kPerDirection = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));

// Unit vectors whose Gram matrix is `g` (Cholesky factor rows).
Tensor vectors_from_gram(const Eigen::MatrixXd& g) {
  const Eigen::MatrixXd l = g.llt().matrixL();
  Tensor t({static_cast<int>(g.rows()), static_cast<int>(g.cols())});
  for (int i = 0; i < g.rows(); ++i)
    for (int j = 0; j < g.cols(); ++j) t.at(i, j) = l(i, j);
  return t;
}

// Two identities of two rows each. Within-identity cosine a, nearest
// cross cosine b, farther cross cosine c.
Tensor two_pair_config(double a, double b, double c) {
  Eigen::MatrixXd g(4, 4);
  g << 1, a, b, c, a, 1, c, b, b, c, 1, a, c, b, a, 1;
  return vectors_from_gram(g);
}

std::vector<int> random_ids(std::mt19937_64& rng, int n, int classes) {
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i % classes;
  std::shuffle(ids.begin(), ids.end(), rng);
  return ids;
}

Tensor permute_rows(const Tensor& t, const std::vector<int>& perm) {
  Tensor out(t.shape);
  const int d = t.dim(1);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (int c = 0; c < d; ++c) out.at(static_cast<int>(i), c) = t.at(perm[i], c);
  return out;
}

}  // namespace

TEST_CASE("clip pair: two items with unit positive and zero negative similarity") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const std::vector<int> ids = {0, 1};
  const double v = losses::clip_pair_loss(Var(eye), Var(eye), ids, 1.0).item();
  CHECK(v == doctest::Approx(2 * kPerDirection).epsilon(1e-12));
  CHECK(kPerDirection == doctest::Approx(0.31326).epsilon(1e-5));
}

TEST_CASE("clip pair: identical embeddings give log B per direction") {
  for (int b : {2, 4, 8}) {
    const Tensor x({b, 3}, 0.5);
    std::vector<int> ids(b);
    std::iota(ids.begin(), ids.end(), 0);
    CHECK(losses::clip_pair_loss(Var(x), Var(x), ids, 0.07).item() == doctest::Approx(2 * std::log(b)));
  }
}

TEST_CASE("clip pair: rejects single identity and shape mismatch") {
  const Tensor x({3, 4}, 1.0);
  const std::vector<int> one = {2, 2, 2};
  CHECK_THROWS_AS(losses::clip_pair_loss(Var(x), Var(x), one, 0.07), std::invalid_argument);
  const std::vector<int> ids = {0, 1, 2};
  CHECK_THROWS_AS(losses::clip_pair_loss(Var(x), Var(Tensor({3, 5}, 1.0)), ids, 0.07), std::invalid_argument);
}

TEST_CASE("cross-entropy: uniform logits give log N for any smoothing") {
  for (double eps : {0.0, 0.1, 0.5}) {
    const Tensor logits({3, 5}, 0.7);
    const std::vector<int> y = {0, 4, 2};
    CHECK(losses::id_ce(Var(logits), y, eps).item() == doctest::Approx(std::log(5.0)));
  }
}

TEST_CASE("cross-entropy: large correct logit with eps 0 drives the loss to zero") {
  Tensor logits({1, 3}, 0.0);
  logits.at(0, 1) = 200.0;
  const std::vector<int> y = {1};
  CHECK(losses::id_ce(Var(logits), y, 0.0).item() < 1e-12);
}

TEST_CASE("cross-entropy: label outside range is rejected") {
  const Tensor logits({2, 3}, 0.0);
  const std::vector<int> bad = {0, 3}, neg = {-1, 0};
  CHECK_THROWS_AS(losses::id_ce(Var(logits), bad, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(losses::i2tce(Var(Tensor({2, 4}, 1.0)), Var(Tensor({3, 4}, 1.0)), bad, 10.0, 0.1),
                  std::invalid_argument);
  CHECK_THROWS_AS(losses::id_ce(Var(logits), neg, 0.1), std::invalid_argument);
}

TEST_CASE("i2tce and id_ce share one definition") {
  std::mt19937_64 rng(5);
  const Tensor g = oracle::random_tensor({4, 6}, rng), t = oracle::random_tensor({3, 6}, rng);
  const std::vector<int> y = {0, 2, 1, 2};
  const double scale = 1.0 / 0.07, eps = 0.1;
  const double a = losses::i2tce(Var(g), Var(t), y, scale, eps).item();
  // Same logits fed to the classifier path.
  const Var logits = ag::scale(ag::matmul_nt(ag::l2_normalize_rows(Var(g)), ag::l2_normalize_rows(Var(t))), scale);
  CHECK(losses::id_ce(logits, y, eps).item() == a);
  CHECK(a == doctest::Approx(oracle::i2tce(oracle::to_mat(g), oracle::to_mat(t), y, scale, eps)).epsilon(1e-12));
}

TEST_CASE("triplet: hinge examples on constructed geometry") {
  const std::vector<int> ids = {0, 0, 1, 1};
  auto cos_for = [](double dist) { return 1.0 - dist * dist / 2.0; };
  // hardest positive 0.5, hardest negative 1.0
  const Tensor easy = two_pair_config(cos_for(0.5), cos_for(1.0), cos_for(1.0));
  CHECK(losses::triplet_batch_hard(Var(easy), ids, 0.3).item() == doctest::Approx(0.0).epsilon(1e-12));
  // hardest positive 1.0, hardest negative 0.5
  const Tensor hard = two_pair_config(cos_for(1.0), cos_for(0.5), cos_for(1.0));
  CHECK(losses::triplet_batch_hard(Var(hard), ids, 0.3).item() == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("triplet: unmineable batch is rejected") {
  const Tensor x({3, 2}, {1, 0, 0, 1, 1, 1});
  const std::vector<int> lone = {0, 0, 1};
  CHECK_THROWS_AS(losses::triplet_batch_hard(Var(x), lone, 0.3), std::invalid_argument);
  const std::vector<int> same = {0, 0, 0};
  CHECK_THROWS_AS(losses::triplet_batch_hard(Var(x), same, 0.3), std::invalid_argument);
}

TEST_CASE("dense contrastive: two same-key cells plus one other") {
  const Tensor cells({3, 2}, {1, 0, 1, 0, 0, 1});
  const std::vector<std::int64_t> keys = {losses::cell_key(0, 1), losses::cell_key(0, 1), losses::cell_key(1, 1)};
  const double v = losses::dense_part_contrastive(Var(cells), Var(cells), keys, 1.0).item();
  CHECK(v == doctest::Approx(2 * kPerDirection).epsilon(1e-12));
}

TEST_CASE("dense contrastive: a single key is rejected") {
  const Tensor cells({3, 2}, 1.0);
  const std::vector<std::int64_t> keys(3, losses::cell_key(4, 2));
  CHECK_THROWS_AS(losses::dense_part_contrastive(Var(cells), Var(cells), keys, 0.07), std::invalid_argument);
}

TEST_CASE("stratified cells: no-op when every valid cell fits") {
  const std::vector<int> parts = {0, -1, 2, 2, 1, -1, 3};
  std::mt19937_64 rng(1), untouched(1);
  const auto picked = losses::stratified_cells(parts, 64, rng);
  CHECK(picked == std::vector<int>{0, 2, 3, 4, 6});
  CHECK(rng() == untouched());

  // Loss on the selected cells equals the loss on all valid cells.
  std::mt19937_64 g(3);
  const Tensor cells = oracle::random_tensor({7, 4}, g), texts = oracle::random_tensor({7, 4}, g);
  std::vector<int> valid;
  std::vector<std::int64_t> keys;
  for (int i = 0; i < 7; ++i)
    if (parts[i] >= 0) {
      valid.push_back(i);
      keys.push_back(losses::cell_key(0, parts[i]));
    }
  const Var a = ag::index_rows(Var(cells), picked), b = ag::index_rows(Var(texts), picked);
  const Var c = ag::index_rows(Var(cells), valid), d = ag::index_rows(Var(texts), valid);
  CHECK(losses::dense_part_contrastive(a, b, keys, 0.07).item() ==
        losses::dense_part_contrastive(c, d, keys, 0.07).item());
}

TEST_CASE("stratified cells: balanced across parts and deterministic") {
  std::vector<int> parts;
  for (int i = 0; i < 100; ++i) parts.push_back(i < 70 ? 1 : (i < 95 ? 2 : 3));
  std::mt19937_64 r1(9), r2(9);
  const auto a = losses::stratified_cells(parts, 12, r1);
  const auto b = losses::stratified_cells(parts, 12, r2);
  CHECK(a == b);
  REQUIRE(a.size() == 12);
  CHECK(std::is_sorted(a.begin(), a.end()));
  int counts[4] = {0, 0, 0, 0};
  for (int i : a) ++counts[parts[i]];
  CHECK(counts[1] == 4);
  CHECK(counts[2] == 4);
  CHECK(counts[3] == 4);
  std::mt19937_64 r3(9);
  const auto wide = losses::stratified_cells(parts, 30, r3);
  int wide_counts[4] = {0, 0, 0, 0};
  for (int i : wide) ++wide_counts[parts[i]];
  CHECK(wide_counts[3] == 5);  // the scarce part is exhausted, the rest share the remainder
  CHECK(std::abs(wide_counts[1] - wide_counts[2]) <= 1);
}

TEST_CASE("mse align: identity, antipodal and scale cases") {
  const int d = 5;
  std::mt19937_64 rng(2);
  const Tensor u = oracle::random_tensor({3, d}, rng);
  const std::vector<std::uint8_t> none(3, 0);
  CHECK(losses::mse_align(Var(u), u, none).item() == doctest::Approx(0.0).epsilon(1e-14));
  Tensor neg = u;
  for (double& v : neg.data) v = -v;
  CHECK(losses::mse_align(Var(u), neg, none).item() == doctest::Approx(4.0 / d).epsilon(1e-12));
  Tensor doubled = u;
  for (double& v : doubled.data) v *= 2.0;
  const Tensor t = oracle::random_tensor({3, d}, rng);
  CHECK(losses::mse_align(Var(doubled), t, none).item() ==
        doctest::Approx(losses::mse_align(Var(u), t, none).item()).epsilon(1e-12));
}

TEST_CASE("mse align: all ignored is zero and dims must match") {
  const Tensor x({2, 3}, 1.0);
  const std::vector<std::uint8_t> all(2, 1), none(2, 0);
  CHECK(losses::mse_align(Var(x), x, all).item() == 0.0);
  CHECK_THROWS_AS(losses::mse_align(Var(x), Tensor({2, 4}, 1.0), none), std::invalid_argument);
  CHECK_THROWS_AS(losses::mse_align(Var(x), Tensor({3, 3}, 1.0), none), std::invalid_argument);
}

TEST_CASE("loss oracle suite: 100 random instances per loss") {
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<int> small(2, 6);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int classes = small(rng), per = 1 + trial % 3, b = classes * per, d = small(rng) + 1;
    const double tau = 0.05 + 0.5 * (trial % 7) / 7.0, eps = (trial % 4) * 0.1;
    const auto ids = random_ids(rng, b, classes);
    const Tensor img = oracle::random_tensor({b, d}, rng), txt = oracle::random_tensor({b, d}, rng);
    const auto mi = oracle::to_mat(img), mt = oracle::to_mat(txt);

    CHECK(losses::clip_pair_loss(Var(img), Var(txt), ids, tau).item() ==
          doctest::Approx(oracle::clip_pair(mi, mt, ids, tau)).epsilon(1e-10));

    const Tensor table = oracle::random_tensor({classes, d}, rng);
    CHECK(losses::i2tce(Var(img), Var(table), ids, 1.0 / tau, eps).item() ==
          doctest::Approx(oracle::i2tce(mi, oracle::to_mat(table), ids, 1.0 / tau, eps)).epsilon(1e-10));

    const Tensor logits = oracle::random_tensor({b, classes}, rng, 3.0);
    CHECK(losses::id_ce(Var(logits), ids, eps).item() ==
          doctest::Approx(oracle::smoothed_ce(oracle::to_mat(logits), ids, eps)).epsilon(1e-10));

    std::vector<std::int64_t> keys(b);
    for (int i = 0; i < b; ++i) keys[i] = losses::cell_key(ids[i], static_cast<int>(rng() % 2));
    CHECK(losses::dense_part_contrastive(Var(img), Var(txt), keys, tau).item() ==
          doctest::Approx(oracle::dense(mi, mt, keys, tau)).epsilon(1e-10));

    std::vector<std::uint8_t> ignore(b);
    std::vector<double> w(b);
    for (int i = 0; i < b; ++i) {
      ignore[i] = rng() % 4 == 0;
      w[i] = 0.5 + (rng() % 3);
    }
    CHECK(losses::mse_align(Var(img), txt, ignore, w).item() ==
          doctest::Approx(oracle::mse_align(mi, mt, ignore, w)).epsilon(1e-10));

    if (per >= 2) {
      CHECK(losses::triplet_batch_hard(Var(img), ids, 0.3).item() ==
            doctest::Approx(oracle::triplet(mi, ids, 0.3)).epsilon(1e-10));
    }
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("losses are invariant to positive rescaling and batch permutation") {
  std::mt19937_64 rng(77);
  const int b = 8, d = 5;
  const std::vector<int> ids = {0, 1, 2, 3, 0, 1, 2, 3};
  const Tensor x = oracle::random_tensor({b, d}, rng), t = oracle::random_tensor({b, d}, rng);
  Tensor x3 = x;
  for (double& v : x3.data) v *= 3.0;
  std::vector<int> perm(b);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> pids(b);
  std::vector<std::int64_t> keys(b), pkeys(b);
  for (int i = 0; i < b; ++i) {
    pids[i] = ids[perm[i]];
    keys[i] = losses::cell_key(ids[i], i % 2);
  }
  for (int i = 0; i < b; ++i) pkeys[i] = keys[perm[i]];
  const Tensor xp = permute_rows(x, perm), tp = permute_rows(t, perm);

  const double clip = losses::clip_pair_loss(Var(x), Var(t), ids, 0.07).item();
  CHECK(losses::clip_pair_loss(Var(x3), Var(t), ids, 0.07).item() == doctest::Approx(clip).epsilon(1e-12));
  CHECK(std::abs(losses::clip_pair_loss(Var(xp), Var(tp), pids, 0.07).item() - clip) < 1e-9);

  const double tri = losses::triplet_batch_hard(Var(x), ids, 0.3).item();
  CHECK(losses::triplet_batch_hard(Var(x3), ids, 0.3).item() == doctest::Approx(tri).epsilon(1e-12));
  CHECK(std::abs(losses::triplet_batch_hard(Var(xp), pids, 0.3).item() - tri) < 1e-9);

  const double dense = losses::dense_part_contrastive(Var(x), Var(t), keys, 0.1).item();
  CHECK(std::abs(losses::dense_part_contrastive(Var(xp), Var(tp), pkeys, 0.1).item() - dense) < 1e-9);
  CHECK(losses::dense_part_contrastive(Var(x3), Var(t), keys, 0.1).item() == doctest::Approx(dense).epsilon(1e-12));

  const Tensor table = oracle::random_tensor({4, d}, rng);
  const double ce = losses::i2tce(Var(x), Var(table), ids, 14.0, 0.1).item();
  CHECK(std::abs(losses::i2tce(Var(xp), Var(table), pids, 14.0, 0.1).item() - ce) < 1e-9);
  CHECK(ce >= 0.0);
  CHECK(clip >= 0.0);
  CHECK(dense >= 0.0);
  CHECK(tri >= 0.0);
}

TEST_CASE("prompt objective recomposes its terms") {
  std::mt19937_64 rng(4);
  losses::LossConfig cfg;
  losses::PromptBatch batch;
  batch.identities = {0, 0, 1, 1};
  batch.image_globals = Var(oracle::random_tensor({4, 6}, rng));
  batch.identity_texts = Var(oracle::random_tensor({4, 6}, rng));
  batch.cell_features = Var(oracle::random_tensor({5, 6}, rng));
  batch.cell_texts = Var(oracle::random_tensor({5, 6}, rng));
  batch.cell_keys = {1, 1, 2, 3, 3};

  const auto without = losses::prompt_objective(batch, cfg, false);
  const double clip = losses::clip_pair_loss(batch.image_globals, batch.identity_texts, batch.identities, cfg.tau).item();
  CHECK(without.total.item() == clip);
  CHECK_FALSE(without.has("L_part"));

  const auto with = losses::prompt_objective(batch, cfg, true);
  const double part =
      losses::dense_part_contrastive(batch.cell_features, batch.cell_texts, batch.cell_keys, cfg.tau).item();
  CHECK(with.value("L_stage1") == clip);
  CHECK(with.value("L_part") == part);
  CHECK(with.total.item() == doctest::Approx(clip + part).epsilon(1e-14));
  CHECK(std::isfinite(with.total.item()));
}

TEST_CASE("overall objective is the weighted sum of its terms") {
  std::mt19937_64 rng(6);
  losses::LossConfig cfg;
  cfg.weights = {0.5, 2.0, 1.5, 3.0};
  losses::ReidBatch batch;
  batch.labels = {0, 0, 1, 1, 2, 2};
  batch.globals = Var(oracle::random_tensor({6, 4}, rng));
  batch.id_logits = Var(oracle::random_tensor({6, 3}, rng));
  batch.identity_texts = Var(oracle::random_tensor({3, 4}, rng));
  batch.aligned_cells = Var(oracle::random_tensor({7, 4}, rng));
  batch.cell_targets = oracle::random_tensor({7, 4}, rng);
  batch.cell_ignore = {0, 1, 0, 0, 0, 1, 0};

  const auto terms = losses::overall_objective(batch, cfg);
  const double expect = 0.5 * losses::id_ce(batch.id_logits, batch.labels, cfg.label_smoothing).item() +
                        2.0 * losses::triplet_batch_hard(batch.globals, batch.labels, cfg.margin).item() +
                        1.5 * losses::i2tce(batch.globals, batch.identity_texts, batch.labels, cfg.logit_scale,
                                            cfg.label_smoothing).item() +
                        3.0 * losses::mse_align(batch.aligned_cells, batch.cell_targets, batch.cell_ignore).item();
  CHECK(terms.total.item() == doctest::Approx(expect).epsilon(1e-13));
  CHECK(terms.terms.size() == 4);

  batch.use_triplet = false;
  batch.aligned_cells = Var();
  const auto fewer = losses::overall_objective(batch, cfg);
  CHECK(fewer.terms.size() == 2);
  CHECK_FALSE(fewer.has("L_align"));
}

TEST_CASE("loss config validation") {
  losses::LossConfig cfg;
  CHECK_NOTHROW(losses::validate(cfg));
  cfg.tau = 0.0;
  CHECK_THROWS(losses::validate(cfg));
  cfg = {};
  cfg.margin = -0.1;
  CHECK_THROWS(losses::validate(cfg));
  cfg = {};
  cfg.weights.align = -1.0;
  CHECK_THROWS(losses::validate(cfg));
}

TEST_CASE("gradient checks for every differentiable loss") {
  std::mt19937_64 rng(31);
  const std::vector<int> ids = {0, 1, 2, 0, 1, 2};
  const int b = 6, d = 4;
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<Var> in = {Var(oracle::random_tensor({b, d}, rng)), Var(oracle::random_tensor({b, d}, rng))};
    CHECK(gradcheck::max_relative_error(in, [&] { return losses::clip_pair_loss(in[0], in[1], ids, 0.3); }) < 1e-4);

    std::vector<Var> ce = {Var(oracle::random_tensor({b, 3}, rng))};
    CHECK(gradcheck::max_relative_error(ce, [&] { return losses::id_ce(ce[0], ids, 0.1); }) < 1e-4);

    std::vector<Var> it = {Var(oracle::random_tensor({b, d}, rng)), Var(oracle::random_tensor({3, d}, rng))};
    CHECK(gradcheck::max_relative_error(it, [&] { return losses::i2tce(it[0], it[1], ids, 5.0, 0.1); }) < 1e-4);

    std::vector<Var> tr = {Var(oracle::random_tensor({b, d}, rng))};
    CHECK(gradcheck::max_relative_error(tr, [&] { return losses::triplet_batch_hard(tr[0], ids, 1.0); }) < 1e-4);

    const std::vector<std::int64_t> keys = {1, 1, 2, 2, 3, 1};
    std::vector<Var> dn = {Var(oracle::random_tensor({b, d}, rng)), Var(oracle::random_tensor({b, d}, rng))};
    CHECK(gradcheck::max_relative_error(dn, [&] { return losses::dense_part_contrastive(dn[0], dn[1], keys, 0.5); }) <
          1e-4);

    const Tensor target = oracle::random_tensor({b, d}, rng);
    const std::vector<std::uint8_t> ignore = {0, 0, 1, 0, 0, 0};
    const std::vector<double> w = {1, 2, 1, 0.5, 1, 1};
    std::vector<Var> ms = {Var(oracle::random_tensor({b, d}, rng))};
    CHECK(gradcheck::max_relative_error(ms, [&] { return losses::mse_align(ms[0], target, ignore, w); }) < 1e-4);
  }
}
