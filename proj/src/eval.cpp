#include "pivl/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <thread>

#include "pivl/pipeline.hpp"

namespace pivl::eval {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void normalize_rows(Tensor& t) {
  const int n = t.dim(0), d = t.dim(1);
  for (int i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int c = 0; c < d; ++c) ss += t.at(i, c) * t.at(i, c);
    const double norm = std::max(std::sqrt(ss), 1e-12);
    for (int c = 0; c < d; ++c) t.at(i, c) /= norm;
  }
}

double dot_rows(const Tensor& a, int i, const Tensor& b, int j) {
  const int d = a.dim(1);
  double s = 0.0;
  for (int c = 0; c < d; ++c) s += a.at(i, c) * b.at(j, c);
  return s;
}

}  // namespace

EmbeddingGallery make_gallery(Tensor rows, std::vector<int> identities, std::vector<int> cameras) {
  require(rows.rank() == 2, "embedding gallery rows must be [n,d]");
  require(static_cast<int>(identities.size()) == rows.dim(0) && identities.size() == cameras.size(),
          "embedding gallery arrays differ in length");
  normalize_rows(rows);
  return {std::move(rows), std::move(identities), std::move(cameras)};
}

double RetrievalReport::rank(int k) const {
  require(k >= 1, "rank must be >= 1");
  if (cmc.empty()) return 0.0;
  return cmc[std::min<std::size_t>(k, cmc.size()) - 1];
}

double average_precision(std::span<const std::uint8_t> relevance) {
  double hits = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < relevance.size(); ++i)
    if (relevance[i]) {
      hits += 1.0;
      sum += hits / static_cast<double>(i + 1);
    }
  return hits > 0.0 ? sum / hits : 0.0;
}

RetrievalReport compute_cmc_map(const EmbeddingGallery& query, const EmbeddingGallery& gallery, int max_rank,
                                int workers) {
  require(query.size() > 0 && gallery.size() > 0, "retrieval needs non-empty query and gallery sets");
  require(query.rows.dim(1) == gallery.rows.dim(1), "query/gallery embedding dims differ");
  const int nq = query.size(), ng = gallery.size();
  const int R = max_rank > 0 ? max_rank : ng;

  std::vector<int> offenders;
  for (int q = 0; q < nq; ++q) {
    bool ok = false;
    for (int g = 0; g < ng && !ok; ++g)
      ok = gallery.identities[g] == query.identities[q] && gallery.cameras[g] != query.cameras[q];
    if (!ok) offenders.push_back(q);
  }
  if (!offenders.empty()) {
    std::string msg = "unevaluable queries (no positive under another camera):";
    for (int q : offenders) msg += " " + std::to_string(q);
    throw UnevaluableQuery(msg);
  }

  std::vector<double> ap(nq);
  std::vector<int> first_hit(nq);
  auto work = [&](int begin, int stride) {
    std::vector<double> sim(ng);
    std::vector<int> order(ng);
    std::vector<std::uint8_t> rel;
    for (int q = begin; q < nq; q += stride) {
      for (int g = 0; g < ng; ++g) sim[g] = dot_rows(query.rows, q, gallery.rows, g);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sim[a] > sim[b]; });
      rel.clear();
      for (int g : order) {
        const bool same_id = gallery.identities[g] == query.identities[q];
        if (same_id && gallery.cameras[g] == query.cameras[q]) continue;
        rel.push_back(same_id ? 1 : 0);
      }
      ap[q] = average_precision(rel);
      first_hit[q] = static_cast<int>(std::find(rel.begin(), rel.end(), 1) - rel.begin());
    }
  };
  workers = std::max(1, std::min(workers, nq));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }

  RetrievalReport r;
  r.cmc.assign(R, 0.0);
  for (int q = 0; q < nq; ++q)
    for (int k = first_hit[q]; k < R; ++k) r.cmc[k] += 1.0;
  for (double& c : r.cmc) c /= nq;
  r.ap = ap;
  r.map = std::accumulate(ap.begin(), ap.end(), 0.0) / nq;
  return r;
}

double ridge_probe_accuracy(const Tensor& rows, std::span<const int> labels, const ProbeConfig& cfg) {
  const int n = rows.dim(0), d = rows.dim(1);
  require(static_cast<int>(labels.size()) == n, "probe: label count mismatch");
  require(cfg.folds >= 2 && n >= cfg.folds, "probe: need at least `folds` cells");
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[std::uniform_int_distribution<int>(0, i)(rng)]);
  std::vector<int> fold(n);
  for (int i = 0; i < n; ++i) fold[perm[i]] = i % cfg.folds;

  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(rows.data.data(), n,
                                                                                                   d);
  long correct = 0;
  for (int f = 0; f < cfg.folds; ++f) {
    std::vector<int> tr, te;
    for (int i = 0; i < n; ++i) (fold[i] == f ? te : tr).push_back(i);
    Eigen::MatrixXd Xt(tr.size(), d), Yt = Eigen::MatrixXd::Zero(tr.size(), k);
    for (std::size_t r = 0; r < tr.size(); ++r) {
      Xt.row(r) = X.row(tr[r]);
      Yt(r, labels[tr[r]]) = 1.0;
    }
    const Eigen::RowVectorXd mx = Xt.colwise().mean(), my = Yt.colwise().mean();
    Xt.rowwise() -= mx;
    Yt.rowwise() -= my;
    // Per-feature standardization on the training fold; constant features
    // become zero columns.
    Eigen::RowVectorXd inv_sd = (Xt.colwise().squaredNorm() / static_cast<double>(tr.size())).cwiseSqrt();
    for (int c = 0; c < d; ++c) inv_sd(c) = inv_sd(c) > 1e-12 ? 1.0 / inv_sd(c) : 0.0;
    Xt = Xt.array().rowwise() * inv_sd.array();
    Eigen::MatrixXd A = Xt.transpose() * Xt;
    A.diagonal().array() += cfg.ridge;
    const Eigen::MatrixXd W = A.ldlt().solve(Xt.transpose() * Yt);
    for (int i : te) {
      const Eigen::RowVectorXd score = ((X.row(i) - mx).array() * inv_sd.array()).matrix() * W + my;
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (score(c) > score(best)) best = c;
      correct += best == labels[i];
    }
  }
  return static_cast<double>(correct) / n;
}

Consistency consistency_scores(const Tensor& cells, std::span<const int> identities, std::span<const int> parts,
                               const ProbeConfig& cfg) {
  require(cells.rank() == 2, "consistency: cells must be [n,d]");
  const int n = cells.dim(0);
  require(static_cast<int>(identities.size()) == n && static_cast<int>(parts.size()) == n,
          "consistency: label arrays differ in length");
  require(n >= 2, "consistency: need at least two cells");
  Tensor x = cells;
  normalize_rows(x);

  std::map<int, std::vector<int>> by_id;
  for (int i = 0; i < n; ++i) by_id[identities[i]].push_back(i);
  std::vector<std::pair<int, int>> intra, inter;
  for (const auto& [id, members] : by_id)
    for (std::size_t a = 0; a < members.size(); ++a)
      for (std::size_t b = a + 1; b < members.size(); ++b)
        (parts[members[a]] == parts[members[b]] ? intra : inter).emplace_back(members[a], members[b]);

  std::mt19937_64 rng(cfg.seed);
  auto mean_sim = [&](std::vector<std::pair<int, int>>& pairs) {
    if (pairs.empty()) return 0.0;
    std::size_t m = pairs.size();
    if (m > cfg.max_pairs) {
      for (std::size_t i = 0; i < cfg.max_pairs; ++i)
        std::swap(pairs[i], pairs[std::uniform_int_distribution<std::size_t>(i, m - 1)(rng)]);
      m = cfg.max_pairs;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += dot_rows(x, pairs[i].first, x, pairs[i].second);
    return s / static_cast<double>(m);
  };
  Consistency c;
  c.intra_part_sim = mean_sim(intra);
  c.inter_part_sim = mean_sim(inter);
  c.part_probe_acc = ridge_probe_accuracy(x, parts, cfg);
  return c;
}

namespace {
constexpr int kChunk = 32;

}  // namespace

Tensor embed(const encoders::ImageEncoder& encoder, std::span<const synthgen::SyntheticSample> samples) {
  ag::NoGradGuard guard;
  const int n = static_cast<int>(samples.size()), d = encoder.config().embed_dim;
  Tensor out({n, d});
  for (int s = 0; s < n; s += kChunk) {
    const int e = std::min(n, s + kChunk);
    const auto pyr = encoder.forward(ag::Var(pipeline::make_image_batch(samples.subspan(s, e - s))));
    std::copy(pyr.global.value().data.begin(), pyr.global.value().data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(s) * d);
  }
  return out;
}

Tensor stride8_features(const encoders::ImageEncoder& encoder, const fusion::FusionHead* head,
                        std::span<const synthgen::SyntheticSample> samples, int& cells_per_image) {
  ag::NoGradGuard guard;
  std::vector<double> data;
  int d = 0;
  cells_per_image = 0;
  for (std::size_t s = 0; s < samples.size(); s += kChunk) {
    const std::size_t e = std::min(samples.size(), s + kChunk);
    const auto pyr = encoder.forward(ag::Var(pipeline::make_image_batch(samples.subspan(s, e - s))));
    ag::Var map;
    if (head) map = head->forward(pyr);
    else if (pyr.c4.defined()) map = ag::upsample_bilinear2x(pyr.c4);
    else map = pyr.c3;
    const ag::Var rows = ag::nchw_to_rows(map);
    cells_per_image = map.dim(2) * map.dim(3);
    d = rows.dim(1);
    data.insert(data.end(), rows.value().data.begin(), rows.value().data.end());
  }
  const int rows = static_cast<int>(data.size() / std::max(d, 1));
  return Tensor({rows, d}, std::move(data));
}

Consistency part_consistency_probe(const encoders::ImageEncoder& encoder, const fusion::FusionHead* head,
                                   std::span<const synthgen::SyntheticSample> samples, const ProbeConfig& cfg) {
  require(!samples.empty(), "probe: no samples");
  for (const auto& s : samples)
    require(s.parsing.size() == static_cast<std::size_t>(s.height) * s.width, "probe: sample without parsing map");
  int cells = 0;
  const Tensor feats = stride8_features(encoder, head, samples, cells);
  const int d = feats.dim(1);
  std::vector<double> kept;
  std::vector<int> ids, parts;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto ds = synthgen::downsample_parsing(samples[i].parsing, samples[i].height, samples[i].width, 8);
    require(static_cast<int>(ds.size()) == cells, "probe: feature grid does not match parsing grid");
    for (int c = 0; c < cells; ++c) {
      if (ds[c] == synthgen::kIgnore) continue;
      const auto row = feats.data.begin() + (static_cast<std::ptrdiff_t>(i) * cells + c) * d;
      kept.insert(kept.end(), row, row + d);
      ids.push_back(samples[i].identity);
      parts.push_back(ds[c]);
    }
  }
  return consistency_scores(Tensor({static_cast<int>(ids.size()), d}, std::move(kept)), ids, parts, cfg);
}

RetrievalReport evaluate(const encoders::ImageEncoder& encoder, const fusion::FusionHead* head,
                         const synthgen::DatasetSplit& data, const ProbeConfig& probe, int workers) {
  auto gallery_of = [&](const std::vector<synthgen::SyntheticSample>& s) {
    std::vector<int> ids, cams;
    for (const auto& x : s) {
      ids.push_back(x.identity);
      cams.push_back(x.camera);
    }
    return make_gallery(embed(encoder, s), std::move(ids), std::move(cams));
  };
  RetrievalReport r = compute_cmc_map(gallery_of(data.query), gallery_of(data.gallery), 0, workers);
  std::vector<synthgen::SyntheticSample> test = data.query;
  test.insert(test.end(), data.gallery.begin(), data.gallery.end());
  r.consistency = part_consistency_probe(encoder, head, test, probe);
  return r;
}

nlohmann::json report_json(const RetrievalReport& r, const std::string& config_digest) {
  return {{"map", r.map},
          {"cmc", {{"1", r.rank(1)}, {"5", r.rank(5)}, {"10", r.rank(10)}}},
          {"consistency",
           {{"intra_part_sim", r.consistency.intra_part_sim},
            {"inter_part_sim", r.consistency.inter_part_sim},
            {"part_probe_acc", r.consistency.part_probe_acc}}},
          {"config_digest", config_digest}};
}

void write_embeddings_csv(const std::filesystem::path& path, const EmbeddingGallery& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  const int d = g.rows.dim(1);
  out << "identity,camera";
  for (int c = 0; c < d; ++c) out << ",e" << c;
  out << '\n';
  char buf[32];
  for (int i = 0; i < g.size(); ++i) {
    out << g.identities[i] << ',' << g.cameras[i];
    for (int c = 0; c < d; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", g.rows.at(i, c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace pivl::eval
