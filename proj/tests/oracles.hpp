#pragma once

// Independent reference implementations used only by tests. Everything here
// is written with plain loops over std::vector, without the autodiff graph,
// so agreement with the library is meaningful.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "pivl/tensor.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const pivl::Tensor& t) {
  const int n = t.dim(0), d = static_cast<int>(t.numel() / n);
  Mat m(n, std::vector<double>(d));
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) m[i][c] = t.data[static_cast<std::size_t>(i) * d + c];
  return m;
}

inline std::vector<double> unit(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  s = std::max(std::sqrt(s), 1e-12);
  std::vector<double> out(v);
  for (double& x : out) x /= s;
  return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) { return dot(unit(a), unit(b)); }

inline double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// One direction of the multi-positive supervised contrastive loss.
inline double clip_direction(const Mat& anchors, const Mat& others, const std::vector<int>& ids, double tau) {
  const std::size_t n = anchors.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(n);
    for (std::size_t j = 0; j < n; ++j) logits[j] = cosine(anchors[i], others[j]) / tau;
    const double lse = log_sum_exp(logits);
    double sum = 0.0;
    int count = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (ids[j] == ids[i]) {
        sum += logits[j] - lse;
        ++count;
      }
    total += -sum / count;
  }
  return total / n;
}

inline double clip_pair(const Mat& img, const Mat& txt, const std::vector<int>& ids, double tau) {
  return clip_direction(img, txt, ids, tau) + clip_direction(txt, img, ids, tau);
}

inline double smoothed_ce(const Mat& logits, const std::vector<int>& labels, double eps) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double n = static_cast<double>(logits[i].size());
    const double lse = log_sum_exp(logits[i]);
    for (std::size_t k = 0; k < logits[i].size(); ++k) {
      const double q = (static_cast<int>(k) == labels[i] ? 1.0 - eps : 0.0) + eps / n;
      total -= q * (logits[i][k] - lse);
    }
  }
  return total / logits.size();
}

inline double i2tce(const Mat& g, const Mat& texts, const std::vector<int>& labels, double scale, double eps) {
  Mat logits(g.size(), std::vector<double>(texts.size()));
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t k = 0; k < texts.size(); ++k) logits[i][k] = scale * cosine(g[i], texts[k]);
  return smoothed_ce(logits, labels, eps);
}

inline double triplet(const Mat& g, const std::vector<int>& ids, double margin) {
  const std::size_t n = g.size();
  auto dist = [&](std::size_t a, std::size_t b) {
    const auto u = unit(g[a]), v = unit(g[b]);
    double s = 0.0;
    for (std::size_t c = 0; c < u.size(); ++c) s += (u[c] - v[c]) * (u[c] - v[c]);
    return std::sqrt(s);
  };
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double hp = -1.0, hn = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      if (ids[j] == ids[a]) hp = std::max(hp, dist(a, j));
      else hn = std::min(hn, dist(a, j));
    }
    total += std::max(0.0, hp - hn + margin);
  }
  return total / n;
}

// One direction of the dense InfoNCE: anchors from `a`, candidates from `b`.
inline double dense_direction(const Mat& a, const Mat& b, const std::vector<std::int64_t>& keys, double tau) {
  const std::size_t n = a.size();
  double total = 0.0;
  int anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double neg = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (keys[j] != keys[i]) neg += std::exp(cosine(a[i], b[j]) / tau);
    double sum = 0.0;
    int pos = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || keys[j] != keys[i]) continue;
      const double e = std::exp(cosine(a[i], b[j]) / tau);
      sum += -std::log(e / (e + neg));
      ++pos;
    }
    if (pos == 0) continue;
    total += sum / pos;
    ++anchors;
  }
  return anchors ? total / anchors : 0.0;
}

inline double dense(const Mat& cells, const Mat& texts, const std::vector<std::int64_t>& keys, double tau) {
  return dense_direction(texts, cells, keys, tau) + dense_direction(cells, texts, keys, tau);
}

inline double mse_align(const Mat& cells, const Mat& targets, const std::vector<std::uint8_t>& ignore,
                        const std::vector<double>& weights) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (ignore[i]) continue;
    const double w = weights.empty() ? 1.0 : weights[i];
    const auto u = unit(cells[i]), v = unit(targets[i]);
    double s = 0.0;
    for (std::size_t c = 0; c < u.size(); ++c) s += (u[c] - v[c]) * (u[c] - v[c]);
    num += w * s / u.size();
    den += w;
  }
  return den > 0.0 ? num / den : 0.0;
}

// Exhaustive retrieval scoring by pairwise rank counting.
struct Retrieval {
  double map = 0.0;
  std::vector<double> cmc;
  std::vector<double> ap;
};

inline Retrieval retrieval(const Mat& q, const std::vector<int>& qid, const std::vector<int>& qcam, const Mat& g,
                           const std::vector<int>& gid, const std::vector<int>& gcam) {
  const std::size_t nq = q.size(), ng = g.size();
  Retrieval r;
  r.cmc.assign(ng, 0.0);
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<double> s(ng);
    std::vector<bool> valid(ng);
    for (std::size_t j = 0; j < ng; ++j) {
      s[j] = dot(q[i], g[j]);
      valid[j] = !(gid[j] == qid[i] && gcam[j] == qcam[i]);
    }
    // 1-based rank of j among valid entries: items strictly ahead plus itself.
    auto rank_of = [&](std::size_t j) {
      int rank = 1;
      for (std::size_t k = 0; k < ng; ++k)
        if (valid[k] && k != j && (s[k] > s[j] || (s[k] == s[j] && k < j))) ++rank;
      return rank;
    };
    std::vector<int> pos_ranks;
    for (std::size_t j = 0; j < ng; ++j)
      if (valid[j] && gid[j] == qid[i]) pos_ranks.push_back(rank_of(j));
    double ap = 0.0;
    for (int rp : pos_ranks) {
      int hits = 0;
      for (int rq : pos_ranks) hits += rq <= rp;
      ap += static_cast<double>(hits) / rp;
    }
    ap /= pos_ranks.size();
    r.ap.push_back(ap);
    const int best = *std::min_element(pos_ranks.begin(), pos_ranks.end());
    for (std::size_t k = best - 1; k < ng; ++k) r.cmc[k] += 1.0;
  }
  for (double& c : r.cmc) c /= nq;
  double sum = 0.0;
  for (double a : r.ap) sum += a;
  r.map = sum / nq;
  return r;
}

// Central differences of f with respect to every element of x.
inline std::vector<double> numeric_grad(const std::function<double()>& f, std::vector<double>& x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-10});
}

inline pivl::Tensor random_tensor(pivl::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  pivl::Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data) v = n(rng);
  return t;
}

// Per-pixel channel projection of an NCHW map: out[o] = b[o] + sum_i W[o][i] x[i].
inline pivl::Tensor pointwise(const pivl::Tensor& x, const pivl::Tensor& w, const pivl::Tensor& b) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
  pivl::Tensor out({n, co, h, wd});
  for (int s = 0; s < n; ++s)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < wd; ++xx)
        for (int o = 0; o < co; ++o) {
          double acc = b.data[o];
          for (int i = 0; i < ci; ++i) acc += w.data[static_cast<std::size_t>(o) * ci + i] * x.at(s, i, y, xx);
          out.at(s, o, y, xx) = acc;
        }
  return out;
}

}  // namespace oracle
