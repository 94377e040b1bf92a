#include "pivl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

namespace pivl::losses {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

Tensor same_label_mask(std::span<const int> a, std::span<const int> b) {
  Tensor m({static_cast<int>(a.size()), static_cast<int>(b.size())});
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m.at(static_cast<int>(i), static_cast<int>(j)) = a[i] == b[j];
  return m;
}

// -(1/rows) sum_i (1/|P_i|) sum_{j in P_i} logp_ij
Var multi_positive_nll(const Var& logp, const Tensor& mask) {
  const int rows = mask.dim(0), cols = mask.dim(1);
  Tensor w(mask.shape, 0.0);
  for (int i = 0; i < rows; ++i) {
    double npos = 0.0;
    for (int j = 0; j < cols; ++j) npos += mask.at(i, j);
    for (int j = 0; j < cols; ++j)
      if (mask.at(i, j) > 0.0) w.at(i, j) = -1.0 / (npos * rows);
  }
  return ag::weighted_sum(logp, w);
}

}  // namespace

void validate(const LossConfig& cfg) {
  require(cfg.tau > 0.0, "loss.tau must be > 0");
  require(cfg.label_smoothing >= 0.0 && cfg.label_smoothing < 1.0, "loss.label_smoothing must be in [0,1)");
  require(cfg.margin >= 0.0, "loss.margin must be >= 0");
  require(cfg.logit_scale > 0.0, "loss.logit_scale must be > 0");
  require(cfg.weights.id >= 0 && cfg.weights.tri >= 0 && cfg.weights.i2tce >= 0 && cfg.weights.align >= 0,
          "loss weights must be >= 0");
  require(cfg.cells_per_image > 0, "loss.cells_per_image must be > 0");
  require(cfg.background_weight >= 0.0, "loss.background_weight must be >= 0");
}

Var clip_pair_loss(const Var& image_globals, const Var& texts, std::span<const int> identities, double tau) {
  const int b = image_globals.dim(0);
  require(texts.shape() == image_globals.shape(), "clip_pair_loss: image/text shape mismatch");
  require(static_cast<int>(identities.size()) == b, "clip_pair_loss: label count mismatch");
  require(std::set<int>(identities.begin(), identities.end()).size() >= 2,
          "clip_pair_loss: batch needs at least two identities (no negatives)");
  const Var img = ag::l2_normalize_rows(image_globals);
  const Var txt = ag::l2_normalize_rows(texts);
  const Tensor mask = same_label_mask(identities, identities);
  const Var i2t = multi_positive_nll(ag::log_softmax_rows(ag::scale(ag::matmul_nt(img, txt), 1.0 / tau)), mask);
  const Var t2i = multi_positive_nll(ag::log_softmax_rows(ag::scale(ag::matmul_nt(txt, img), 1.0 / tau)), mask);
  return ag::add(i2t, t2i);
}

Var smoothed_cross_entropy(const Var& logits, std::span<const int> labels, double eps) {
  require(logits.value().rank() == 2, "cross-entropy expects [B,N] logits");
  const int b = logits.dim(0), n = logits.dim(1);
  require(n >= 2, "cross-entropy needs at least 2 classes");
  require(static_cast<int>(labels.size()) == b, "cross-entropy: label count mismatch");
  require(eps >= 0.0 && eps < 1.0, "label smoothing must be in [0,1)");
  Tensor w({b, n});
  for (int i = 0; i < b; ++i) {
    require(labels[i] >= 0 && labels[i] < n, "label " + std::to_string(labels[i]) + " outside [0," +
                                                 std::to_string(n) + ")");
    for (int k = 0; k < n; ++k) w.at(i, k) = -((k == labels[i] ? 1.0 - eps : 0.0) + eps / n) / b;
  }
  return ag::weighted_sum(ag::log_softmax_rows(logits), w);
}

Var i2tce(const Var& globals, const Var& identity_texts, std::span<const int> labels, double logit_scale, double eps) {
  require(globals.dim(1) == identity_texts.dim(1), "i2tce: embedding dims differ");
  const Var logits =
      ag::scale(ag::matmul_nt(ag::l2_normalize_rows(globals), ag::l2_normalize_rows(identity_texts)), logit_scale);
  return smoothed_cross_entropy(logits, labels, eps);
}

Var id_ce(const Var& logits, std::span<const int> labels, double eps) {
  return smoothed_cross_entropy(logits, labels, eps);
}

Var triplet_batch_hard(const Var& globals, std::span<const int> identities, double margin) {
  const int b = globals.dim(0);
  require(static_cast<int>(identities.size()) == b, "triplet: label count mismatch");
  const Var x = ag::l2_normalize_rows(globals);
  const Tensor& v = x.value();
  const int d = v.dim(1);
  auto dist = [&](int i, int j) {
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += (v.at(i, c) - v.at(j, c)) * (v.at(i, c) - v.at(j, c));
    return std::sqrt(s);
  };
  std::vector<int> anchors, hard_pos, hard_neg;
  for (int a = 0; a < b; ++a) {
    int p = -1, n = -1;
    double dp = -1.0, dn = 1e300;
    for (int j = 0; j < b; ++j) {
      if (j == a) continue;
      const double dj = dist(a, j);
      if (identities[j] == identities[a]) {
        if (dj > dp) {
          dp = dj;
          p = j;
        }
      } else if (dj < dn) {
        dn = dj;
        n = j;
      }
    }
    require(p >= 0 && n >= 0, "triplet: anchor " + std::to_string(a) + " has no positive or no negative");
    anchors.push_back(a);
    hard_pos.push_back(p);
    hard_neg.push_back(n);
  }
  const Var ap = ag::row_distances(x, anchors, hard_pos);
  const Var an = ag::row_distances(x, anchors, hard_neg);
  return ag::mean(ag::relu(ag::add_scalar(ag::sub(ap, an), margin)));
}

Var dense_part_contrastive(const Var& cell_features, const Var& cell_texts, std::span<const std::int64_t> keys,
                           double tau) {
  const int n = cell_features.dim(0);
  require(cell_texts.shape() == cell_features.shape(), "dense contrastive: feature/text shape mismatch");
  require(static_cast<int>(keys.size()) == n, "dense contrastive: key count mismatch");
  require(std::set<std::int64_t>(keys.begin(), keys.end()).size() >= 2,
          "dense contrastive: fewer than 2 distinct (identity, part) keys");
  Tensor pos({n, n}), neg({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (keys[i] == keys[j]) {
        if (i != j) pos.at(i, j) = 1.0;
      } else {
        neg.at(i, j) = 1.0;
      }
    }
  const Var v = ag::l2_normalize_rows(cell_features);
  const Var t = ag::l2_normalize_rows(cell_texts);
  const Var t2i = ag::infonce_pairs(ag::scale(ag::matmul_nt(t, v), 1.0 / tau), pos, neg);
  const Var i2t = ag::infonce_pairs(ag::scale(ag::matmul_nt(v, t), 1.0 / tau), pos, neg);
  return ag::add(t2i, i2t);
}

std::vector<int> stratified_cells(std::span<const int> cell_parts, int limit, std::mt19937_64& rng) {
  std::vector<int> valid;
  for (std::size_t i = 0; i < cell_parts.size(); ++i)
    if (cell_parts[i] >= 0) valid.push_back(static_cast<int>(i));
  if (static_cast<int>(valid.size()) <= limit) return valid;

  std::map<int, std::vector<int>> by_part;
  for (int i : valid) by_part[cell_parts[i]].push_back(i);
  for (auto& [part, cells] : by_part)
    for (std::size_t k = cells.size(); k > 1; --k) std::swap(cells[k - 1], cells[rng() % k]);
  std::vector<int> picked;
  for (std::size_t round = 0; static_cast<int>(picked.size()) < limit; ++round)
    for (auto& [part, cells] : by_part)
      if (round < cells.size() && static_cast<int>(picked.size()) < limit) picked.push_back(cells[round]);
  std::sort(picked.begin(), picked.end());
  return picked;
}

Var mse_align(const Var& cells, const Tensor& targets, std::span<const std::uint8_t> ignore,
              std::span<const double> cell_weights) {
  require(cells.value().rank() == 2 && targets.rank() == 2, "mse_align expects [n,d] operands");
  require(cells.shape() == targets.shape,
          "mse_align: feature grid " + shape_str(cells.shape()) + " vs target " + shape_str(targets.shape));
  const int n = cells.dim(0), d = cells.dim(1);
  require(static_cast<int>(ignore.size()) == n, "mse_align: ignore mask size mismatch");
  require(cell_weights.empty() || static_cast<int>(cell_weights.size()) == n, "mse_align: weight size mismatch");
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    if (!ignore[i]) total += cell_weights.empty() ? 1.0 : cell_weights[i];
  if (total <= 0.0) return Var(Tensor::scalar(0.0));

  Tensor tn = targets;
  for (int i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int c = 0; c < d; ++c) ss += tn.at(i, c) * tn.at(i, c);
    const double norm = std::max(std::sqrt(ss), 1e-12);
    for (int c = 0; c < d; ++c) tn.at(i, c) /= norm;
  }
  Tensor w({n, d});
  for (int i = 0; i < n; ++i) {
    if (ignore[i]) continue;
    const double wi = (cell_weights.empty() ? 1.0 : cell_weights[i]) / (total * d);
    for (int c = 0; c < d; ++c) w.at(i, c) = wi;
  }
  const Var diff = ag::sub(ag::l2_normalize_rows(cells), Var(std::move(tn)));
  return ag::weighted_sum(ag::square(diff), w);
}

double LossTerms::value(const std::string& name) const {
  for (const auto& [n, v] : terms)
    if (n == name) return v.item();
  throw std::out_of_range("no loss term '" + name + "'");
}

bool LossTerms::has(const std::string& name) const {
  return std::any_of(terms.begin(), terms.end(), [&](const auto& t) { return t.first == name; });
}

LossTerms prompt_objective(const PromptBatch& batch, const LossConfig& cfg, bool include_part) {
  LossTerms out;
  out.terms.emplace_back("L_stage1", clip_pair_loss(batch.image_globals, batch.identity_texts, batch.identities, cfg.tau));
  if (include_part && batch.cell_features.defined())
    out.terms.emplace_back("L_part",
                           dense_part_contrastive(batch.cell_features, batch.cell_texts, batch.cell_keys, cfg.tau));
  std::vector<Var> parts;
  for (const auto& [name, v] : out.terms) parts.push_back(v);
  out.total = ag::add_n(parts);
  return out;
}

LossTerms overall_objective(const ReidBatch& batch, const LossConfig& cfg) {
  LossTerms out;
  std::vector<Var> weighted;
  auto push = [&](const char* name, Var term, double weight) {
    weighted.push_back(ag::scale(term, weight));
    out.terms.emplace_back(name, std::move(term));
  };
  if (batch.id_logits.defined())
    push("L_id", id_ce(batch.id_logits, batch.labels, cfg.label_smoothing), cfg.weights.id);
  if (batch.use_triplet) push("L_tri", triplet_batch_hard(batch.globals, batch.labels, cfg.margin), cfg.weights.tri);
  if (batch.identity_texts.defined())
    push("L_i2tce", i2tce(batch.globals, batch.identity_texts, batch.labels, cfg.logit_scale, cfg.label_smoothing),
         cfg.weights.i2tce);
  if (batch.aligned_cells.defined())
    push("L_align", mse_align(batch.aligned_cells, batch.cell_targets, batch.cell_ignore, batch.cell_weights),
         cfg.weights.align);
  require(!weighted.empty(), "overall objective has no terms");
  out.total = ag::add_n(weighted);
  return out;
}

}  // namespace pivl::losses
