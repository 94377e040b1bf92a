#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pivl/autograd.hpp"

namespace pivl::losses {

using ag::Var;

struct LossWeights {
  double id = 1.0;
  double tri = 1.0;
  double i2tce = 1.0;
  double align = 1.0;
};

struct LossConfig {
  double tau = 0.07;
  double label_smoothing = 0.1;
  double margin = 0.3;
  double logit_scale = 1.0 / 0.07;
  LossWeights weights;
  int cells_per_image = 64;
  double background_weight = 1.0;
};

void validate(const LossConfig& cfg);

// Supervised CLIP loss L_i2t + L_t2i over a batch where row i of `texts` is
// the prompt embedding of identities[i]. Each anchor averages the
// log-softmax mass over every same-identity entry.
Var clip_pair_loss(const Var& image_globals, const Var& texts, std::span<const int> identities, double tau);

// Label-smoothed cross-entropy: q_y = 1 - eps + eps/N, other classes eps/N,
// averaged over rows.
Var smoothed_cross_entropy(const Var& logits, std::span<const int> labels, double eps);

// Image-to-text CE against all N identity text embeddings (cosine * scale).
Var i2tce(const Var& globals, const Var& identity_texts, std::span<const int> labels, double logit_scale, double eps);

// Identity classification loss over a learned classifier's logits.
Var id_ce(const Var& logits, std::span<const int> labels, double eps);

// Batch-hard triplet on L2-normalized embeddings (Euclidean distance).
Var triplet_batch_hard(const Var& globals, std::span<const int> identities, double margin);

// Key identifying the (identity, part) prompt behind a cell.
inline std::int64_t cell_key(int identity, int part) { return static_cast<std::int64_t>(identity) * 256 + part; }

// Symmetric dense InfoNCE between cell features and their cell texts.
// Positives: other cells with the same key; negatives: cells with another key.
Var dense_part_contrastive(const Var& cell_features, const Var& cell_texts, std::span<const std::int64_t> keys,
                           double tau);

// At most `limit` valid cells (part >= 0) of one image, balanced across parts
// by round-robin over shuffled per-part lists. Returns ascending indices;
// when every valid cell fits, the RNG is not consulted.
std::vector<int> stratified_cells(std::span<const int> cell_parts, int limit, std::mt19937_64& rng);

// Mean squared error between per-cell L2-normalized features and targets,
// over non-ignored cells (optionally weighted) and channels. 0 when every
// cell is ignored.
Var mse_align(const Var& cells, const Tensor& targets, std::span<const std::uint8_t> ignore,
              std::span<const double> cell_weights = {});

struct LossTerms {
  std::vector<std::pair<std::string, Var>> terms;
  Var total;

  double value(const std::string& name) const;
  bool has(const std::string& name) const;
};

struct PromptBatch {
  Var image_globals;            // [B,d] frozen
  Var identity_texts;           // [B,d], row i is the prompt of identities[i]
  std::vector<int> identities;
  Var cell_features;            // [n,d] frozen visual cells (may be undefined)
  Var cell_texts;               // [n,d]
  std::vector<std::int64_t> cell_keys;
};

// L_stage1 (+ L_part when include_part and cells are present), unit weights.
LossTerms prompt_objective(const PromptBatch& batch, const LossConfig& cfg, bool include_part);

struct ReidBatch {
  Var globals;                  // [B,d]
  Var id_logits;                // [B,N] (undefined -> no L_id)
  Var identity_texts;           // [N,d] constant (undefined -> no L_i2tce)
  std::vector<int> labels;
  Var aligned_cells;            // [n,d] (undefined -> no L_align)
  Tensor cell_targets;          // [n,d]
  std::vector<std::uint8_t> cell_ignore;
  std::vector<double> cell_weights;
  bool use_triplet = true;
};

// Weighted sum L_id + L_tri + L_i2tce + L_align of the terms present.
LossTerms overall_objective(const ReidBatch& batch, const LossConfig& cfg);

}  // namespace pivl::losses
