#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivl/encoders.hpp"
#include "pivl/fusion.hpp"
#include "pivl/synthgen.hpp"

namespace pivl::eval {

struct EmbeddingGallery {
  Tensor rows;  // [n, d], L2-normalized
  std::vector<int> identities;
  std::vector<int> cameras;

  int size() const { return static_cast<int>(identities.size()); }
};

// Normalizes rows and checks the parallel arrays.
EmbeddingGallery make_gallery(Tensor rows, std::vector<int> identities, std::vector<int> cameras);

struct UnevaluableQuery : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Consistency {
  double intra_part_sim = 0.0;
  double inter_part_sim = 0.0;
  double part_probe_acc = 0.0;
};

struct RetrievalReport {
  std::vector<double> cmc;  // cmc[k-1] = Rank-k
  double map = 0.0;
  std::vector<double> ap;   // per query
  Consistency consistency;

  double rank(int k) const;
};

// Mean of precision@i over the positions i of relevant items.
double average_precision(std::span<const std::uint8_t> relevance);

// Cosine ranking (stable on gallery index), excluding gallery rows that
// share both identity and camera with the query. max_rank <= 0 uses the
// gallery size.
RetrievalReport compute_cmc_map(const EmbeddingGallery& query, const EmbeddingGallery& gallery, int max_rank = 0,
                                int workers = 1);

struct ProbeConfig {
  std::size_t max_pairs = 100000;
  int folds = 5;
  double ridge = 1.0;
  std::uint64_t seed = 0;
};

// Scores over cells with given identity and part labels. Cells are
// L2-normalized first.
Consistency consistency_scores(const Tensor& cells, std::span<const int> identities, std::span<const int> parts,
                               const ProbeConfig& cfg);

// k-fold accuracy of a one-vs-rest ridge regressor (unpenalized intercept,
// features standardized on each training fold)
// predicting part ids from rows.
double ridge_probe_accuracy(const Tensor& rows, std::span<const int> labels, const ProbeConfig& cfg);

// Raw global embeddings [n, d] (eval mode, no augmentation).
Tensor embed(const encoders::ImageEncoder& encoder, std::span<const synthgen::SyntheticSample> samples);

// Stride-8 cell features [n*h*w, d]: the head's alignment map when a head
// exists, otherwise C4 bilinearly resampled to stride 8 (C3 for ViT).
Tensor stride8_features(const encoders::ImageEncoder& encoder, const fusion::FusionHead* head,
                        std::span<const synthgen::SyntheticSample> samples, int& cells_per_image);

Consistency part_consistency_probe(const encoders::ImageEncoder& encoder, const fusion::FusionHead* head,
                                   std::span<const synthgen::SyntheticSample> samples, const ProbeConfig& cfg);

// Retrieval on query/gallery plus the probe over all test samples.
RetrievalReport evaluate(const encoders::ImageEncoder& encoder, const fusion::FusionHead* head,
                         const synthgen::DatasetSplit& data, const ProbeConfig& probe, int workers = 1);

// {map, cmc:{1,5,10}, consistency:{...}, config_digest}
nlohmann::json report_json(const RetrievalReport& r, const std::string& config_digest);

// Header identity,camera,e0..e{d-1}; %.9g floats.
void write_embeddings_csv(const std::filesystem::path& path, const EmbeddingGallery& g);

}  // namespace pivl::eval
