#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pivl/encoders.hpp"
#include "pivl/synthgen.hpp"

namespace pivl::prompts {

using ag::Var;

// Per-identity learnable context tokens [X]_1..[X]_M and the frozen word
// table holding the template words and every part name.
class PromptContextStore final : public nn::Module {
 public:
  PromptContextStore(int num_identities, int context_tokens, const synthgen::PartVocabulary& parts, int text_dim,
                     std::uint64_t seed, double context_std = 0.02, double vocab_std = 0.02);

  // "a photo of a X_1..X_M person"; length 5 + M.
  Var identity_prompt(int identity) const;
  // Identity prompt followed directly by the part-name token; length 6 + M.
  Var part_prompt(int identity, int part) const;
  // Identity-agnostic prompt "a photo of a person <part>".
  Var parsing_prompt(int part) const;

  Var& context(int identity);
  const Var& word(const std::string& w) const;

  int num_identities() const { return static_cast<int>(contexts_.size()); }
  int context_tokens() const { return context_tokens_; }
  int text_dim() const { return text_dim_; }
  const synthgen::PartVocabulary& parts() const { return parts_; }
  std::uint64_t vocab_hash() const;

  void set_context_trainable(bool on);

 private:
  void check_identity(int identity) const;

  int context_tokens_;
  int text_dim_;
  synthgen::PartVocabulary parts_;
  std::vector<Var> contexts_;
  std::map<std::string, Var> vocab_;
};

enum class PartPromptMode { IdentityAware, ParsingOnly };

// Per-cell text targets at feature resolution.
struct AlignmentTarget {
  int height = 0;
  int width = 0;
  Tensor cells;                      // [height*width, d]; zero rows where ignored
  std::vector<std::uint8_t> ignore;  // 1 = excluded
  std::vector<int> part;             // part id per cell, -1 when ignored
};

using PartTextFn = std::function<Tensor(int identity, int part)>;

// Calls `embed` once per distinct part present, then gathers per cell.
AlignmentTarget build_alignment_target(std::span<const std::uint8_t> parsing_ds, int height, int width, int identity,
                                       const PartTextFn& embed);

// Frozen text-encoder evaluations used in the second stage.
Tensor identity_text_table(const PromptContextStore& store, const encoders::TextEncoder& text);      // [N, d]
Tensor part_text_table(const PromptContextStore& store, const encoders::TextEncoder& text,
                       PartPromptMode mode);                                                          // [N*K, d]

}  // namespace pivl::prompts
