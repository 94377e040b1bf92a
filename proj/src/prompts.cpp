#include "pivl/prompts.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>

namespace pivl::prompts {

namespace {
const std::vector<std::string> kTemplateWords = {"a", "photo", "of", "person"};
}

PromptContextStore::PromptContextStore(int num_identities, int context_tokens, const synthgen::PartVocabulary& parts,
                                       int text_dim, std::uint64_t seed, double context_std, double vocab_std)
    : context_tokens_(context_tokens), text_dim_(text_dim), parts_(parts) {
  if (num_identities <= 0) throw std::invalid_argument("prompt store needs at least one identity");
  if (context_tokens < 0) throw std::invalid_argument("context token count must be >= 0");
  nn::Rng rng(seed);
  for (const auto& w : kTemplateWords) vocab_.emplace(w, Var(nn::normal_tensor({1, text_dim}, vocab_std, rng), false));
  for (const auto& name : parts.names())
    vocab_.emplace(name, Var(nn::normal_tensor({1, text_dim}, vocab_std, rng), false));
  contexts_.reserve(num_identities);
  for (int i = 0; i < num_identities; ++i) {
    Tensor init = context_tokens > 0 ? nn::normal_tensor({context_tokens, text_dim}, context_std, rng)
                                     : Tensor({0, text_dim});
    contexts_.emplace_back(std::move(init), context_tokens > 0);
  }
  for (auto& [w, v] : vocab_) register_parameter("vocab." + w, v);
  for (int i = 0; i < num_identities; ++i) register_parameter("context." + std::to_string(i), contexts_[i]);
}

void PromptContextStore::check_identity(int identity) const {
  if (identity < 0 || identity >= num_identities())
    throw std::invalid_argument("no prompt context for identity " + std::to_string(identity));
}

Var& PromptContextStore::context(int identity) {
  check_identity(identity);
  return contexts_[identity];
}

const Var& PromptContextStore::word(const std::string& w) const {
  auto it = vocab_.find(w);
  if (it == vocab_.end()) throw std::invalid_argument("word '" + w + "' not in prompt vocabulary");
  return it->second;
}

Var PromptContextStore::identity_prompt(int identity) const {
  check_identity(identity);
  std::vector<Var> seq = {word("a"), word("photo"), word("of"), word("a")};
  if (context_tokens_ > 0) seq.push_back(contexts_[identity]);
  seq.push_back(word("person"));
  return ag::concat_rows(seq);
}

Var PromptContextStore::part_prompt(int identity, int part) const {
  const Var& name = word(parts_.name(part));
  const std::array<Var, 2> seq = {identity_prompt(identity), name};
  return ag::concat_rows(seq);
}

Var PromptContextStore::parsing_prompt(int part) const {
  const std::array<Var, 6> seq = {word("a"), word("photo"), word("of"), word("a"), word("person"),
                                  word(parts_.name(part))};
  return ag::concat_rows(seq);
}

std::uint64_t PromptContextStore::vocab_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [w, v] : vocab_) {
    h = nn::fnv1a(w.data(), w.size(), h);
    h = nn::fnv1a(v.value().data.data(), v.numel() * sizeof(double), h);
  }
  return h;
}

void PromptContextStore::set_context_trainable(bool on) {
  if (context_tokens_ == 0) return;
  for (auto& c : contexts_) c.set_requires_grad(on);
}

AlignmentTarget build_alignment_target(std::span<const std::uint8_t> parsing_ds, int height, int width, int identity,
                                       const PartTextFn& embed) {
  if (parsing_ds.size() != static_cast<std::size_t>(height) * width)
    throw std::invalid_argument("alignment target: parsing size does not match grid");
  AlignmentTarget t;
  t.height = height;
  t.width = width;
  t.ignore.assign(parsing_ds.size(), 0);
  t.part.assign(parsing_ds.size(), -1);
  std::map<int, Tensor> cache;
  int dim = 0;
  for (std::size_t i = 0; i < parsing_ds.size(); ++i) {
    const int p = parsing_ds[i];
    if (p == synthgen::kIgnore) {
      t.ignore[i] = 1;
      continue;
    }
    t.part[i] = p;
    if (!cache.count(p)) {
      Tensor e = embed(identity, p);
      dim = static_cast<int>(e.numel());
      cache.emplace(p, std::move(e));
    }
  }
  if (cache.empty()) {
    t.cells = Tensor({static_cast<int>(parsing_ds.size()), 0});
    return t;
  }
  t.cells = Tensor({static_cast<int>(parsing_ds.size()), dim});
  for (std::size_t i = 0; i < parsing_ds.size(); ++i) {
    if (t.ignore[i]) continue;
    const Tensor& e = cache.at(t.part[i]);
    std::copy(e.data.begin(), e.data.end(), t.cells.data.begin() + static_cast<std::ptrdiff_t>(i) * dim);
  }
  return t;
}

Tensor identity_text_table(const PromptContextStore& store, const encoders::TextEncoder& text) {
  ag::NoGradGuard guard;
  const int n = store.num_identities(), d = text.embed_dim();
  Tensor out({n, d});
  for (int i = 0; i < n; ++i) {
    const Var e = text.forward(store.identity_prompt(i));
    std::copy(e.value().data.begin(), e.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  return out;
}

Tensor part_text_table(const PromptContextStore& store, const encoders::TextEncoder& text, PartPromptMode mode) {
  ag::NoGradGuard guard;
  const int n = store.num_identities(), k = store.parts().size(), d = text.embed_dim();
  Tensor out({n * k, d});
  std::vector<Tensor> generic;
  if (mode == PartPromptMode::ParsingOnly)
    for (int p = 0; p < k; ++p) generic.push_back(text.forward(store.parsing_prompt(p)).value());
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < k; ++p) {
      const Tensor e = mode == PartPromptMode::ParsingOnly ? generic[p] : text.forward(store.part_prompt(i, p)).value();
      std::copy(e.data.begin(), e.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * k + p) * d);
    }
  return out;
}

}  // namespace pivl::prompts
