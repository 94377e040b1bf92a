#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pivl/nn.hpp"

namespace pivl::encoders {

using ag::Var;

enum class Variant { Conv, Vit };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

struct EncoderConfig {
  Variant variant = Variant::Conv;
  int image_height = 64;
  int image_width = 32;
  // stem, C2, C3, C4 widths (conv variant).
  std::array<int, 4> channels = {16, 32, 48, 64};
  int last_stride = 2;  // stride of the C3->C4 transition; 2 keeps C4 at stride 16
  int embed_dim = 64;   // shared image-text space
  int vit_dim = 64;
  int vit_depth = 2;
  int patch = 8;
  int text_dim = 32;
  int max_tokens = 16;
  bool trainable = true;
};

// Multi-stage taps in NCHW plus the [B, d] global embedding. Unset maps are
// undefined Vars (the ViT encoder only produces c3; the fusion head derives
// the rest).
struct FeaturePyramid {
  Var c2;
  Var c3;
  Var c4;
  Var global;
  int stride2 = 4;
  int stride3 = 8;
  int stride4 = 16;
};

class ImageEncoder : public nn::Module {
 public:
  explicit ImageEncoder(EncoderConfig cfg) : cfg_(cfg) {}
  virtual FeaturePyramid forward(const Var& images) const = 0;
  const EncoderConfig& config() const { return cfg_; }
  // Channel count of each tap (0 when the tap is not produced).
  virtual std::array<int, 3> tap_channels() const = 0;

 protected:
  void check_input(const Var& images) const;
  EncoderConfig cfg_;
};

// Stem + three residual stages with attention pooling over C4.
class ConvEncoder final : public ImageEncoder {
 public:
  ConvEncoder(const EncoderConfig& cfg, std::uint64_t seed);
  FeaturePyramid forward(const Var& images) const override;
  std::array<int, 3> tap_channels() const override { return {cfg_.channels[1], cfg_.channels[2], cfg_.channels[3]}; }

 private:
  struct Stage {
    std::unique_ptr<nn::Conv2d> down;
    std::unique_ptr<nn::Conv2d> res_a;
    std::unique_ptr<nn::Conv2d> res_b;
  };
  Var run_stage(const Stage& s, const Var& x) const;

  std::unique_ptr<nn::Conv2d> stem_;
  std::array<Stage, 3> stages_;
  std::unique_ptr<nn::LayerNorm> pool_norm_;
  Var pool_pos_;
  std::unique_ptr<nn::Linear> pool_q_, pool_k_, pool_v_, pool_out_;
};

// Patchify at stride 8, pre-LN transformer blocks, class-token projection.
class VitEncoder final : public ImageEncoder {
 public:
  VitEncoder(const EncoderConfig& cfg, std::uint64_t seed);
  FeaturePyramid forward(const Var& images) const override;
  std::array<int, 3> tap_channels() const override { return {0, cfg_.vit_dim, 0}; }

 private:
  struct Block {
    std::unique_ptr<nn::LayerNorm> ln1, ln2;
    std::unique_ptr<nn::Linear> q, k, v, o, fc1, fc2;
  };
  std::unique_ptr<nn::Conv2d> patch_;
  Var cls_;
  Var pos_;
  std::vector<Block> blocks_;
  std::unique_ptr<nn::LayerNorm> final_norm_;
  std::unique_ptr<nn::Linear> proj_;
};

std::unique_ptr<ImageEncoder> make_image_encoder(const EncoderConfig& cfg, std::uint64_t seed);

// Single-head self-attention over `batch` independent sequences of length
// `seq` laid out as consecutive rows of x.
Var self_attention(const Var& x, int batch, int seq, const nn::Linear& q, const nn::Linear& k,
                   const nn::Linear& v, const nn::Linear& o);

// Frozen text tower: positional embedding, one pre-LN attention block,
// mean pool, LayerNorm and a two-layer projection into the shared space.
class TextEncoder final : public nn::Module {
 public:
  TextEncoder(int text_dim, int embed_dim, int max_tokens, std::uint64_t seed);

  // tokens: [L, text_dim] with 1 <= L <= max_tokens. Returns [1, embed_dim].
  Var forward(const Var& tokens) const;

  int text_dim() const { return text_dim_; }
  int embed_dim() const { return embed_dim_; }
  int max_tokens() const { return max_tokens_; }

  Var pos;
  std::unique_ptr<nn::LayerNorm> ln_attn, ln_out;
  std::unique_ptr<nn::Linear> q, k, v, o, fc1, fc2;

 private:
  int text_dim_;
  int embed_dim_;
  int max_tokens_;
};

struct ModelComponents {
  const ImageEncoder* image = nullptr;
  // Heads, classifiers, text tower, prompts: everything off the deployed path.
  std::vector<const nn::Module*> training_only;
};

// deployed_only counts the image -> global embedding path alone.
std::size_t count_inference_params(const ModelComponents& model, bool deployed_only);

}  // namespace pivl::encoders
