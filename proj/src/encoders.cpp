#include "pivl/encoders.hpp"

#include <cmath>
#include <stdexcept>

namespace pivl::encoders {

Variant parse_variant(const std::string& name) {
  if (name == "conv") return Variant::Conv;
  if (name == "vit") return Variant::Vit;
  throw std::invalid_argument("unknown encoder variant '" + name + "' (expected conv|vit)");
}

std::string variant_name(Variant v) { return v == Variant::Conv ? "conv" : "vit"; }

void ImageEncoder::check_input(const Var& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.image_height || s[3] != cfg_.image_width)
    throw std::invalid_argument("image encoder expects [B,3," + std::to_string(cfg_.image_height) + "," +
                                std::to_string(cfg_.image_width) + "], got " + shape_str(s));
}

Var self_attention(const Var& x, int batch, int seq, const nn::Linear& q, const nn::Linear& k, const nn::Linear& v,
                   const nn::Linear& o) {
  const Var qs = q.forward(x), ks = k.forward(x), vs = v.forward(x);
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.out_features()));
  std::vector<Var> outs;
  outs.reserve(batch);
  for (int b = 0; b < batch; ++b) {
    const int lo = b * seq, hi = lo + seq;
    const Var scores = ag::scale(ag::matmul_nt(ag::slice_rows(qs, lo, hi), ag::slice_rows(ks, lo, hi)), inv);
    outs.push_back(ag::matmul(ag::softmax_rows(scores), ag::slice_rows(vs, lo, hi)));
  }
  return o.forward(batch == 1 ? outs.front() : ag::concat_rows(outs));
}

// ---------------------------------------------------------------------- conv

ConvEncoder::ConvEncoder(const EncoderConfig& cfg, std::uint64_t seed) : ImageEncoder(cfg) {
  if (cfg.image_height % 16 || cfg.image_width % 16)
    throw std::invalid_argument("conv encoder needs image dims divisible by 16");
  if (cfg.last_stride != 1 && cfg.last_stride != 2) throw std::invalid_argument("last_stride must be 1 or 2");
  nn::Rng rng(seed);
  const auto& ch = cfg.channels;
  stem_ = std::make_unique<nn::Conv2d>(3, ch[0], 3, 2, 1, rng);
  register_module("stem", *stem_);
  for (int i = 0; i < 3; ++i) {
    const int stride = (i == 2) ? cfg.last_stride : 2;
    stages_[i].down = std::make_unique<nn::Conv2d>(ch[i], ch[i + 1], 3, stride, 1, rng);
    stages_[i].res_a = std::make_unique<nn::Conv2d>(ch[i + 1], ch[i + 1], 3, 1, 1, rng);
    stages_[i].res_b = std::make_unique<nn::Conv2d>(ch[i + 1], ch[i + 1], 3, 1, 1, rng);
    // Residual branches start small so the identity path dominates early.
    for (double& w : stages_[i].res_b->weight.mutable_value().data) w *= 0.1;
    const std::string name = "stage" + std::to_string(i + 2);
    register_module(name + ".down", *stages_[i].down);
    register_module(name + ".res_a", *stages_[i].res_a);
    register_module(name + ".res_b", *stages_[i].res_b);
  }
  const int c4 = ch[3];
  const int tokens = (cfg.image_height / (8 * cfg.last_stride)) * (cfg.image_width / (8 * cfg.last_stride)) + 1;
  pool_norm_ = std::make_unique<nn::LayerNorm>(c4);
  pool_pos_ = Var(nn::normal_tensor({tokens, c4}, 1.0 / std::sqrt(static_cast<double>(c4)), rng), true);
  pool_q_ = std::make_unique<nn::Linear>(c4, c4, rng);
  pool_k_ = std::make_unique<nn::Linear>(c4, c4, rng);
  pool_v_ = std::make_unique<nn::Linear>(c4, c4, rng);
  pool_out_ = std::make_unique<nn::Linear>(c4, cfg.embed_dim, rng);
  register_module("attnpool.norm", *pool_norm_);
  register_parameter("attnpool.pos", pool_pos_);
  register_module("attnpool.q", *pool_q_);
  register_module("attnpool.k", *pool_k_);
  register_module("attnpool.v", *pool_v_);
  register_module("attnpool.out", *pool_out_);
  set_trainable(cfg.trainable);
}

Var ConvEncoder::run_stage(const Stage& s, const Var& x) const {
  const Var y = ag::relu(s.down->forward(x));
  const Var r = s.res_b->forward(ag::relu(s.res_a->forward(y)));
  return ag::relu(ag::add(y, r));
}

FeaturePyramid ConvEncoder::forward(const Var& images) const {
  check_input(images);
  FeaturePyramid out;
  const Var stem = ag::relu(stem_->forward(images));
  out.c2 = run_stage(stages_[0], stem);
  out.c3 = run_stage(stages_[1], out.c2);
  out.c4 = run_stage(stages_[2], out.c3);
  out.stride4 = 8 * cfg_.last_stride;

  // Attention pooling: the mean token queries all C4 tokens.
  const int b = images.dim(0);
  const int t = out.c4.dim(2) * out.c4.dim(3);
  const Var rows = pool_norm_->forward(ag::nchw_to_rows(out.c4));
  const Var means = ag::segment_mean_rows(rows, t);
  std::vector<Var> seqs;
  seqs.reserve(2 * b);
  for (int n = 0; n < b; ++n) {
    seqs.push_back(ag::slice_rows(means, n, n + 1));
    seqs.push_back(ag::slice_rows(rows, n * t, (n + 1) * t));
  }
  const Var seq = ag::add_tiled(ag::concat_rows(seqs), pool_pos_);
  const Var keys = pool_k_->forward(seq);
  const Var vals = pool_v_->forward(seq);
  const double inv = 1.0 / std::sqrt(static_cast<double>(pool_q_->out_features()));
  std::vector<Var> pooled;
  pooled.reserve(b);
  for (int n = 0; n < b; ++n) {
    const int lo = n * (t + 1), hi = lo + t + 1;
    const Var q = pool_q_->forward(ag::slice_rows(seq, lo, lo + 1));
    const Var att = ag::softmax_rows(ag::scale(ag::matmul_nt(q, ag::slice_rows(keys, lo, hi)), inv));
    pooled.push_back(ag::matmul(att, ag::slice_rows(vals, lo, hi)));
  }
  out.global = pool_out_->forward(ag::concat_rows(pooled));
  return out;
}

// ----------------------------------------------------------------------- vit

VitEncoder::VitEncoder(const EncoderConfig& cfg, std::uint64_t seed) : ImageEncoder(cfg) {
  if (cfg.patch != 8) throw std::invalid_argument("vit patch stride is fixed at 8");
  if (cfg.image_height % 16 || cfg.image_width % 16)
    throw std::invalid_argument("vit encoder needs image dims divisible by 16");
  nn::Rng rng(seed);
  const int d = cfg.vit_dim;
  const int tokens = (cfg.image_height / 8) * (cfg.image_width / 8) + 1;
  patch_ = std::make_unique<nn::Conv2d>(3, d, 8, 8, 0, rng);
  cls_ = Var(nn::normal_tensor({1, d}, 0.02, rng), true);
  pos_ = Var(nn::normal_tensor({tokens, d}, 0.02, rng), true);
  register_module("patch", *patch_);
  register_parameter("cls", cls_);
  register_parameter("pos", pos_);
  blocks_.resize(cfg.vit_depth);
  for (int i = 0; i < cfg.vit_depth; ++i) {
    Block& blk = blocks_[i];
    blk.ln1 = std::make_unique<nn::LayerNorm>(d);
    blk.ln2 = std::make_unique<nn::LayerNorm>(d);
    blk.q = std::make_unique<nn::Linear>(d, d, rng);
    blk.k = std::make_unique<nn::Linear>(d, d, rng);
    blk.v = std::make_unique<nn::Linear>(d, d, rng);
    blk.o = std::make_unique<nn::Linear>(d, d, rng, true, 0.02);
    blk.fc1 = std::make_unique<nn::Linear>(d, 2 * d, rng);
    blk.fc2 = std::make_unique<nn::Linear>(2 * d, d, rng, true, 0.02);
    const std::string p = "block" + std::to_string(i) + ".";
    register_module(p + "ln1", *blk.ln1);
    register_module(p + "ln2", *blk.ln2);
    register_module(p + "q", *blk.q);
    register_module(p + "k", *blk.k);
    register_module(p + "v", *blk.v);
    register_module(p + "o", *blk.o);
    register_module(p + "fc1", *blk.fc1);
    register_module(p + "fc2", *blk.fc2);
  }
  final_norm_ = std::make_unique<nn::LayerNorm>(d);
  proj_ = std::make_unique<nn::Linear>(d, cfg.embed_dim, rng);
  register_module("final_norm", *final_norm_);
  register_module("proj", *proj_);
  set_trainable(cfg.trainable);
}

FeaturePyramid VitEncoder::forward(const Var& images) const {
  check_input(images);
  const int b = images.dim(0);
  const Var grid = patch_->forward(images);
  const int gh = grid.dim(2), gw = grid.dim(3), t = gh * gw;
  const Var tokens = ag::nchw_to_rows(grid);
  std::vector<Var> seqs;
  seqs.reserve(2 * b);
  for (int n = 0; n < b; ++n) {
    seqs.push_back(cls_);
    seqs.push_back(ag::slice_rows(tokens, n * t, (n + 1) * t));
  }
  Var x = ag::add_tiled(ag::concat_rows(seqs), pos_);
  for (const Block& blk : blocks_) {
    x = ag::add(x, self_attention(blk.ln1->forward(x), b, t + 1, *blk.q, *blk.k, *blk.v, *blk.o));
    x = ag::add(x, blk.fc2->forward(ag::gelu(blk.fc1->forward(blk.ln2->forward(x)))));
  }
  x = final_norm_->forward(x);
  std::vector<int> cls_rows, token_rows;
  for (int n = 0; n < b; ++n) {
    cls_rows.push_back(n * (t + 1));
    for (int i = 1; i <= t; ++i) token_rows.push_back(n * (t + 1) + i);
  }
  FeaturePyramid out;
  out.global = proj_->forward(ag::index_rows(x, cls_rows));
  out.c3 = ag::rows_to_nchw(ag::index_rows(x, token_rows), b, gh, gw);
  return out;
}

std::unique_ptr<ImageEncoder> make_image_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.variant == Variant::Conv) return std::make_unique<ConvEncoder>(cfg, seed);
  return std::make_unique<VitEncoder>(cfg, seed);
}

// ---------------------------------------------------------------------- text

TextEncoder::TextEncoder(int text_dim, int embed_dim, int max_tokens, std::uint64_t seed)
    : text_dim_(text_dim), embed_dim_(embed_dim), max_tokens_(max_tokens) {
  if (text_dim <= 0 || embed_dim <= 0 || max_tokens <= 0) throw std::invalid_argument("text encoder dims must be positive");
  nn::Rng rng(seed);
  pos = Var(nn::normal_tensor({max_tokens, text_dim}, 0.02, rng), false);
  ln_attn = std::make_unique<nn::LayerNorm>(text_dim);
  ln_out = std::make_unique<nn::LayerNorm>(text_dim);
  q = std::make_unique<nn::Linear>(text_dim, text_dim, rng);
  k = std::make_unique<nn::Linear>(text_dim, text_dim, rng);
  v = std::make_unique<nn::Linear>(text_dim, text_dim, rng);
  o = std::make_unique<nn::Linear>(text_dim, text_dim, rng);
  fc1 = std::make_unique<nn::Linear>(text_dim, 2 * text_dim, rng);
  fc2 = std::make_unique<nn::Linear>(2 * text_dim, embed_dim, rng);
  register_parameter("pos", pos);
  register_module("ln_attn", *ln_attn);
  register_module("q", *q);
  register_module("k", *k);
  register_module("v", *v);
  register_module("o", *o);
  register_module("ln_out", *ln_out);
  register_module("fc1", *fc1);
  register_module("fc2", *fc2);
  set_trainable(false);
}

Var TextEncoder::forward(const Var& tokens) const {
  if (tokens.value().rank() != 2 || tokens.dim(1) != text_dim_)
    throw std::invalid_argument("text encoder expects [L," + std::to_string(text_dim_) + "], got " +
                                shape_str(tokens.shape()));
  const int len = tokens.dim(0);
  if (len == 0) throw std::invalid_argument("text encoder: empty token sequence");
  if (len > max_tokens_)
    throw std::invalid_argument("text encoder: " + std::to_string(len) + " tokens exceeds max " +
                                std::to_string(max_tokens_));
  const Var h0 = ag::add(tokens, ag::slice_rows(pos, 0, len));
  const Var h1 = ag::add(h0, self_attention(ln_attn->forward(h0), 1, len, *q, *k, *v, *o));
  const Var pooled = ln_out->forward(ag::segment_mean_rows(h1, len));
  return fc2->forward(ag::relu(fc1->forward(pooled)));
}

std::size_t count_inference_params(const ModelComponents& model, bool deployed_only) {
  std::size_t n = model.image ? model.image->parameter_count() : 0;
  if (!deployed_only)
    for (const nn::Module* m : model.training_only)
      if (m) n += m->parameter_count();
  return n;
}

}  // namespace pivl::encoders
