#include "pivl/fusion.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace pivl::fusion {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

FusionHead::FusionHead(encoders::Variant variant, std::array<int, 3> tap_channels, const FusionConfig& cfg,
                       std::uint64_t seed)
    : variant_(variant), cfg_(cfg) {
  require(cfg.dim > 0, "fusion dim must be > 0");
  nn::Rng rng(seed);
  const int c3 = tap_channels[1];
  require(c3 > 0, "fusion head needs a stride-8 tap");
  std::array<int, 3> ch = tap_channels;
  if (variant == encoders::Variant::Vit) ch = {c3, c3, c3};
  require(ch[0] > 0 && ch[2] > 0, "fusion head needs stride-4 and stride-16 taps");

  proj4 = std::make_unique<nn::Conv2d>(ch[2], cfg.dim, 1, 1, 0, rng);
  register_module("proj4", *proj4);
  if (cfg.mode == HeadMode::Fused) {
    proj2 = std::make_unique<nn::Conv2d>(ch[0], cfg.dim, 1, 1, 0, rng);
    register_module("proj2", *proj2);
    if (cfg.include_c3) {
      proj3 = std::make_unique<nn::Conv2d>(ch[1], cfg.dim, 1, 1, 0, rng);
      register_module("proj3", *proj3);
    }
  }
  if (variant == encoders::Variant::Vit) {
    vit_up = std::make_unique<nn::Conv2d>(c3, c3, 3, 1, 1, rng);
    vit_up->mode = ag::PadMode::Replicate;
    // Every output channel starts as the 3x3 box mean of its own input
    // channel, so constant maps pass through unchanged.
    Tensor& w = vit_up->weight.mutable_value();
    std::fill(w.data.begin(), w.data.end(), 0.0);
    for (int c = 0; c < c3; ++c)
      for (int k = 0; k < 9; ++k) w.data[(static_cast<std::size_t>(c) * c3 + c) * 9 + k] = 1.0 / 9.0;
    register_module("vit_up", *vit_up);
  }
}

Var FusionHead::channel_align(int stage, const Var& c) const {
  const nn::Conv2d* p = stage == 2 ? proj2.get() : stage == 3 ? proj3.get() : stage == 4 ? proj4.get() : nullptr;
  require(stage >= 2 && stage <= 4, "channel_align: stage must be 2, 3 or 4");
  require(p != nullptr, "channel_align: stage " + std::to_string(stage) + " is not part of this head");
  require(c.value().rank() == 4 && c.dim(1) == p->weight.dim(1),
          "channel_align: stage " + std::to_string(stage) + " expects " + std::to_string(p->weight.dim(1)) +
              " channels, got " + shape_str(c.shape()));
  return p->forward(c);
}

void check_pyramid_strides(const Var& f2, const Var& f3, const Var& f4) {
  require(f2.value().rank() == 4 && f3.value().rank() == 4 && f4.value().rank() == 4, "fuse expects NCHW maps");
  const int h = f3.dim(2), w = f3.dim(3);
  if (f2.dim(2) != 2 * h || f2.dim(3) != 2 * w || f4.dim(2) * 2 != h || f4.dim(3) * 2 != w)
    throw std::invalid_argument("fuse: stride mismatch, got " + shape_str(f2.shape()) + " / " + shape_str(f3.shape()) +
                                " / " + shape_str(f4.shape()) + " (need strides 4/8/16)");
  require(f2.dim(0) == f3.dim(0) && f4.dim(0) == f3.dim(0), "fuse: batch mismatch");
  require(f2.dim(1) == f3.dim(1) && f4.dim(1) == f3.dim(1), "fuse: channel mismatch");
}

Var FusionHead::fuse(const Var& f2, const Var& f3, const Var& f4) const {
  check_pyramid_strides(f2, f3, f4);
  Var out = ag::add(ag::avg_pool2x2(f2), ag::upsample_bilinear2x(f4));
  if (cfg_.include_c3) out = ag::add(out, f3);
  return out;
}

std::array<Var, 3> FusionHead::vit_pyramid(const Var& c3) const {
  require(vit_up != nullptr, "vit_pyramid: head was built for the conv variant");
  require(c3.value().rank() == 4, "vit_pyramid: token map must be reshaped to [B,C,h,w]");
  require(c3.dim(2) % 2 == 0 && c3.dim(3) % 2 == 0,
          "vit_pyramid: token grid " + shape_str(c3.shape()) + " cannot be pooled to stride 16");
  return {vit_up->forward(ag::upsample_nearest2x(c3)), c3, ag::avg_pool2x2(c3)};
}

Var FusionHead::forward(const encoders::FeaturePyramid& pyramid) const {
  Var c2 = pyramid.c2, c3 = pyramid.c3, c4 = pyramid.c4;
  require(c3.defined(), "fusion: pyramid has no stride-8 map");
  if (variant_ == encoders::Variant::Vit) {
    auto synth = vit_pyramid(c3);
    c2 = synth[0];
    c4 = synth[2];
  }
  require(c4.defined(), "fusion: pyramid has no stride-16 map");
  if (cfg_.mode == HeadMode::C4Only) {
    const Var f4 = channel_align(4, c4);
    require(f4.dim(2) * 2 == c3.dim(2) && f4.dim(3) * 2 == c3.dim(3), "fusion: C4 is not at stride 16");
    return ag::upsample_bilinear2x(f4);
  }
  require(c2.defined(), "fusion: pyramid has no stride-4 map");
  const Var f2 = channel_align(2, c2);
  const Var f4 = channel_align(4, c4);
  // The literal two-term form still needs the stride-8 grid for shape checks.
  const Var f3 = cfg_.include_c3 ? channel_align(3, c3) : Var(Tensor({f2.dim(0), cfg_.dim, c3.dim(2), c3.dim(3)}));
  return fuse(f2, f3, f4);
}

}  // namespace pivl::fusion
