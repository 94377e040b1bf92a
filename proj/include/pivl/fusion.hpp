#pragma once

#include <array>
#include <cstdint>
#include <memory>

#include "pivl/encoders.hpp"

namespace pivl::fusion {

using ag::Var;

// Fused: F_out = pool(F2) + F3 + up(F4) (F3 dropped when include_c3 is off).
// C4Only: the alignment map is up(F4) alone, used by variants without the
// hierarchical head.
enum class HeadMode { Fused, C4Only };

struct FusionConfig {
  HeadMode mode = HeadMode::Fused;
  bool include_c3 = true;
  int dim = 64;
};

// Training-only stride-8 alignment head. Takes taps of either encoder
// variant; for the ViT variant the stride-4/16 maps are synthesized from the
// stride-8 token grid first.
class FusionHead final : public nn::Module {
 public:
  FusionHead(encoders::Variant variant, std::array<int, 3> tap_channels, const FusionConfig& cfg, std::uint64_t seed);

  // 1x1 pointwise projection c_i -> d of stage i in {2,3,4}.
  Var channel_align(int stage, const Var& c) const;
  // Requires strides {4,8,16} on aligned maps; returns [B, d, H/8, W/8].
  Var fuse(const Var& f2, const Var& f3, const Var& f4) const;
  // Stride-8 token grid -> {stride-4, stride-8, stride-16} maps.
  std::array<Var, 3> vit_pyramid(const Var& c3) const;

  // Alignment map F_out for the configured mode.
  Var forward(const encoders::FeaturePyramid& pyramid) const;

  const FusionConfig& config() const { return cfg_; }
  encoders::Variant variant() const { return variant_; }

  // Public for tests and checkpoint loading.
  std::unique_ptr<nn::Conv2d> proj2, proj3, proj4;
  std::unique_ptr<nn::Conv2d> vit_up;

 private:
  encoders::Variant variant_;
  FusionConfig cfg_;
};

// Checks tensor dims against strides relative to the stride-8 grid.
void check_pyramid_strides(const Var& f2, const Var& f3, const Var& f4);

}  // namespace pivl::fusion
