#pragma once

#include <array>
#include <span>
#include <string>

#include "dfpf/config.hpp"
#include "dfpf/layers.hpp"

namespace dfpf {

// Bilinear 2x upsampling of `low` plus a 1x1 projection to `high`'s width.
struct UpsampleAlign {
  Conv2d proj;

  static UpsampleAlign create(ParamStore& store, const std::string& name, int low_channels, int high_channels,
                              Rng& rng);
  Var operator()(const Var& low, const Var& high) const;
};

// Channel attention w = sigmoid(fc2(relu(fc1(avgpool([a, b]))))) blends the
// inputs as w * a + (1 - w) * b before a residual block.
struct AttentionGuidedFuse {
  Conv2d fc1, fc2;
  ResidualBlock refine;

  static AttentionGuidedFuse create(ParamStore& store, const std::string& name, int channels, int reduction,
                                    Rng& rng);
  Var weights(const Var& a, const Var& b) const;
  Var blend(const Var& a, const Var& b) const;
  Var operator()(const Var& a, const Var& b) const { return refine(blend(a, b)); }
};

// Top-down cross-scale decoder: level 4 -> 3 -> 2 -> 1, then 4x bilinear
// upsampling and a 3x3 conv head producing one logit per input pixel.
class Decoder {
 public:
  Decoder() = default;
  Decoder(const ModelConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix = "decoder");

  Var operator()(std::span<const Var> levels) const;
  const UpsampleAlign& upsample(int i) const { return up_.at(i); }
  const AttentionGuidedFuse& fuse(int i) const { return fuse_.at(i); }

 private:
  std::array<UpsampleAlign, kLevels - 1> up_;       // index i lifts level i+2 onto level i+1 (1-based)
  std::array<AttentionGuidedFuse, kLevels - 1> fuse_;
  Conv2d head_;
};

Var decode(std::span<const Var> levels, const Decoder& decoder);

}  // namespace dfpf
