#pragma once

#include <array>
#include <string>
#include <utility>

#include "dfpf/encoder.hpp"

namespace dfpf {

// Output of the progressive fusion at one pyramid level.
struct FusedLevel {
  Var shallow;  // R1 output; undefined under the concat-only ablation
  Var deep;     // R2 output, the level's fused feature
  int level_index = 0;
};

// 3x3 conv + norm + ReLU applied to one temporal branch before cross interaction.
Var preprocess_conv(const Var& x, const ConvNormAct& conv);

// Elementwise |x2 - x1|.
Var abs_difference(const Var& x1, const Var& x2);

// R1 over [x1, x2, diff] concatenated along channels.
Var shallow_fuse(const Var& x1, const Var& x2, const Var& diff, const ResidualBlock& r1);

// (x1p * x2, x2p * x1), elementwise.
std::pair<Var, Var> cross_interact(const Var& x1p, const Var& x2p, const Var& x1, const Var& x2);

// R2 over [cross1, cross2, shallow] concatenated along channels.
Var deep_fuse(const Var& cross1, const Var& cross2, const Var& shallow, const ResidualBlock& r2);

struct PefmLevel {
  ConvNormAct pre1, pre2;  // separate parameters per temporal branch
  ResidualBlock r1, r2;

  static PefmLevel create(ParamStore& store, const std::string& name, int channels, Rng& rng);
  FusedLevel operator()(const Var& x1, const Var& x2, int level) const;
};

class Pefm {
 public:
  Pefm() = default;
  Pefm(const EncoderConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix = "pefm");

  std::array<FusedLevel, kLevels> operator()(const FeaturePyramid& p1, const FeaturePyramid& p2) const;
  const PefmLevel& level(int j) const { return levels_.at(j); }

 private:
  std::array<PefmLevel, kLevels> levels_;
};

// Concat-only replacement used by the no-PEFM ablation: 1x1 projection of [x1, x2].
class ConcatFusion {
 public:
  ConcatFusion() = default;
  ConcatFusion(const EncoderConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix = "concat_fusion");

  std::array<FusedLevel, kLevels> operator()(const FeaturePyramid& p1, const FeaturePyramid& p2) const;

 private:
  std::array<Conv2d, kLevels> proj_;
};

std::array<FusedLevel, kLevels> pefm_forward(const FeaturePyramid& p1, const FeaturePyramid& p2, const Pefm& pefm);

}  // namespace dfpf
