#include "dfpf/decoder.hpp"

#include <algorithm>

#include "dfpf/errors.hpp"

namespace dfpf {

UpsampleAlign UpsampleAlign::create(ParamStore& store, const std::string& name, int low_channels,
                                    int high_channels, Rng& rng) {
  return {Conv2d::create(store, name + ".proj", low_channels, high_channels, 1, 1, 0, true, Init::Conv, rng)};
}

Var UpsampleAlign::operator()(const Var& low, const Var& high) const {
  if (low.value().rank() != 4 || high.value().rank() != 4 || low.dim(0) != high.dim(0) ||
      low.dim(2) * 2 != high.dim(2) || low.dim(3) * 2 != high.dim(3)) {
    throw PreconditionError("upsample_align: low map " + shape_str(low.shape()) + " is not half the size of " +
                            shape_str(high.shape()));
  }
  if (proj.weight.dim(0) != high.dim(1)) throw ShapeError("upsample_align: projection width differs from high map");
  // A 1x1 projection commutes with bilinear resampling (weights sum to one),
  // so projecting first gives the same result on 4x fewer pixels.
  return ops::upsample_bilinear(proj(low), high.dim(2), high.dim(3));
}

AttentionGuidedFuse AttentionGuidedFuse::create(ParamStore& store, const std::string& name, int channels,
                                                int reduction, Rng& rng) {
  const int hidden = std::max(4, channels / reduction);
  AttentionGuidedFuse f;
  f.fc1 = Conv2d::create(store, name + ".fc1", 2 * channels, hidden, 1, 1, 0, true, Init::Conv, rng);
  f.fc2 = Conv2d::create(store, name + ".fc2", hidden, channels, 1, 1, 0, true, Init::Conv, rng);
  f.refine = ResidualBlock::create(store, name + ".refine", channels, channels, rng);
  return f;
}

Var AttentionGuidedFuse::weights(const Var& a, const Var& b) const {
  if (a.shape() != b.shape()) {
    throw PreconditionError("attention_guided_fuse: shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  }
  Var pooled = ops::adaptive_avg_pool2d(ops::concat_channels({a, b}), 1, 1);
  return ops::sigmoid(fc2(ops::relu(fc1(pooled))));
}

Var AttentionGuidedFuse::blend(const Var& a, const Var& b) const {
  Var w = weights(a, b);
  return ops::add(b, ops::mul_channel(ops::sub(a, b), w));
}

Decoder::Decoder(const ModelConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix) {
  const auto& ch = cfg.encoder.channels;
  for (int i = 0; i < kLevels - 1; ++i) {
    const std::string name = prefix + ".level" + std::to_string(i + 1);
    up_[i] = UpsampleAlign::create(store, name + ".up", ch[i + 1], ch[i], rng);
    fuse_[i] = AttentionGuidedFuse::create(store, name + ".fuse", ch[i], cfg.decoder_reduction, rng);
  }
  head_ = Conv2d::create(store, prefix + ".head", ch[0], 1, 3, 1, 1, true, Init::Projection, rng);
}

Var Decoder::operator()(std::span<const Var> levels) const {
  if (levels.size() != kLevels) {
    throw PreconditionError("decode expects 4 levels, got " + std::to_string(levels.size()));
  }
  for (int j = 1; j < kLevels; ++j) {
    if (!levels[j].defined() || levels[j].value().rank() != 4 || levels[j].dim(2) * 2 != levels[j - 1].dim(2) ||
        levels[j].dim(3) * 2 != levels[j - 1].dim(3)) {
      throw PreconditionError("decode: levels are not at strides 4/8/16/32");
    }
  }
  Var x = levels[kLevels - 1];
  for (int i = kLevels - 2; i >= 0; --i) x = fuse_[i](up_[i](x, levels[i]), levels[i]);
  Var up = ops::upsample_bilinear(x, x.dim(2) * 4, x.dim(3) * 4);
  return head_(up);
}

Var decode(std::span<const Var> levels, const Decoder& decoder) { return decoder(levels); }

}  // namespace dfpf
