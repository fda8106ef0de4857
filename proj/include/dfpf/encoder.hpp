#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "dfpf/config.hpp"
#include "dfpf/layers.hpp"

namespace dfpf {

// Four feature maps at strides 4, 8, 16, 32.
struct FeaturePyramid {
  std::array<Var, kLevels> levels;
};

// Multi-head attention whose keys and values come from a strided-conv
// reduction of the token grid (sr_ratio x sr_ratio patches -> one token).
struct SpatialReductionAttention {
  Conv2d q, k, v, proj;
  Conv2d reduce;  // undefined when sr_ratio == 1
  LayerNorm2d reduce_norm;
  int heads = 1;
  int sr_ratio = 1;

  static SpatialReductionAttention create(ParamStore& store, const std::string& name, int channels, int heads,
                                          int sr_ratio, Rng& rng);
  // x is a [B, C, h, w] token grid.
  Var operator()(const Var& x) const;
};

// Token-sequence entry point: tokens are channel-major [B, C, N] with N = h * w.
Var spatial_reduction_attention(const Var& tokens, int h, int w, const SpatialReductionAttention& attn);

// Pre-norm transformer block: x + attn(LN(x)), then x + MLP(LN(x)).
struct TransformerBlock {
  LayerNorm2d norm1;
  SpatialReductionAttention attn;
  LayerNorm2d norm2;
  Conv2d fc1, fc2;

  Var operator()(const Var& x) const;
};

struct EncoderStage {
  Conv2d patch_embed;
  LayerNorm2d embed_norm;
  std::vector<TransformerBlock> blocks;
  LayerNorm2d out_norm;
};

class PyramidEncoder {
 public:
  PyramidEncoder() = default;
  PyramidEncoder(const EncoderConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix = "encoder");

  // Encodes a [B, 3, H, W] batch; H and W must be multiples of 32 and >= 32.
  FeaturePyramid operator()(const Var& image) const;

  const EncoderConfig& config() const { return cfg_; }
  const EncoderStage& stage(int j) const { return stages_.at(j); }

 private:
  EncoderConfig cfg_;
  std::vector<EncoderStage> stages_;
};

void check_image_batch(const Tensor& image);

FeaturePyramid encode_pyramid(const Var& image, const PyramidEncoder& encoder);

// Both images pass through the same encoder instance.
std::pair<FeaturePyramid, FeaturePyramid> siamese_encode(const Var& image_a, const Var& image_b,
                                                         const PyramidEncoder& encoder);

}  // namespace dfpf
