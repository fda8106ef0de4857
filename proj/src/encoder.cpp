#include "dfpf/encoder.hpp"

#include "dfpf/errors.hpp"

namespace dfpf {

SpatialReductionAttention SpatialReductionAttention::create(ParamStore& store, const std::string& name,
                                                            int channels, int heads, int sr_ratio, Rng& rng) {
  if (channels % heads != 0) throw ConfigError(name + ": channels not divisible by heads");
  SpatialReductionAttention a;
  a.heads = heads;
  a.sr_ratio = sr_ratio;
  a.q = Conv2d::create(store, name + ".q", channels, channels, 1, 1, 0, true, Init::Projection, rng);
  a.k = Conv2d::create(store, name + ".k", channels, channels, 1, 1, 0, true, Init::Projection, rng);
  a.v = Conv2d::create(store, name + ".v", channels, channels, 1, 1, 0, true, Init::Projection, rng);
  if (sr_ratio > 1) {
    a.reduce = Conv2d::create(store, name + ".sr", channels, channels, sr_ratio, sr_ratio, 0, true, Init::Conv, rng);
    a.reduce_norm = LayerNorm2d::create(store, name + ".sr_norm", channels);
  }
  a.proj = Conv2d::create(store, name + ".proj", channels, channels, 1, 1, 0, true, Init::Projection, rng);
  return a;
}

Var SpatialReductionAttention::operator()(const Var& x) const {
  const int64_t h = x.dim(2), w = x.dim(3);
  if (h % sr_ratio != 0 || w % sr_ratio != 0) {
    throw ConfigError("spatial reduction ratio " + std::to_string(sr_ratio) + " does not divide token grid " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  Var query = q(x);
  Var source = reduce.defined() ? reduce_norm(reduce(x)) : x;
  return proj(ops::attention(query, k(source), v(source), heads));
}

Var spatial_reduction_attention(const Var& tokens, int h, int w, const SpatialReductionAttention& attn) {
  if (tokens.value().rank() != 3) throw ShapeError("tokens must be [B, C, N], got " + shape_str(tokens.shape()));
  const int64_t b = tokens.dim(0), c = tokens.dim(1), n = tokens.dim(2);
  if (n != static_cast<int64_t>(h) * w) {
    throw ShapeError("token count " + std::to_string(n) + " does not match grid " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  if (c != attn.q.weight.dim(1)) throw ShapeError("token width does not match attention parameters");
  Var grid = ops::reshape(tokens, {b, c, h, w});
  return ops::reshape(attn(grid), {b, c, n});
}

Var TransformerBlock::operator()(const Var& x) const {
  Var y = ops::add(x, attn(norm1(x)));
  return ops::add(y, fc2(ops::gelu(fc1(norm2(y)))));
}

PyramidEncoder::PyramidEncoder(const EncoderConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  int in_ch = 3;
  for (int j = 0; j < kLevels; ++j) {
    const std::string sp = prefix + ".stage" + std::to_string(j + 1);
    const int c = cfg_.channels[j];
    EncoderStage st;
    const int kernel = j == 0 ? 7 : 3;
    st.patch_embed = Conv2d::create(store, sp + ".patch_embed", in_ch, c, kernel, kPatchStrides[j], kernel / 2, true,
                                    Init::Conv, rng);
    st.embed_norm = LayerNorm2d::create(store, sp + ".embed_norm", c);
    for (int d = 0; d < cfg_.depths[j]; ++d) {
      const std::string bp = sp + ".block" + std::to_string(d + 1);
      TransformerBlock blk;
      blk.norm1 = LayerNorm2d::create(store, bp + ".norm1", c);
      blk.attn = SpatialReductionAttention::create(store, bp + ".attn", c, cfg_.heads[j], cfg_.sr_ratios[j], rng);
      blk.norm2 = LayerNorm2d::create(store, bp + ".norm2", c);
      blk.fc1 = Conv2d::create(store, bp + ".fc1", c, cfg_.mlp_hidden(j), 1, 1, 0, true, Init::Projection, rng);
      blk.fc2 = Conv2d::create(store, bp + ".fc2", cfg_.mlp_hidden(j), c, 1, 1, 0, true, Init::Projection, rng);
      st.blocks.push_back(std::move(blk));
    }
    st.out_norm = LayerNorm2d::create(store, sp + ".out_norm", c);
    stages_.push_back(std::move(st));
    in_ch = c;
  }
}

void check_image_batch(const Tensor& image) {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw PreconditionError("image batch must be [B, 3, H, W], got " + shape_str(image.shape()));
  }
  const int64_t h = image.dim(2), w = image.dim(3);
  if (h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0) {
    throw PreconditionError("image height and width must be multiples of 32 and at least 32, got " +
                            std::to_string(h) + "x" + std::to_string(w));
  }
  if (!image.all_finite()) throw PreconditionError("image batch contains non-finite values");
}

FeaturePyramid PyramidEncoder::operator()(const Var& image) const {
  check_image_batch(image.value());
  FeaturePyramid out;
  Var x = image;
  for (int j = 0; j < kLevels; ++j) {
    const EncoderStage& st = stages_[j];
    x = st.embed_norm(st.patch_embed(x));
    for (const auto& blk : st.blocks) x = blk(x);
    x = st.out_norm(x);
    out.levels[j] = x;
  }
  return out;
}

FeaturePyramid encode_pyramid(const Var& image, const PyramidEncoder& encoder) { return encoder(image); }

std::pair<FeaturePyramid, FeaturePyramid> siamese_encode(const Var& image_a, const Var& image_b,
                                                         const PyramidEncoder& encoder) {
  if (image_a.shape() != image_b.shape()) {
    throw PreconditionError("bi-temporal images differ in shape: " + shape_str(image_a.shape()) + " vs " +
                            shape_str(image_b.shape()));
  }
  return {encoder(image_a), encoder(image_b)};
}

}  // namespace dfpf
