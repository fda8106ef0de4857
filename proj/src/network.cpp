#include "dfpf/network.hpp"

namespace dfpf {

ChangeDetector::ChangeDetector(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  encoder_ = PyramidEncoder(cfg_.encoder, params_, rng);
  if (cfg_.use_pefm) {
    pefm_ = Pefm(cfg_.encoder, params_, rng);
  } else {
    concat_ = ConcatFusion(cfg_.encoder, params_, rng);
  }
  if (cfg_.use_dcfm) {
    for (int j = 0; j < kLevels; ++j) {
      dcfm_[j] = DcfmBlock(params_, "dcfm.level" + std::to_string(j + 1), cfg_.encoder.channels[j],
                           cfg_.agent_config(j), cfg_.dcfm_variant, rng);
    }
  }
  decoder_ = Decoder(cfg_, params_, rng);
}

ForwardTrace ChangeDetector::trace(const Var& image_a, const Var& image_b) const {
  ForwardTrace t;
  std::tie(t.enc_a, t.enc_b) = siamese_encode(image_a, image_b, encoder_);
  t.fused = cfg_.use_pefm ? pefm_(t.enc_a, t.enc_b) : concat_(t.enc_a, t.enc_b);
  for (int j = 0; j < kLevels; ++j) t.focused[j] = cfg_.use_dcfm ? dcfm_[j](t.fused[j].deep) : t.fused[j].deep;
  t.logits = decoder_(t.focused);
  return t;
}

Tensor full_forward(const ChangeDetector& model, const Tensor& image_a, const Tensor& image_b) {
  NoGradGuard guard;
  return ops::sigmoid(model.logits(Var(image_a), Var(image_b))).value();
}

Tensor binarize(const Tensor& probs, double threshold) {
  Tensor out(probs.shape());
  for (size_t i = 0; i < probs.numel(); ++i) out[i] = probs[i] >= threshold ? 1.0 : 0.0;
  return out;
}

}  // namespace dfpf
