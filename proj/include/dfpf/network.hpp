#pragma once

#include <array>
#include <memory>

#include "dfpf/config.hpp"
#include "dfpf/dcfm.hpp"
#include "dfpf/decoder.hpp"
#include "dfpf/encoder.hpp"
#include "dfpf/pefm.hpp"

namespace dfpf {

// Intermediate activations of one forward pass.
struct ForwardTrace {
  FeaturePyramid enc_a, enc_b;
  std::array<FusedLevel, kLevels> fused;
  std::array<Var, kLevels> focused;
  Var logits;  // [B, 1, H, W]
};

// Siamese encoder -> per-level fusion -> per-level change focus -> decoder.
class ChangeDetector {
 public:
  ChangeDetector(const ModelConfig& cfg, uint64_t seed);
  ChangeDetector(const ChangeDetector&) = delete;
  ChangeDetector& operator=(const ChangeDetector&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const PyramidEncoder& encoder() const { return encoder_; }
  const Pefm& pefm() const { return pefm_; }
  const DcfmBlock& dcfm(int level) const { return dcfm_.at(level); }
  const Decoder& decoder() const { return decoder_; }

  ForwardTrace trace(const Var& image_a, const Var& image_b) const;
  Var logits(const Var& image_a, const Var& image_b) const { return trace(image_a, image_b).logits; }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  PyramidEncoder encoder_;
  Pefm pefm_;
  ConcatFusion concat_;
  std::array<DcfmBlock, kLevels> dcfm_;
  Decoder decoder_;
};

// Change probabilities sigmoid(logits) for [B, 3, H, W] image batches,
// computed without recording a tape.
Tensor full_forward(const ChangeDetector& model, const Tensor& image_a, const Tensor& image_b);

// probs >= threshold -> 1, else 0.
Tensor binarize(const Tensor& probs, double threshold);

}  // namespace dfpf
