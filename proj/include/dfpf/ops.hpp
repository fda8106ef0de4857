#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>

#include "dfpf/autograd.hpp"

// Differentiable primitives. Feature maps are [B, C, H, W]; token sequences
// are stored channel-major as [B, C, N] so that per-token linear projections
// are 1x1 convolutions.
namespace dfpf::ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var abs(const Var& a);
Var relu(const Var& a);
// Exact (erf) form.
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var reshape(const Var& a, Shape shape);

// Concatenates [B, C_i, ...] maps along axis 1.
Var concat_channels(std::span<const Var> parts);
Var concat_channels(std::initializer_list<Var> parts);

// Cross-correlation with zero padding. `bias` may be undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

// Layer normalisation over axis 1 of [B, C, ...], independently per position.
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

// x [B, C, H, W] scaled by per-(b, c) weights w [B, C, 1, 1].
Var mul_channel(const Var& x, const Var& w);

// Adaptive average pooling with floor/ceil bin edges.
Var adaptive_avg_pool2d(const Var& x, int64_t out_h, int64_t out_w);

// Bilinear resampling, half-pixel centres (align_corners = false).
Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w);

// Multi-head scaled dot-product attention. q is [B, C, Nq, ...], k and v are
// [B, C, Nk, ...]; trailing axes are flattened into the token axis. Each head
// uses C / heads channels and logits scaled by 1 / sqrt(C / heads). Output has
// q's shape.
Var attention(const Var& q, const Var& k, const Var& v, int heads);

// Per-channel Sobel gradient magnitude with replicate padding. Accepts any
// spatial size; the checked public entry point lives in dcfm.hpp.
Var sobel_magnitude(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
// sum(x * w) for a constant weight tensor.
Var dot(const Var& x, const Tensor& w);

// Mean binary cross-entropy on probabilities, clamped to [eps, 1 - eps].
Var bce_loss(const Var& probs, const Tensor& target, double eps);
// Same value as bce_loss(sigmoid(logits)); the gradient is the unclamped
// (sigmoid(z) - y) / N so saturated logits still receive signal.
Var bce_with_logits(const Var& logits, const Tensor& target, double eps);

// Multiply-accumulate tally of conv2d, attention and Sobel calls on this thread.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  uint64_t count() const;

 private:
  uint64_t start_;
};

// Receives every row-stochastic weight matrix an attention call produces
// while in scope (rows x cols, row-major).
using AttentionObserver = std::function<void(const double* weights, int64_t rows, int64_t cols)>;

class ScopedAttentionObserver {
 public:
  explicit ScopedAttentionObserver(AttentionObserver observer);
  ~ScopedAttentionObserver();
  ScopedAttentionObserver(const ScopedAttentionObserver&) = delete;
  ScopedAttentionObserver& operator=(const ScopedAttentionObserver&) = delete;

 private:
  AttentionObserver previous_;
};

}  // namespace dfpf::ops
