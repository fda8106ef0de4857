#pragma once

#include <cstdint>

#include "dfpf/config.hpp"

namespace dfpf {

struct Cost {
  int64_t params = 0;
  int64_t macs = 0;  // multiply-accumulates

  Cost& operator+=(const Cost& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
  friend Cost operator+(Cost a, const Cost& b) { return a += b; }
  friend bool operator==(const Cost&, const Cost&) = default;
};

struct ConvCost {
  Cost cost;
  int64_t out_h = 0;
  int64_t out_w = 0;
};

// One square-kernel convolution on an h x w input, batch 1.
ConvCost conv2d_cost(int64_t cin, int64_t cout, int kernel, int stride, int pad, bool bias, int64_t h, int64_t w);
Cost layer_norm_cost(int64_t channels);
// softmax(q k^T) v with nq queries, nk keys, total width `channels`.
Cost attention_cost(int64_t nq, int64_t nk, int64_t channels);
Cost sobel_cost(int64_t channels, int64_t h, int64_t w);

struct ParamsFlops {
  int64_t params = 0;
  // Multiply-accumulates of one forward pass: convolutions, projections and
  // attention products. Elementwise ops, norms and resampling are not counted.
  int64_t flops = 0;
};

// Analytic count for a single [1, 3, height, width] pair.
ParamsFlops count_params_flops(const ModelConfig& cfg, int64_t height, int64_t width);

}  // namespace dfpf
