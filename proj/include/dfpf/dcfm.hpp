#pragma once

#include <Eigen/Core>
#include <string>

#include "dfpf/config.hpp"
#include "dfpf/layers.hpp"

namespace dfpf {

// Token matrices: one row per token, one column per channel.
using Matrix = Eigen::MatrixXd;

// Row-stochastic weights softmax(Q K^T / sqrt(d)).
Matrix softmax_weights(const Matrix& q, const Matrix& k);
Matrix softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v);

double apply_phi(PhiKernel phi, double x);
// Kernelised attention phi(Q)(phi(K)^T V) normalised row-wise, O(N d^2).
Matrix linear_attention(const Matrix& q, const Matrix& k, const Matrix& v, PhiKernel phi);

// Adaptive average pooling of rows into n contiguous bins.
Matrix pool_agents(const Matrix& q, int n);
// Same on a row-major h x w token grid, pooled to a sqrt(n) x sqrt(n) grid.
Matrix pool_agents(const Matrix& q, int h, int w, int n);

// Two softmax stages through agent tokens A: V_A = softmax(A, K, V), then
// O = softmax(Q, A, V_A). Heads split the channel axis into equal blocks.
Matrix agent_attention_with_agents(const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& agents,
                                   int heads);
Matrix agent_attention(const Matrix& q, const Matrix& k, const Matrix& v, const AgentAttentionConfig& cfg);
Matrix agent_attention(const Matrix& q, const Matrix& k, const Matrix& v, int h, int w,
                       const AgentAttentionConfig& cfg);

// Per-channel Sobel magnitude sqrt(Gx^2 + Gy^2) with replicate padding.
// Requires H, W >= 3.
Var sobel_magnitude(const Var& x);
Tensor sobel_magnitude(const Tensor& x);

// Agent-token count actually used on an h x w grid (grid clamped to the map).
int effective_agent_grid(int num_agents, int64_t h, int64_t w, int64_t* grid_h, int64_t* grid_w);

// Gated residual reweighting: x + sigmoid(combine([a, e])) * x, where a is the
// agent-attention branch and e a 1x1 conv of the Sobel magnitude of x.
class DcfmBlock {
 public:
  DcfmBlock() = default;
  DcfmBlock(ParamStore& store, const std::string& name, int channels, const AgentAttentionConfig& attn,
            DcfmVariant variant, Rng& rng);

  Var operator()(const Var& x) const;
  // Fails with ConfigError when `variant` differs from the one built.
  Var forward(const Var& x, DcfmVariant variant) const;

  Var attention_branch(const Var& x) const;
  Var edge_branch(const Var& x) const;
  DcfmVariant variant() const { return variant_; }

 private:
  AgentAttentionConfig attn_cfg_;
  DcfmVariant variant_ = DcfmVariant::Full;
  LayerNorm2d norm_;
  Conv2d q_, k_, v_, proj_;
  Conv2d edge_;
  Conv2d combine_;
};

}  // namespace dfpf
