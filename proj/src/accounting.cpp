#include "dfpf/accounting.hpp"

#include <algorithm>

#include "dfpf/dcfm.hpp"
#include "dfpf/errors.hpp"

namespace dfpf {

ConvCost conv2d_cost(int64_t cin, int64_t cout, int kernel, int stride, int pad, bool bias, int64_t h, int64_t w) {
  if (cin <= 0 || cout <= 0 || kernel <= 0 || stride <= 0 || pad < 0) throw PreconditionError("conv2d_cost: bad geometry");
  ConvCost c;
  c.out_h = (h + 2 * pad - kernel) / stride + 1;
  c.out_w = (w + 2 * pad - kernel) / stride + 1;
  c.cost.params = cin * cout * kernel * kernel + (bias ? cout : 0);
  c.cost.macs = cin * cout * kernel * kernel * c.out_h * c.out_w;
  return c;
}

Cost layer_norm_cost(int64_t channels) { return {2 * channels, 0}; }

Cost attention_cost(int64_t nq, int64_t nk, int64_t channels) { return {0, 2 * nq * nk * channels}; }

Cost sobel_cost(int64_t channels, int64_t h, int64_t w) { return {0, 18 * channels * h * w}; }

namespace {

Cost pointwise(int64_t cin, int64_t cout, bool bias, int64_t n) {
  return conv2d_cost(cin, cout, 1, 1, 0, bias, n, 1).cost;
}

Cost residual_block(int64_t cin, int64_t cout, int64_t h, int64_t w) {
  Cost c = conv2d_cost(cin, cout, 3, 1, 1, true, h, w).cost + layer_norm_cost(cout);
  c += conv2d_cost(cout, cout, 3, 1, 1, true, h, w).cost + layer_norm_cost(cout);
  if (cin != cout) c += pointwise(cin, cout, true, h * w);
  return c;
}

}  // namespace

ParamsFlops count_params_flops(const ModelConfig& cfg, int64_t height, int64_t width) {
  cfg.validate();
  const auto& ch = cfg.encoder.channels;
  std::array<int64_t, kLevels> hs{}, ws{};

  // The encoder runs once per date; its parameters are shared.
  Cost enc;
  int64_t in_ch = 3, h = height, w = width;
  for (int j = 0; j < kLevels; ++j) {
    const int64_t c = ch[j];
    const int kernel = j == 0 ? 7 : 3;
    const ConvCost embed = conv2d_cost(in_ch, c, kernel, kPatchStrides[j], kernel / 2, true, h, w);
    h = embed.out_h;
    w = embed.out_w;
    hs[j] = h;
    ws[j] = w;
    const int64_t n = h * w;
    enc += embed.cost + layer_norm_cost(c);
    const int sr = cfg.encoder.sr_ratios[j];
    const int64_t hid = cfg.encoder.mlp_hidden(j);
    for (int b = 0; b < cfg.encoder.depths[j]; ++b) {
      enc += layer_norm_cost(c) + layer_norm_cost(c);
      int64_t nr = n;
      if (sr > 1) {
        const ConvCost reduce = conv2d_cost(c, c, sr, sr, 0, true, h, w);
        nr = reduce.out_h * reduce.out_w;
        enc += reduce.cost + layer_norm_cost(c);
      }
      enc += pointwise(c, c, true, n) + pointwise(c, c, true, nr) + pointwise(c, c, true, nr) +
             pointwise(c, c, true, n);
      enc += attention_cost(n, nr, c);
      enc += pointwise(c, hid, true, n) + pointwise(hid, c, true, n);
    }
    enc += layer_norm_cost(c);
    in_ch = c;
  }
  Cost total{enc.params, 2 * enc.macs};

  for (int j = 0; j < kLevels; ++j) {
    const int64_t c = ch[j], n = hs[j] * ws[j];
    if (cfg.use_pefm) {
      for (int pre = 0; pre < 2; ++pre) total += conv2d_cost(c, c, 3, 1, 1, true, hs[j], ws[j]).cost + layer_norm_cost(c);
      total += residual_block(3 * c, c, hs[j], ws[j]);
      total += residual_block(3 * c, c, hs[j], ws[j]);
    } else {
      total += pointwise(2 * c, c, true, n);
    }
  }

  if (cfg.use_dcfm) {
    for (int j = 0; j < kLevels; ++j) {
      const int64_t c = ch[j], n = hs[j] * ws[j];
      int branches = 0;
      if (cfg.dcfm_variant != DcfmVariant::Alpha) {
        const bool bias = cfg.agent_bias;
        total += layer_norm_cost(c);
        for (int p = 0; p < 4; ++p) total += pointwise(c, c, bias, n);
        int64_t gh = 0, gw = 0;
        const int64_t agents = effective_agent_grid(cfg.num_agents, hs[j], ws[j], &gh, &gw);
        total += attention_cost(agents, n, c) + attention_cost(n, agents, c);
        ++branches;
      }
      if (cfg.dcfm_variant != DcfmVariant::Beta) {
        total += sobel_cost(c, hs[j], ws[j]) + pointwise(c, c, true, n);
        ++branches;
      }
      total += pointwise(branches * c, c, true, n);
    }
  }

  for (int i = 0; i < kLevels - 1; ++i) {
    const int64_t c = ch[i];
    const int64_t hidden = std::max<int64_t>(4, c / cfg.decoder_reduction);
    total += pointwise(ch[i + 1], c, true, hs[i + 1] * ws[i + 1]);
    total += pointwise(2 * c, hidden, true, 1) + pointwise(hidden, c, true, 1);
    total += residual_block(c, c, hs[i], ws[i]);
  }
  total += conv2d_cost(ch[0], 1, 3, 1, 1, true, hs[0] * 4, ws[0] * 4).cost;
  return {total.params, total.macs};
}

}  // namespace dfpf
