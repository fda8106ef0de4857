#pragma once

#include <string>

#include "dfpf/ops.hpp"
#include "dfpf/params.hpp"

namespace dfpf {

enum class Init {
  Conv,        // He normal on fan_out
  Projection,  // truncated normal, std 0.02
};

struct Conv2d {
  Var weight;
  Var bias;  // undefined when built without bias
  int stride = 1;
  int pad = 0;

  static Conv2d create(ParamStore& store, const std::string& name, int64_t cin, int64_t cout, int kernel,
                       int stride, int pad, bool bias, Init init, Rng& rng);
  Var operator()(const Var& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
  bool defined() const { return weight.defined(); }
};

// Channel-axis layer normalisation with learnable affine parameters.
struct LayerNorm2d {
  Var gamma;
  Var beta;

  static LayerNorm2d create(ParamStore& store, const std::string& name, int64_t channels);
  Var operator()(const Var& x) const { return ops::layer_norm_channels(x, gamma, beta); }
};

// conv3x3 -> layer norm -> ReLU, spatial size preserved.
struct ConvNormAct {
  Conv2d conv;
  LayerNorm2d norm;

  static ConvNormAct create(ParamStore& store, const std::string& name, int64_t cin, int64_t cout, Rng& rng);
  Var operator()(const Var& x) const { return ops::relu(norm(conv(x))); }
};

// relu(LN(conv(relu(LN(conv(x))))) + skip(x)); skip is a 1x1 projection when
// widths differ, identity otherwise.
struct ResidualBlock {
  Conv2d conv1, conv2;
  LayerNorm2d norm1, norm2;
  Conv2d skip;

  static ResidualBlock create(ParamStore& store, const std::string& name, int64_t cin, int64_t cout, Rng& rng);
  Var operator()(const Var& x) const;
};

}  // namespace dfpf
