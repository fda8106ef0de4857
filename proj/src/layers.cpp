#include "dfpf/layers.hpp"

namespace dfpf {

Conv2d Conv2d::create(ParamStore& store, const std::string& name, int64_t cin, int64_t cout, int kernel,
                      int stride, int pad, bool bias, Init init, Rng& rng) {
  Conv2d c;
  Shape ws{cout, cin, kernel, kernel};
  c.weight = store.add(name + ".weight", init == Init::Conv ? kaiming_conv(ws, rng) : trunc_normal(ws, 0.02, rng),
                       ParamKind::Weight);
  if (bias) c.bias = store.add(name + ".bias", Tensor({cout}), ParamKind::Bias);
  c.stride = stride;
  c.pad = pad;
  return c;
}

LayerNorm2d LayerNorm2d::create(ParamStore& store, const std::string& name, int64_t channels) {
  LayerNorm2d n;
  n.gamma = store.add(name + ".gamma", Tensor({channels}, 1.0), ParamKind::Norm);
  n.beta = store.add(name + ".beta", Tensor({channels}), ParamKind::Norm);
  return n;
}

ConvNormAct ConvNormAct::create(ParamStore& store, const std::string& name, int64_t cin, int64_t cout,
                                Rng& rng) {
  return {Conv2d::create(store, name + ".conv", cin, cout, 3, 1, 1, true, Init::Conv, rng),
          LayerNorm2d::create(store, name + ".norm", cout)};
}

ResidualBlock ResidualBlock::create(ParamStore& store, const std::string& name, int64_t cin, int64_t cout,
                                    Rng& rng) {
  ResidualBlock r;
  r.conv1 = Conv2d::create(store, name + ".conv1", cin, cout, 3, 1, 1, true, Init::Conv, rng);
  r.norm1 = LayerNorm2d::create(store, name + ".norm1", cout);
  r.conv2 = Conv2d::create(store, name + ".conv2", cout, cout, 3, 1, 1, true, Init::Conv, rng);
  r.norm2 = LayerNorm2d::create(store, name + ".norm2", cout);
  if (cin != cout) r.skip = Conv2d::create(store, name + ".skip", cin, cout, 1, 1, 0, true, Init::Conv, rng);
  return r;
}

Var ResidualBlock::operator()(const Var& x) const {
  Var y = ops::relu(norm1(conv1(x)));
  y = norm2(conv2(y));
  return ops::relu(ops::add(y, skip.defined() ? skip(x) : x));
}

}  // namespace dfpf
