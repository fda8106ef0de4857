#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dfpf/autograd.hpp"

namespace dfpf {

enum class ParamKind { Weight, Bias, Norm };

struct NamedParam {
  std::string name;
  Var var;
  ParamKind kind;
};

// Ordered registry of every learnable array in a model.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init, ParamKind kind);

  const std::vector<NamedParam>& entries() const { return entries_; }
  const Var& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  // Element count over all registered arrays.
  int64_t total_size() const;
  void zero_grad() const;

 private:
  std::vector<NamedParam> entries_;
  std::map<std::string, size_t> index_;
};

using Rng = std::mt19937_64;

// Normal(0, std) resampled outside two standard deviations.
Tensor trunc_normal(Shape shape, double std, Rng& rng);
// He initialisation with fan_out = out_channels * kh * kw.
Tensor kaiming_conv(Shape shape, Rng& rng);

}  // namespace dfpf
