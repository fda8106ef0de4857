#include "dfpf/params.hpp"

#include <cmath>

#include "dfpf/errors.hpp"

namespace dfpf {

Var ParamStore::add(const std::string& name, Tensor init, ParamKind kind) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  Var v(std::move(init), true);
  index_[name] = entries_.size();
  entries_.push_back({name, v, kind});
  return v;
}

const Var& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].var;
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += static_cast<int64_t>(e.var.value().numel());
  return n;
}

void ParamStore::zero_grad() const {
  for (const auto& e : entries_) e.var.zero_grad();
}

Tensor trunc_normal(Shape shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.data()) {
    double z;
    do {
      z = dist(rng);
    } while (std::fabs(z) > 2.0);
    v = z * std;
  }
  return t;
}

Tensor kaiming_conv(Shape shape, Rng& rng) {
  if (shape.size() != 4) throw ShapeError("kaiming_conv expects a 4-D weight shape");
  double fan_out = static_cast<double>(shape[0] * shape[2] * shape[3]);
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_out));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace dfpf
