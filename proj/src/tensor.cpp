#include "dfpf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dfpf/errors.hpp"

namespace dfpf {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, const std::vector<double>& data)
    : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
    throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("dimension index out of range for " + shape_str(shape_));
  return shape_[i];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != static_cast<int64_t>(numel())) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Shape inner = items[0].shape();
  Shape out_shape{static_cast<int64_t>(items.size())};
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  std::vector<double> data;
  data.reserve(items.size() * items[0].numel());
  for (const auto& t : items) {
    if (t.shape() != inner) {
      throw ShapeError("stack: " + shape_str(t.shape()) + " vs " + shape_str(inner));
    }
    data.insert(data.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor(std::move(out_shape), std::move(data));
}

Tensor slice_batch(const Tensor& t, int64_t index) {
  if (t.rank() < 1 || index < 0 || index >= t.dim(0)) {
    throw ShapeError("slice_batch index out of range for " + shape_str(t.shape()));
  }
  Shape inner(t.shape().begin() + 1, t.shape().end());
  size_t n = static_cast<size_t>(shape_numel(inner));
  std::vector<double> data(t.storage().begin() + index * n, t.storage().begin() + (index + 1) * n);
  return Tensor(std::move(inner), std::move(data));
}

}  // namespace dfpf
