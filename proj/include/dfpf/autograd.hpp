#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dfpf/tensor.hpp"

namespace dfpf {

struct Node;

// Handle to a value in the reverse-mode tape. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  // Direct access for optimizers and initializers; does not invalidate the tape.
  Tensor& mutable_value() const;
  const Shape& shape() const { return value().shape(); }
  int64_t dim(int i) const { return value().dim(i); }
  bool requires_grad() const;

  // Accumulated gradient; empty until a backward pass reaches this node.
  const Tensor& grad() const;
  bool has_grad() const;
  // Zero-initialised gradient buffer, allocated on first use.
  Tensor& grad_buffer() const;
  void zero_grad() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> inputs;
  // Propagates `grad` into the gradient buffers of `inputs`.
  std::function<void(const Tensor& grad)> backward;
};

// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds the result node of an op. The backward closure is kept only when
// gradient recording is on and some input requires a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward);

// Seeds d(root)/d(root) = 1 (root must be a scalar) and runs the tape backwards.
void backward(const Var& root);

}  // namespace dfpf
