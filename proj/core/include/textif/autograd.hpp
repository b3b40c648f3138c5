#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "textif/tensor.hpp"

namespace textif::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One value in the recorded computation. `backward` reads `grad` and adds
/// into the grads of `inputs`; it is only set when gradient recording was
/// enabled and some input requires a gradient.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  std::string name;

  /// Gradient buffer, zero-filled on first access.
  Tensor& grad_buffer();
};

/// Handle to a node. Cheap to copy; copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const std::vector<int>& shape() const { return node_->value.shape(); }
  int dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  bool defined() const { return static_cast<bool>(node_); }

  Node& node() const { return *node_; }
  const NodePtr& ptr() const { return node_; }

  /// Scalar value of a one-element variable.
  double item() const;

 private:
  NodePtr node_;
};

Var constant(Tensor value);
/// Leaf that accumulates a gradient (a learnable parameter or a probe input).
Var leaf(Tensor value, std::string name = {});

bool grad_enabled();

/// Disables recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an op result. Inputs and the backward closure are kept only when
/// recording is on and at least one input needs a gradient.
Var make_result(Tensor value, std::vector<Var> inputs,
                std::function<void(Node&)> backward);

/// Reverse pass from a scalar (or seeded) output.
void backward(const Var& output, double seed = 1.0);

}  // namespace textif::ag
