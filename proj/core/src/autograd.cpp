#include "textif/autograd.hpp"

#include <numeric>
#include <unordered_set>

#include "textif/error.hpp"

namespace textif {

std::size_t shape_numel(const std::vector<int>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::span<const double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != shape_numel(shape_)) {
    throw InvalidInput("tensor data size does not match shape " +
                       shape_to_string(shape_));
  }
}

std::string Tensor::shape_string() const { return shape_to_string(shape_); }

namespace ag {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor::zeros_like(value);
  return grad;
}

double Var::item() const {
  if (node_->value.size() != 1) {
    throw InvalidInput("item() on a non-scalar of shape " +
                       node_->value.shape_string());
  }
  return node_->value[0];
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var leaf(Tensor value, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->name = std::move(name);
  return Var(std::move(n));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> inputs,
                std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (Var& v : inputs) n->inputs.push_back(v.ptr());
      n->backward = std::move(backward);
    }
  }
  return Var(std::move(n));
}

void backward(const Var& output, double seed) {
  if (!output.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(&output.node(), 0);
  visited.insert(&output.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor& g = output.node().grad_buffer();
  for (double& v : g.values()) v += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

}  // namespace ag
}  // namespace textif
