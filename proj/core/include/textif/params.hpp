#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "textif/autograd.hpp"
#include "textif/tensor.hpp"

namespace textif {

enum class InitKind { FanInUniform, Zeros, Ones };

/// One entry of a network's parameter inventory.
struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  InitKind init = InitKind::FanInUniform;
  int fan_in = 1;
};

/// Named tensors with stable insertion order.
class ParamStore {
 public:
  void add(std::string name, Tensor value);

  bool contains(const std::string& name) const { return index_.contains(name); }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::size_t tensor_count() const { return names_.size(); }
  std::size_t scalar_count() const;

  /// Same names, same shapes, all zero.
  ParamStore zeros_like() const;

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Graph handles for every parameter of a store, for one forward pass.
class Bindings {
 public:
  /// Parameters as gradient-accumulating leaves.
  static Bindings leaves(const ParamStore& store);
  /// Parameters as constants (inference).
  static Bindings constants(const ParamStore& store);

  const ag::Var& operator[](const std::string& name) const;

  /// Gradients collected after ag::backward, zero for untouched entries.
  /// Throws NumericalError naming the first tensor with a non-finite value.
  ParamStore gradients() const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, ag::Var> vars_;
};

}  // namespace textif
