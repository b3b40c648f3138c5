#include "textif/params.hpp"

#include <cmath>

#include "textif/error.hpp"

namespace textif {

void ParamStore::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name " + name);
  index_.emplace(name, values_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInput("unknown parameter " + name);
  return values_[it->second];
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInput("unknown parameter " + name);
  return values_[it->second];
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const Tensor& t : values_) n += t.size();
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    out.add(names_[i], Tensor::zeros_like(values_[i]));
  }
  return out;
}

bool ParamStore::operator==(const ParamStore& other) const {
  return names_ == other.names_ && values_ == other.values_;
}

Bindings Bindings::leaves(const ParamStore& store) {
  Bindings b;
  for (const std::string& name : store.names()) {
    b.names_.push_back(name);
    b.vars_.emplace(name, ag::leaf(store.at(name), name));
  }
  return b;
}

Bindings Bindings::constants(const ParamStore& store) {
  Bindings b;
  for (const std::string& name : store.names()) {
    b.names_.push_back(name);
    b.vars_.emplace(name, ag::constant(store.at(name)));
  }
  return b;
}

const ag::Var& Bindings::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw InvalidInput("no binding for parameter " + name);
  return it->second;
}

ParamStore Bindings::gradients() const {
  ParamStore out;
  for (const std::string& name : names_) {
    const ag::Var& v = vars_.at(name);
    Tensor g = v.grad().size() == v.size() ? v.grad() : Tensor::zeros_like(v.value());
    for (double x : g.values()) {
      if (!std::isfinite(x)) throw NumericalError("non-finite gradient in " + name);
    }
    out.add(name, std::move(g));
  }
  return out;
}

}  // namespace textif
