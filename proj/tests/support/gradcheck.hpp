#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "textif/autograd.hpp"
#include "textif/params.hpp"
#include "textif/tensor.hpp"

namespace textif::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "input[i][j] analytic=... numeric=..."
  std::size_t checked = 0;
};

using ScalarFn = std::function<ag::Var(const std::vector<ag::Var>&)>;

/// Compares reverse-mode gradients of `f` with central differences.
/// `per_input` > 0 samples that many entries of each input (seeded);
/// otherwise every entry is checked. Relative error is
/// |a - n| / max(|a|, |n|, floor).
GradCheck check_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs,
                          double step = 1e-6, std::size_t per_input = 0,
                          std::uint64_t seed = 1, double floor = 1e-8);

using BindingsFn = std::function<ag::Var(const Bindings&)>;

/// Same comparison over every tensor of a parameter store. `per_tensor` > 0
/// samples that many entries of each tensor.
GradCheck check_param_gradients(const BindingsFn& f, const ParamStore& params,
                                double step = 1e-6, std::size_t per_tensor = 0,
                                std::uint64_t seed = 1, double floor = 1e-8);

/// Tensor of the given shape with entries uniform in [lo, hi].
Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0);

/// Deterministic scalar probe: sum(x * w) with a fixed pseudo-random w.
ag::Var weighted_sum(const ag::Var& x, std::uint64_t seed = 99);

}  // namespace textif::testing
