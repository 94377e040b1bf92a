#pragma once

#include <functional>
#include <vector>

#include "oracles.hpp"
#include "pivl/autograd.hpp"

namespace gradcheck {

using pivl::ag::Var;

// Relative error between backprop and central differences for every input.
// `loss` is rebuilt from the inputs on each call.
inline double max_relative_error(std::vector<Var>& inputs, const std::function<Var()>& loss, double h = 1e-6) {
  for (auto& v : inputs) {
    v.set_requires_grad(true);
    v.zero_grad();
  }
  pivl::ag::backward(loss());
  double worst = 0.0;
  for (auto& v : inputs) {
    const std::vector<double> analytic = v.has_grad() ? v.grad().data : std::vector<double>(v.numel(), 0.0);
    auto& x = v.mutable_value().data;
    const auto numeric = oracle::numeric_grad([&] { return loss().item(); }, x, h);
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
  }
  return worst;
}

}  // namespace gradcheck
