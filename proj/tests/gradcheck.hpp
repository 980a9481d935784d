// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "lers/autodiff.hpp"
#include "lers/optim.hpp"

namespace lers::testing {

// Worst relative error between backprop and central differences over every
// entry of every parameter. `loss` must rebuild the graph on each call.
inline Real param_gradcheck(std::vector<Parameter> params, const std::function<ad::Var()>& loss, Real h = 1e-5) {
  for (auto& p : params) p.var.zero_grad();
  ad::backward(loss());
  Real worst = 0;
  for (auto& p : params) {
    Tensor analytic = p.var.has_grad() ? p.var.grad() : Tensor(p.var.shape(), 0);
    Tensor numeric(p.var.shape(), 0);
    Tensor& w = p.var.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const Real orig = w[i];
      w[i] = orig + h;
      const Real up = loss().value().item();
      w[i] = orig - h;
      const Real down = loss().value().item();
      w[i] = orig;
      numeric[i] = (up - down) / (2 * h);
    }
    worst = std::max(worst, ad::max_relative_error(analytic, numeric, 1e-4));
    p.var.zero_grad();
  }
  return worst;
}

}  // namespace lers::testing
