// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lers/autodiff.hpp"

namespace lers {

// A named trainable leaf. `l2_scale` multiplies the optimizer's coupled L2
// coefficient for this parameter (0 exempts it).
struct Parameter {
  std::string name;
  ad::Var var;
  Real l2_scale = 1;
};

struct OptimizerState {
  Real lr = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real l2 = 0;  // lambda in lambda * ||theta||^2
  std::int64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

struct AdamTarget {
  std::string_view name;
  Tensor* value;
  const Tensor* grad;  // may be null or empty: treated as zero
  Real l2_scale = 1;
  const Tensor* support = nullptr;  // optional 0/1 mask confining the update
};

/// One bias-corrected Adam update. The coupled L2 term 2*lambda*w is added to
/// the gradient before the moment update. Throws NonFiniteError naming the
/// parameter when a gradient is not finite.
void adam_step(std::span<const AdamTarget> targets, OptimizerState& state);

class Adam {
 public:
  Adam(std::vector<Parameter> params, Real lr, Real l2 = 0);

  void step();
  void zero_grad();

  // Restricts parameter `index` to the nonzero support of `mask` from now on.
  void set_support(std::size_t index, Tensor mask);
  void set_lr(Real lr) { state_.lr = lr; }

  const OptimizerState& state() const { return state_; }
  const std::vector<Parameter>& params() const { return params_; }

 private:
  std::vector<Parameter> params_;
  std::vector<std::optional<Tensor>> supports_;
  OptimizerState state_;
};

Real l2_sum(std::span<const Parameter> params);

}  // namespace lers
