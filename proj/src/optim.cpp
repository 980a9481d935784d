// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/optim.hpp"

#include <cmath>

namespace lers {

void adam_step(std::span<const AdamTarget> targets, OptimizerState& state) {
  if (!(state.lr > 0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (state.first_moment.size() != targets.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (const auto& t : targets) {
      state.first_moment.emplace_back(t.value->shape(), 0);
      state.second_moment.emplace_back(t.value->shape(), 0);
    }
  }
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto& t = targets[k];
    if (t.grad && !t.grad->empty()) {
      if (t.grad->size() != t.value->size()) {
        throw ShapeError("adam_step: gradient shape " + shape_string(t.grad->shape()) + " for parameter '" +
                         std::string(t.name) + "' of shape " + shape_string(t.value->shape()));
      }
      if (!t.grad->all_finite()) throw NonFiniteError("adam_step: non-finite gradient for parameter '" + std::string(t.name) + "'");
    }
    if (state.first_moment[k].size() != t.value->size()) {
      throw ShapeError("adam_step: optimizer state does not match parameter '" + std::string(t.name) + "'");
    }
  }

  ++state.step;
  const Real bc1 = 1 - std::pow(state.beta1, static_cast<Real>(state.step));
  const Real bc2 = 1 - std::pow(state.beta2, static_cast<Real>(state.step));
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto& t = targets[k];
    Tensor& w = *t.value;
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    const bool has_grad = t.grad && !t.grad->empty();
    const Real decay = 2 * state.l2 * t.l2_scale;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (t.support && (*t.support)[i] == 0) {
        w[i] = 0;
        continue;
      }
      const Real g = (has_grad ? (*t.grad)[i] : Real(0)) + decay * w[i];
      m[i] = state.beta1 * m[i] + (1 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1 - state.beta2) * g * g;
      const Real mhat = m[i] / bc1;
      const Real vhat = v[i] / bc2;
      w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

Adam::Adam(std::vector<Parameter> params, Real lr, Real l2) : params_(std::move(params)), supports_(params_.size()) {
  state_.lr = lr;
  state_.l2 = l2;
}

void Adam::step() {
  std::vector<AdamTarget> targets;
  targets.reserve(params_.size());
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    targets.push_back({p.name, &p.var.mutable_value(), &p.var.grad(), p.l2_scale,
                       supports_[k] ? &*supports_[k] : nullptr});
  }
  adam_step(targets, state_);
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void Adam::set_support(std::size_t index, Tensor mask) {
  auto& p = params_.at(index);
  if (mask.size() != p.var.value().size()) {
    throw ShapeError("set_support: mask " + shape_string(mask.shape()) + " for parameter '" + p.name + "'");
  }
  Tensor& w = p.var.mutable_value();
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (mask[i] == 0) w[i] = 0;
  }
  supports_[index] = std::move(mask);
}

Real l2_sum(std::span<const Parameter> params) {
  Real s = 0;
  for (const auto& p : params) {
    for (Real v : p.var.value().span()) s += v * v;
  }
  return s;
}

}  // namespace lers
