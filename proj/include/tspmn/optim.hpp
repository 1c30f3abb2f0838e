// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "tspmn/error.hpp"
#include "tspmn/model.hpp"

namespace tspmn {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename S>
struct OptState {
  ModelParams<S> m;
  ModelParams<S> v;
  std::int64_t step = 0;
};

template <typename S>
OptState<S> init_opt_state(const ModelParams<S>& params) {
  return {zeros_like(params), zeros_like(params), 0};
}

/// One AdamW update: decoupled decay w -= lr * wd * w, then the bias-corrected
/// Adam step. Throws before touching anything if a gradient is non-finite.
template <typename S>
void adamw_step(ModelParams<S>& params, const ModelParams<S>& grads, OptState<S>& state, const AdamWConfig& cfg) {
  visit_model_tensors(
      [](const std::string& name, const auto& g) {
        if (!g.allFinite()) throw NumericalError("non-finite gradient in " + name);
      },
      grads);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const S lr = static_cast<S>(cfg.lr);
  const S decay = static_cast<S>(1.0 - cfg.lr * cfg.weight_decay);
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S eps = static_cast<S>(cfg.eps);
  const S inv_bc1 = static_cast<S>(1.0 / bc1);
  const S inv_bc2 = static_cast<S>(1.0 / bc2);
  visit_model_tensors(
      [&](const std::string&, auto& w, const auto& g, auto& m, auto& v) {
        m = b1 * m + (S(1) - b1) * g;
        v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
        w *= decay;
        w.array() -= lr * (m.array() * inv_bc1) / ((v.array() * inv_bc2).sqrt() + eps);
      },
      params, grads, state.m, state.v);
}

template <typename S>
double global_norm(const ModelParams<S>& grads) {
  double sq = 0;
  for_each_tensor(grads, [&](const std::string&, const auto& g) { sq += g.template cast<double>().squaredNorm(); });
  return std::sqrt(sq);
}

/// Scales gradients so the global L2 norm is at most max_norm; returns the
/// norm before clipping.
template <typename S>
double clip_grad_norm(ModelParams<S>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / (norm + 1e-6));
    for_each_tensor(grads, [&](const std::string&, auto& g) { g *= scale; });
  }
  return norm;
}

}  // namespace tspmn
