// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference check of the analytic gradients, in double precision.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tspmn/model.hpp"

namespace tspmn {

struct GradCheckSample {
  std::string tensor;
  Eigen::Index index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::vector<GradCheckSample> samples;
};

inline double relative_error(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

/// Compares the analytic gradient of `objective` against central differences
/// at `sample_count` parameters drawn uniformly over all scalar weights.
/// Dropout is never active here.
inline GradCheckResult grad_check(ModelParams<double> params, const PackedExample& example, Objective objective,
                                  double lambda, double step, std::size_t sample_count, std::uint64_t seed) {
  const LossWeights weights = weights_for(objective, lambda);
  const EncodeOptions enc{};  // eval mode
  ModelParams<double> grad = zeros_like(params);
  const double base = example_loss(params, example, weights, enc, &grad).total;
  if (!std::isfinite(base)) throw NumericalError("gradient check: non-finite loss");

  struct Ref {
    std::string name;
    double* data;
    const double* grad;
    Eigen::Index size;
  };
  std::vector<Ref> refs;
  std::size_t total = 0;
  visit_model_tensors(
      [&](const std::string& name, auto& t, auto& g) {
        refs.push_back({name, t.data(), g.data(), t.size()});
        total += static_cast<std::size_t>(t.size());
      },
      params, grad);

  Rng rng(sub_seed(seed, "grad-check"));
  GradCheckResult result;
  for (std::size_t s = 0; s < sample_count; ++s) {
    auto flat = static_cast<Eigen::Index>(uniform_index(rng, total));
    std::size_t r = 0;
    while (flat >= refs[r].size) flat -= refs[r++].size;
    double& w = refs[r].data[flat];
    const double saved = w;
    w = saved + step;
    const double up = example_loss(params, example, weights, enc, static_cast<ModelParams<double>*>(nullptr)).total;
    w = saved - step;
    const double down = example_loss(params, example, weights, enc, static_cast<ModelParams<double>*>(nullptr)).total;
    w = saved;
    GradCheckSample sample{refs[r].name, flat, refs[r].grad[flat], (up - down) / (2.0 * step), 0.0};
    sample.rel_error = relative_error(sample.analytic, sample.numeric);
    result.max_rel_error = std::max(result.max_rel_error, sample.rel_error);
    result.samples.push_back(std::move(sample));
  }
  return result;
}

}  // namespace tspmn
