// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "tspmn/model.hpp"
#include "tspmn/optim.hpp"

using namespace tspmn;

namespace {

ModelParams<double> tiny(std::uint64_t seed) {
  ModelConfig c;
  c.layers = 1;
  c.heads = 1;
  c.hidden = 4;
  c.ffn = 4;
  c.vocab_size = 10;
  c.max_len = 8;
  return init_params<double>(c, seed);
}

}  // namespace

TEST_CASE("first Adam step moves a unit weight by lr", "[optim]") {
  auto p = tiny(1);
  auto g = zeros_like(p);
  p.match.bias(0) = 1.0;
  g.match.bias(0) = 1.0;
  auto st = init_opt_state(p);
  adamw_step(p, g, st, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
  // m_hat = 1, v_hat = 1, step = lr * 1 / (1 + eps).
  CHECK(p.match.bias(0) == Catch::Approx(0.9).epsilon(1e-7));
  CHECK(st.step == 1);
}

TEST_CASE("zero gradient with weight decay only shrinks weights", "[optim]") {
  auto p = tiny(2);
  const auto before = p;
  auto g = zeros_like(p);
  auto st = init_opt_state(p);
  adamw_step(p, g, st, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.01});
  visit_model_tensors(
      [](const std::string&, const auto& after, const auto& orig) {
        CHECK((after - orig * (1.0 - 0.1 * 0.01)).cwiseAbs().maxCoeff() < 1e-15);
      },
      p, before);
}

TEST_CASE("non-finite gradients abort before any update", "[optim]") {
  auto p = tiny(3);
  const auto before = p;
  auto g = zeros_like(p);
  g.mlm.weight(0, 0) = std::nan("");
  auto st = init_opt_state(p);
  CHECK_THROWS_AS(adamw_step(p, g, st, AdamWConfig{}), NumericalError);
  CHECK(st.step == 0);
  CHECK(p.encoder.token_emb == before.encoder.token_emb);
}

TEST_CASE("gradient clipping caps the global norm", "[optim]") {
  auto p = tiny(4);
  auto g = zeros_like(p);
  g.match.bias(0) = 3.0;
  g.match.bias(1) = 4.0;
  CHECK(global_norm(g) == Catch::Approx(5.0));
  CHECK(clip_grad_norm(g, 1.0) == Catch::Approx(5.0));
  CHECK(global_norm(g) == Catch::Approx(1.0).epsilon(1e-5));
  CHECK(clip_grad_norm(g, 10.0) == Catch::Approx(1.0).epsilon(1e-5));
  CHECK(global_norm(g) == Catch::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("Adam recurrence over several steps matches a scalar reference", "[optim]") {
  auto p = tiny(5);
  auto st = init_opt_state(p);
  double w = p.mlm.bias(3), m = 0, v = 0;
  const AdamWConfig cfg{0.01, 0.9, 0.999, 1e-8, 0.1};
  for (int t = 1; t <= 20; ++t) {
    auto g = zeros_like(p);
    const double grad = std::sin(t) + 0.5;
    g.mlm.bias(3) = grad;
    adamw_step(p, g, st, cfg);
    m = 0.9 * m + 0.1 * grad;
    v = 0.999 * v + 0.001 * grad * grad;
    w *= 1.0 - cfg.lr * cfg.weight_decay;
    w -= cfg.lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + cfg.eps);
  }
  CHECK(p.mlm.bias(3) == Catch::Approx(w).epsilon(1e-12));
}
