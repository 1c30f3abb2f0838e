// SPDX-License-Identifier: Apache-2.0
#pragma once

// Encoder plus both heads, and the per-example objective: forward, loss, and
// backward into a gradient container of the same layout.

#include <cmath>
#include <string>

#include "tspmn/encoder.hpp"
#include "tspmn/heads.hpp"

namespace tspmn {

template <typename S>
struct ModelParams {
  EncoderParams<S> encoder;
  MatchHead<S> match;
  MlmHead<S> mlm;
};

template <typename Fn, typename... P>
void visit_model_tensors(Fn&& fn, P&... ps) {
  visit_tensors(fn, ps.encoder...);
  fn("match.weight", ps.match.weight...);
  fn("match.bias", ps.match.bias...);
  fn("mlm.weight", ps.mlm.weight...);
  fn("mlm.bias", ps.mlm.bias...);
}

template <typename S>
void for_each_tensor(ModelParams<S>& p, auto&& fn) { visit_model_tensors(fn, p); }
template <typename S>
void for_each_tensor(const ModelParams<S>& p, auto&& fn) { visit_model_tensors(fn, p); }

template <typename S>
std::size_t parameter_count(const ModelParams<S>& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

/// Deterministic under (config, seed): encoder, then matching head, then MLM head.
template <typename S>
ModelParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  Rng rng(sub_seed(seed, "init-params"));
  ModelParams<S> p;
  p.encoder = init_encoder<S>(config, rng);
  p.match = init_match_head<S>(config.hidden, rng);
  p.mlm = init_mlm_head<S>(config.hidden, config.vocab_size, rng);
  return p;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& src) {
  ModelParams<To> out;
  out.encoder.heads = src.encoder.heads;
  out.encoder.blocks.resize(src.encoder.blocks.size());
  visit_model_tensors([](const std::string&, auto& dst, const auto& s) { dst = s.template cast<To>(); }, out, src);
  return out;
}

enum class Objective {
  Msf,       // matching loss on fine-tuning labels
  Ctd,       // matching loss on pretraining labels
  Mmtm,      // masked-term loss
  Pretrain,  // lambda * Ctd + (1 - lambda) * Mmtm
};

template <typename S>
struct ExampleLoss {
  S total = 0;
  S match = 0;  // MSF or CTD component
  S mmtm = 0;
  bool has_mmtm = false;
};

struct LossWeights {
  double match = 1.0;
  double mmtm = 0.0;
};

/// Runs forward, evaluates the requested loss components, and (when `grad` is
/// non-null) accumulates the gradient of
///   weights.match * match_loss + weights.mmtm * mmtm_loss
/// into `grad`. Examples without masks contribute no MMTM term.
template <typename S>
ExampleLoss<S> example_loss(const ModelParams<S>& p, const PackedExample& ex, const LossWeights& weights,
                            const EncodeOptions& enc, ModelParams<S>* grad) {
  EncoderTape<S> tape;
  const EncodedStates<S> states = encode(p.encoder, ex, enc, grad ? &tape : nullptr);
  ExampleLoss<S> out;
  Mat<S> dh;
  if (grad) dh = Mat<S>::Zero(states.hidden.rows(), states.hidden.cols());

  if (weights.match != 0.0) {
    if (!ex.labels) throw InvalidArgument("example has no match labels");
    const Mat<S> hsel = states.gather(ex.eot_positions);
    const MatchPrediction<S> pred = predict_from_logits<S>((hsel * p.match.weight).rowwise() + p.match.bias);
    LossGrad<S> lg = msf_loss(pred, *ex.labels);
    out.match = lg.value;
    if (grad) {
      const Mat<S> dz = lg.dlogits * static_cast<S>(weights.match);
      grad->match.weight.noalias() += hsel.transpose() * dz;
      grad->match.bias += dz.colwise().sum();
      const Mat<S> dsel = dz * p.match.weight.transpose();
      for (std::size_t i = 0; i < ex.eot_positions.size(); ++i)
        dh.row(ex.eot_positions[i]) += dsel.row(static_cast<Eigen::Index>(i));
    }
  }
  if (weights.mmtm != 0.0 && !ex.mask_positions.empty()) {
    out.has_mmtm = true;
    const Mat<S> hsel = states.gather(ex.mask_positions);
    LossGrad<S> lg = mmtm_loss(p.mlm, states, ex.mask_positions, ex.mlm_targets);
    out.mmtm = lg.value;
    if (grad) {
      const Mat<S> dz = lg.dlogits * static_cast<S>(weights.mmtm);
      grad->mlm.weight.noalias() += hsel.transpose() * dz;
      grad->mlm.bias += dz.colwise().sum();
      const Mat<S> dsel = dz * p.mlm.weight.transpose();
      for (std::size_t i = 0; i < ex.mask_positions.size(); ++i)
        dh.row(ex.mask_positions[i]) += dsel.row(static_cast<Eigen::Index>(i));
    }
  }
  out.total = static_cast<S>(weights.match) * out.match + (out.has_mmtm ? static_cast<S>(weights.mmtm) * out.mmtm : S(0));
  if (!std::isfinite(static_cast<double>(out.total))) throw NumericalError("non-finite loss");
  if (grad) encode_backward(p.encoder, tape, std::move(dh), grad->encoder);
  return out;
}

inline LossWeights weights_for(Objective objective, double lambda) {
  switch (objective) {
    case Objective::Msf:
    case Objective::Ctd:
      return {1.0, 0.0};
    case Objective::Mmtm:
      return {0.0, 1.0};
    case Objective::Pretrain:
      return {lambda, 1.0 - lambda};
  }
  return {1.0, 0.0};
}

/// Per-term match probabilities for an example (inference, no dropout).
template <typename S>
MatchPrediction<S> predict(const ModelParams<S>& p, const PackedExample& ex) {
  const EncodedStates<S> states = encode(p.encoder, ex, EncodeOptions{});
  return match_probabilities(p.match, states, ex.eot_positions);
}

}  // namespace tspmn
