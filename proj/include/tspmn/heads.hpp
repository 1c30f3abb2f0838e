// SPDX-License-Identifier: Apache-2.0
#pragma once

// Matching head (per-term True/False over the [EOT] states), masked-term head,
// their cross-entropy losses, the pretraining combination, and the decision rule.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tspmn/encoder.hpp"
#include "tspmn/error.hpp"

namespace tspmn {

/// Column 0 scores True (term present), column 1 scores False.
inline constexpr Eigen::Index kTrue = 0;
inline constexpr Eigen::Index kFalse = 1;

template <typename S>
struct MatchHead {
  Mat<S> weight;  // hidden x 2
  RowVec<S> bias;
};

template <typename S>
struct MlmHead {
  Mat<S> weight;  // hidden x vocab
  RowVec<S> bias;
};

template <typename S>
MatchHead<S> init_match_head(int hidden, Rng& rng) {
  return {detail::trunc_normal<S>(rng, hidden, 2, kInitStddev), RowVec<S>::Zero(2)};
}

template <typename S>
MlmHead<S> init_mlm_head(int hidden, int vocab, Rng& rng) {
  return {detail::trunc_normal<S>(rng, hidden, vocab, kInitStddev), RowVec<S>::Zero(vocab)};
}

template <typename S>
struct MatchPrediction {
  Mat<S> logits;  // terms x 2
  Mat<S> probs;   // terms x 2, rows sum to 1

  std::size_t size() const { return static_cast<std::size_t>(probs.rows()); }
};

namespace detail {

template <typename S>
Mat<S> softmax_rows(const Mat<S>& z) {
  Mat<S> p = z.colwise() - z.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

template <typename S>
Mat<S> log_softmax_rows(const Mat<S>& z) {
  Mat<S> shifted = z.colwise() - z.rowwise().maxCoeff();
  const Eigen::Matrix<S, Eigen::Dynamic, 1> lse = shifted.array().exp().rowwise().sum().log();
  return shifted.colwise() - lse;
}

}  // namespace detail

template <typename S>
MatchPrediction<S> predict_from_logits(Mat<S> logits) {
  MatchPrediction<S> pred;
  pred.probs = detail::softmax_rows(logits);
  pred.logits = std::move(logits);
  return pred;
}

/// p_i = softmax(affine(h at eot_i)), one row per term in sequence order.
template <typename S>
MatchPrediction<S> match_probabilities(const MatchHead<S>& head, const EncodedStates<S>& states,
                                       std::span<const std::int32_t> eots) {
  if (eots.empty()) throw InvalidArgument("match_probabilities needs at least one [EOT] position");
  Mat<S> logits = (states.gather(eots) * head.weight).rowwise() + head.bias;
  return predict_from_logits<S>(std::move(logits));
}

/// Indices whose True probability is strictly larger than False. Ties are not selected.
template <typename S>
std::vector<std::size_t> decide(const MatchPrediction<S>& pred) {
  std::vector<std::size_t> selected;
  for (Eigen::Index i = 0; i < pred.probs.rows(); ++i)
    if (pred.probs(i, kTrue) > pred.probs(i, kFalse)) selected.push_back(static_cast<std::size_t>(i));
  return selected;
}

template <typename S>
struct LossGrad {
  S value = 0;
  Mat<S> dlogits;
};

/// Cross-entropy over True/False per term, averaged over the terms of the
/// example. Gradient w.r.t. logits is (p - y) / terms.
template <typename S>
LossGrad<S> msf_loss(const MatchPrediction<S>& pred, const std::vector<bool>& labels) {
  if (labels.size() != pred.size())
    throw InvalidArgument("msf_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(pred.size()) +
                          " predictions");
  if (labels.empty()) throw InvalidArgument("msf_loss: empty prediction");
  const Mat<S> logp = detail::log_softmax_rows(pred.logits);
  const auto n = static_cast<S>(labels.size());
  LossGrad<S> out;
  out.dlogits = pred.probs;
  S total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Eigen::Index k = labels[i] ? kTrue : kFalse;
    const auto row = static_cast<Eigen::Index>(i);
    total -= logp(row, k);
    out.dlogits(row, k) -= S(1);
  }
  out.value = total / n;
  out.dlogits /= n;
  return out;
}

/// Term discrimination on a pretraining example: the matching head and loss
/// applied to the "term occurs in this dialogue" labels.
template <typename S>
LossGrad<S> ctd_loss(const MatchHead<S>& head, const EncodedStates<S>& states, std::span<const std::int32_t> eots,
                     const std::vector<bool>& ctd_labels) {
  return msf_loss(match_probabilities(head, states, eots), ctd_labels);
}

/// Mean over masked positions of -log softmax(affine(h_mask))[target].
template <typename S>
LossGrad<S> mmtm_loss(const MlmHead<S>& head, const EncodedStates<S>& states, std::span<const std::int32_t> mask_positions,
                      std::span<const TokenId> targets) {
  if (mask_positions.size() != targets.size())
    throw InvalidArgument("mmtm_loss: mask positions and targets are misaligned");
  if (mask_positions.empty()) throw InvalidArgument("mmtm_loss: empty mask set");
  const Mat<S> logits = (states.gather(mask_positions) * head.weight).rowwise() + head.bias;
  const Mat<S> logp = detail::log_softmax_rows(logits);
  const auto n = static_cast<S>(targets.size());
  LossGrad<S> out;
  out.dlogits = logp.array().exp();
  S total = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    if (targets[i] < 0 || targets[i] >= logits.cols()) throw InvalidArgument("mmtm_loss: target id out of range");
    total -= logp(row, targets[i]);
    out.dlogits(row, targets[i]) -= S(1);
  }
  out.value = total / n;
  out.dlogits /= n;
  return out;
}

/// lambda * ctd + (1 - lambda) * mmtm.
template <typename S>
S pretrain_loss(S l_ctd, S l_mmtm, S lambda) {
  if (!(lambda >= S(0) && lambda <= S(1))) throw InvalidArgument("pretrain_loss: lambda must be in [0, 1]");
  return lambda * l_ctd + (S(1) - lambda) * l_mmtm;
}

}  // namespace tspmn
