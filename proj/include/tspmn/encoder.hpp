// SPDX-License-Identifier: Apache-2.0
#pragma once

// Compact BERT-style encoder: token + position + segment embeddings, embedding
// layer norm, then post-LN transformer blocks (self-attention, GELU FFN).
// Forward passes record a tape; backward passes consume it and accumulate into
// a gradient container with the same layout as the parameters.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "tspmn/error.hpp"
#include "tspmn/packing.hpp"
#include "tspmn/random.hpp"

namespace tspmn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

enum class Precision { TrainF32, CheckF64 };

struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int hidden = 64;
  int ffn = 128;
  int vocab_size = 0;
  int max_len = 256;
  int segment_types = 2;
  double dropout = 0.1;
  Precision precision = Precision::TrainF32;

  int head_dim() const { return hidden / heads; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  if (c.layers < 1 || c.heads < 1 || c.hidden < 1 || c.ffn < 1 || c.vocab_size < 1 || c.max_len < 1)
    throw InvalidArgument("model config: all dimensions must be positive");
  if (c.hidden % c.heads != 0) throw InvalidArgument("model config: hidden size must be divisible by head count");
  if (c.segment_types != 2) throw InvalidArgument("model config: exactly two segment types are supported");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw InvalidArgument("model config: dropout must be in [0, 1)");
}

template <typename S>
struct LayerNormParams {
  RowVec<S> gain;
  RowVec<S> bias;
};

template <typename S>
struct BlockParams {
  Mat<S> wq, wk, wv, wo;
  RowVec<S> bq, bk, bv, bo;
  LayerNormParams<S> attn_norm;
  Mat<S> w_in;  // hidden x ffn
  RowVec<S> b_in;
  Mat<S> w_out;  // ffn x hidden
  RowVec<S> b_out;
  LayerNormParams<S> ffn_norm;
};

template <typename S>
struct EncoderParams {
  Mat<S> token_emb;     // vocab x hidden
  Mat<S> position_emb;  // max_len x hidden
  Mat<S> segment_emb;   // 2 x hidden
  LayerNormParams<S> emb_norm;
  std::vector<BlockParams<S>> blocks;
  int heads = 1;  // attention heads per block; not a tensor
};

/// Visits every tensor in the fixed serialization order, zipping any number
/// of identically shaped parameter sets: fn(name, a.t, b.t, ...).
template <typename Fn, typename... P>
void visit_tensors(Fn&& fn, P&... ps) {
  fn("token_emb", ps.token_emb...);
  fn("position_emb", ps.position_emb...);
  fn("segment_emb", ps.segment_emb...);
  fn("emb_norm.gain", ps.emb_norm.gain...);
  fn("emb_norm.bias", ps.emb_norm.bias...);
  const std::size_t layers = std::get<0>(std::forward_as_tuple(ps...)).blocks.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    fn(pre + "wq", ps.blocks[l].wq...);
    fn(pre + "bq", ps.blocks[l].bq...);
    fn(pre + "wk", ps.blocks[l].wk...);
    fn(pre + "bk", ps.blocks[l].bk...);
    fn(pre + "wv", ps.blocks[l].wv...);
    fn(pre + "bv", ps.blocks[l].bv...);
    fn(pre + "wo", ps.blocks[l].wo...);
    fn(pre + "bo", ps.blocks[l].bo...);
    fn(pre + "attn_norm.gain", ps.blocks[l].attn_norm.gain...);
    fn(pre + "attn_norm.bias", ps.blocks[l].attn_norm.bias...);
    fn(pre + "w_in", ps.blocks[l].w_in...);
    fn(pre + "b_in", ps.blocks[l].b_in...);
    fn(pre + "w_out", ps.blocks[l].w_out...);
    fn(pre + "b_out", ps.blocks[l].b_out...);
    fn(pre + "ffn_norm.gain", ps.blocks[l].ffn_norm.gain...);
    fn(pre + "ffn_norm.bias", ps.blocks[l].ffn_norm.bias...);
  }
}

template <typename S>
void for_each_tensor(EncoderParams<S>& p, auto&& fn) { visit_tensors(fn, p); }
template <typename S>
void for_each_tensor(const EncoderParams<S>& p, auto&& fn) { visit_tensors(fn, p); }

namespace detail {

template <typename S>
Mat<S> trunc_normal(Rng& rng, int rows, int cols, double sigma) {
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(truncated_normal(rng, sigma));
  return m;
}

template <typename S>
LayerNormParams<S> unit_norm(int width) {
  return {RowVec<S>::Ones(width), RowVec<S>::Zero(width)};
}

}  // namespace detail

inline constexpr double kInitStddev = 0.02;

/// Truncated-normal(0.02) weights, zero biases, unit layer-norm gains.
template <typename S>
EncoderParams<S> init_encoder(const ModelConfig& c, Rng& rng) {
  validate(c);
  const int d = c.hidden;
  EncoderParams<S> p;
  p.heads = c.heads;
  p.token_emb = detail::trunc_normal<S>(rng, c.vocab_size, d, kInitStddev);
  p.position_emb = detail::trunc_normal<S>(rng, c.max_len, d, kInitStddev);
  p.segment_emb = detail::trunc_normal<S>(rng, c.segment_types, d, kInitStddev);
  p.emb_norm = detail::unit_norm<S>(d);
  for (int l = 0; l < c.layers; ++l) {
    BlockParams<S> b;
    b.wq = detail::trunc_normal<S>(rng, d, d, kInitStddev);
    b.wk = detail::trunc_normal<S>(rng, d, d, kInitStddev);
    b.wv = detail::trunc_normal<S>(rng, d, d, kInitStddev);
    b.wo = detail::trunc_normal<S>(rng, d, d, kInitStddev);
    b.bq = b.bk = b.bv = b.bo = RowVec<S>::Zero(d);
    b.attn_norm = detail::unit_norm<S>(d);
    b.w_in = detail::trunc_normal<S>(rng, d, c.ffn, kInitStddev);
    b.b_in = RowVec<S>::Zero(c.ffn);
    b.w_out = detail::trunc_normal<S>(rng, c.ffn, d, kInitStddev);
    b.b_out = RowVec<S>::Zero(d);
    b.ffn_norm = detail::unit_norm<S>(d);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

/// Same shapes as `p`, all zeros.
template <typename P>
P zeros_like(const P& p) {
  P z = p;
  for_each_tensor(z, [](const std::string&, auto& t) { t.setZero(); });
  return z;
}

// ---------------------------------------------------------------------------
// Forward

namespace detail {

template <typename S>
struct NormCache {
  Mat<S> xhat;
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
};

inline constexpr double kNormEps = 1e-12;

template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const LayerNormParams<S>& p, NormCache<S>* cache) {
  const auto d = static_cast<S>(x.cols());
  Eigen::Matrix<S, Eigen::Dynamic, 1> mean = x.rowwise().sum() / d;
  Mat<S> xc = x.colwise() - mean;
  Eigen::Matrix<S, Eigen::Dynamic, 1> var = xc.array().square().rowwise().sum() / d;
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd = (var.array() + static_cast<S>(kNormEps)).rsqrt();
  Mat<S> xhat = xc.array().colwise() * rstd.array();
  Mat<S> y = (xhat.array().rowwise() * p.gain.array()).rowwise() + p.bias.array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const NormCache<S>& c, const LayerNormParams<S>& p,
                           LayerNormParams<S>& g) {
  g.gain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.bias += dy.colwise().sum();
  const Mat<S> dxhat = dy.array().rowwise() * p.gain.array();
  const auto d = static_cast<S>(dy.cols());
  const Eigen::Matrix<S, Eigen::Dynamic, 1> m1 = dxhat.rowwise().sum() / d;
  const Eigen::Matrix<S, Eigen::Dynamic, 1> m2 = (dxhat.array() * c.xhat.array()).rowwise().sum() / d;
  Mat<S> dx = dxhat;
  dx.colwise() -= m1;
  dx.array() -= c.xhat.array().colwise() * m2.array();
  dx.array().colwise() *= c.rstd.array();
  return dx;
}

template <typename S>
S gelu(S x) {
  return static_cast<S>(0.5) * x * (static_cast<S>(1) + std::erf(x * static_cast<S>(std::numbers::sqrt2 / 2)));
}

template <typename S>
S gelu_grad(S x) {
  const S cdf = static_cast<S>(0.5) * (static_cast<S>(1) + std::erf(x * static_cast<S>(std::numbers::sqrt2 / 2)));
  const S pdf = std::exp(static_cast<S>(-0.5) * x * x) * static_cast<S>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

// Inverted dropout mask: 0 or 1/(1-rate).
template <typename S>
Mat<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Mat<S> m(rows, cols);
  const S keep = static_cast<S>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng) < rate ? S(0) : keep;
  return m;
}

}  // namespace detail

template <typename S>
struct BlockTape {
  Mat<S> input;
  Mat<S> q, k, v;
  std::vector<Mat<S>> probs;  // per head, L x L
  Mat<S> context;
  Mat<S> attn_drop;  // empty when dropout is inactive
  detail::NormCache<S> attn_norm;
  Mat<S> attn_normed;
  Mat<S> ffn_pre;  // before GELU
  Mat<S> ffn_act;
  Mat<S> ffn_drop;
  detail::NormCache<S> ffn_norm;
};

template <typename S>
struct EncoderTape {
  std::vector<TokenId> token_ids;
  std::vector<std::int32_t> segment_ids;
  std::int32_t attention_length = 0;
  detail::NormCache<S> emb_norm;
  Mat<S> emb_drop;
  std::vector<BlockTape<S>> blocks;
};

/// Per-token hidden states with named views.
template <typename S>
struct EncodedStates {
  Mat<S> hidden;  // L x d

  Eigen::Index length() const { return hidden.rows(); }
  auto cls() const { return hidden.row(0); }
  Mat<S> gather(std::span<const std::int32_t> positions) const {
    Mat<S> out(static_cast<Eigen::Index>(positions.size()), hidden.cols());
    for (std::size_t i = 0; i < positions.size(); ++i) {
      if (positions[i] < 0 || positions[i] >= hidden.rows())
        throw InvalidArgument("position " + std::to_string(positions[i]) + " outside encoded states");
      out.row(static_cast<Eigen::Index>(i)) = hidden.row(positions[i]);
    }
    return out;
  }
};

struct EncodeOptions {
  bool train_mode = false;
  double dropout = 0.0;
  std::uint64_t seed = 0;
};

/// Bidirectional self-attention over the full sequence; keys at or beyond the
/// attention length receive zero weight. Dropout is applied only in train mode,
/// with masks drawn from `opt.seed`.
template <typename S>
EncodedStates<S> encode(const EncoderParams<S>& p, const PackedExample& ex, const EncodeOptions& opt,
                        EncoderTape<S>* tape = nullptr) {
  const auto L = static_cast<Eigen::Index>(ex.token_ids.size());
  const Eigen::Index d = p.token_emb.cols();
  if (L == 0) throw InvalidArgument("cannot encode an empty example");
  if (L > p.position_emb.rows())
    throw InvalidArgument("example length " + std::to_string(L) + " exceeds max_len " + std::to_string(p.position_emb.rows()));
  if (ex.segment_ids.size() != ex.token_ids.size()) throw InvalidArgument("segment ids misaligned with tokens");
  const std::int32_t att_len = ex.attention_length > 0 ? ex.attention_length : static_cast<std::int32_t>(L);
  if (att_len > L) throw InvalidArgument("attention length exceeds example length");

  const bool use_dropout = opt.train_mode && opt.dropout > 0.0;
  Rng rng(opt.seed);

  Mat<S> x(L, d);
  for (Eigen::Index i = 0; i < L; ++i) {
    const TokenId t = ex.token_ids[static_cast<std::size_t>(i)];
    const std::int32_t s = ex.segment_ids[static_cast<std::size_t>(i)];
    if (t < 0 || t >= p.token_emb.rows()) throw InvalidArgument("token id " + std::to_string(t) + " out of vocabulary range");
    if (s < 0 || s >= p.segment_emb.rows()) throw InvalidArgument("segment id " + std::to_string(s) + " out of range");
    x.row(i) = p.token_emb.row(t) + p.position_emb.row(i) + p.segment_emb.row(s);
  }
  if (tape) {
    tape->token_ids = ex.token_ids;
    tape->segment_ids = ex.segment_ids;
    tape->attention_length = att_len;
    tape->blocks.clear();
  }
  x = detail::layer_norm(x, p.emb_norm, tape ? &tape->emb_norm : nullptr);
  if (use_dropout) {
    Mat<S> m = detail::dropout_mask<S>(L, d, opt.dropout, rng);
    x.array() *= m.array();
    if (tape) tape->emb_drop = std::move(m);
  } else if (tape) {
    tape->emb_drop.resize(0, 0);
  }

  for (const auto& b : p.blocks) {
    BlockTape<S> bt;
    if (tape) bt.input = x;
    Mat<S> q = (x * b.wq).rowwise() + b.bq;
    Mat<S> k = (x * b.wk).rowwise() + b.bk;
    Mat<S> v = (x * b.wv).rowwise() + b.bv;
    Mat<S> ctx(L, d);
    const Eigen::Index n_heads = p.heads;
    const Eigen::Index dh = d / n_heads;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (Eigen::Index h = 0; h < n_heads; ++h) {
      Mat<S> scores = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < L; ++i) {
        auto row = scores.row(i);
        const S mx = row.head(att_len).maxCoeff();
        row.head(att_len) = (row.head(att_len).array() - mx).exp();
        row.tail(L - att_len).setZero();
        row.head(att_len) /= row.head(att_len).sum();
      }
      ctx.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
      if (tape) bt.probs.push_back(std::move(scores));
    }
    Mat<S> attn = (ctx * b.wo).rowwise() + b.bo;
    if (use_dropout) {
      Mat<S> m = detail::dropout_mask<S>(L, d, opt.dropout, rng);
      attn.array() *= m.array();
      if (tape) bt.attn_drop = std::move(m);
    }
    Mat<S> y1 = detail::layer_norm<S>(x + attn, b.attn_norm, tape ? &bt.attn_norm : nullptr);
    Mat<S> pre = (y1 * b.w_in).rowwise() + b.b_in;
    Mat<S> act = pre.unaryExpr([](S z) { return detail::gelu(z); });
    Mat<S> f = (act * b.w_out).rowwise() + b.b_out;
    if (use_dropout) {
      Mat<S> m = detail::dropout_mask<S>(L, d, opt.dropout, rng);
      f.array() *= m.array();
      if (tape) bt.ffn_drop = std::move(m);
    }
    x = detail::layer_norm<S>(y1 + f, b.ffn_norm, tape ? &bt.ffn_norm : nullptr);
    if (tape) {
      bt.q = std::move(q);
      bt.k = std::move(k);
      bt.v = std::move(v);
      bt.context = std::move(ctx);
      bt.attn_normed = std::move(y1);
      bt.ffn_pre = std::move(pre);
      bt.ffn_act = std::move(act);
      tape->blocks.push_back(std::move(bt));
    }
  }
  return {std::move(x)};
}

// ---------------------------------------------------------------------------
// Backward

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(hidden states).
template <typename S>
void encode_backward(const EncoderParams<S>& p, const EncoderTape<S>& tape, Mat<S> dx, EncoderParams<S>& grad) {
  const Eigen::Index L = dx.rows();
  const Eigen::Index d = dx.cols();
  const Eigen::Index dh = d / p.heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  for (std::size_t li = p.blocks.size(); li-- > 0;) {
    const auto& b = p.blocks[li];
    const auto& bt = tape.blocks[li];
    auto& gb = grad.blocks[li];

    // x_out = LN(y1 + drop(f))
    Mat<S> dr2 = detail::layer_norm_backward<S>(dx, bt.ffn_norm, b.ffn_norm, gb.ffn_norm);
    Mat<S> df = dr2;
    if (bt.ffn_drop.size() != 0) df.array() *= bt.ffn_drop.array();
    gb.w_out.noalias() += bt.ffn_act.transpose() * df;
    gb.b_out += df.colwise().sum();
    Mat<S> dact = df * b.w_out.transpose();
    Mat<S> dpre = dact.array() * bt.ffn_pre.unaryExpr([](S z) { return detail::gelu_grad(z); }).array();
    gb.w_in.noalias() += bt.attn_normed.transpose() * dpre;
    gb.b_in += dpre.colwise().sum();
    Mat<S> dy1 = dr2;
    dy1.noalias() += dpre * b.w_in.transpose();

    // y1 = LN(x + drop(attn))
    Mat<S> dr1 = detail::layer_norm_backward<S>(dy1, bt.attn_norm, b.attn_norm, gb.attn_norm);
    Mat<S> dattn = dr1;
    if (bt.attn_drop.size() != 0) dattn.array() *= bt.attn_drop.array();
    gb.wo.noalias() += bt.context.transpose() * dattn;
    gb.bo += dattn.colwise().sum();
    Mat<S> dctx = dattn * b.wo.transpose();

    Mat<S> dq(L, d), dk(L, d), dv(L, d);
    for (Eigen::Index h = 0; h < p.heads; ++h) {
      const Mat<S>& P = bt.probs[static_cast<std::size_t>(h)];
      const auto dctx_h = dctx.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh).noalias() = P.transpose() * dctx_h;
      Mat<S> dP = dctx_h * bt.v.middleCols(h * dh, dh).transpose();
      const Eigen::Matrix<S, Eigen::Dynamic, 1> rowdot = (dP.array() * P.array()).rowwise().sum();
      Mat<S> dS = P.array() * (dP.colwise() - rowdot).array();
      dS *= scale;
      dq.middleCols(h * dh, dh).noalias() = dS * bt.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = dS.transpose() * bt.q.middleCols(h * dh, dh);
    }
    gb.wq.noalias() += bt.input.transpose() * dq;
    gb.wk.noalias() += bt.input.transpose() * dk;
    gb.wv.noalias() += bt.input.transpose() * dv;
    gb.bq += dq.colwise().sum();
    gb.bk += dk.colwise().sum();
    gb.bv += dv.colwise().sum();
    Mat<S> dinput = dr1;
    dinput.noalias() += dq * b.wq.transpose();
    dinput.noalias() += dk * b.wk.transpose();
    dinput.noalias() += dv * b.wv.transpose();
    dx = std::move(dinput);
  }

  if (tape.emb_drop.size() != 0) dx.array() *= tape.emb_drop.array();
  Mat<S> de = detail::layer_norm_backward<S>(dx, tape.emb_norm, p.emb_norm, grad.emb_norm);
  for (Eigen::Index i = 0; i < L; ++i) {
    grad.token_emb.row(tape.token_ids[static_cast<std::size_t>(i)]) += de.row(i);
    grad.position_emb.row(i) += de.row(i);
    grad.segment_emb.row(tape.segment_ids[static_cast<std::size_t>(i)]) += de.row(i);
  }
}

/// Converts between precisions (f32 training weights <-> f64 checking).
template <typename To, typename From>
EncoderParams<To> cast_params(const EncoderParams<From>& src) {
  EncoderParams<To> out;
  out.heads = src.heads;
  out.blocks.resize(src.blocks.size());
  visit_tensors([](const std::string&, auto& dst, const auto& s) { dst = s.template cast<To>(); }, out, src);
  return out;
}

}  // namespace tspmn
