#include "unicompress/layers.hpp"

#include <cmath>
#include <vector>

#include "unicompress/ops.hpp"

namespace unicompress {

AttentionWeights AttentionWeights::bind(ParamBinding& b, const std::string& prefix, std::size_t heads) {
  return {b[prefix + ".w_q"], b[prefix + ".w_k"], b[prefix + ".w_v"], b[prefix + ".w_o"], heads};
}

void add_attention_params(ParamSet& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  const double std = 1.0 / std::sqrt(static_cast<double>(d));
  for (const char* w : {".w_k", ".w_o", ".w_q", ".w_v"}) ps.add_normal(prefix + w, {d, d}, std, rng);
}

Tensor multi_head_attention(const Tensor& q, const Tensor& kv, const AttentionWeights& w, bool causal) {
  const std::size_t d = q.cols();
  if (kv.cols() != d) {
    throw ShapeError("attention: query width " + std::to_string(d) + " vs key/value width " +
                     std::to_string(kv.cols()));
  }
  if (w.heads == 0 || d % w.heads != 0) {
    throw ShapeError("attention: " + std::to_string(w.heads) + " heads do not divide width " + std::to_string(d));
  }
  if (causal && q.rows() != kv.rows()) throw ShapeError("attention: causal mask needs square scores");
  const std::size_t dh = d / w.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  const Tensor qp = matmul(q, w.w_q);
  const Tensor kp = matmul(kv, w.w_k);
  const Tensor vp = matmul(kv, w.w_v);
  std::vector<Tensor> heads;
  heads.reserve(w.heads);
  for (std::size_t h = 0; h < w.heads; ++h) {
    const Tensor qh = w.heads == 1 ? qp : slice_cols(qp, h * dh, dh);
    const Tensor kh = w.heads == 1 ? kp : slice_cols(kp, h * dh, dh);
    const Tensor vh = w.heads == 1 ? vp : slice_cols(vp, h * dh, dh);
    const Tensor probs = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), causal);
    heads.push_back(matmul(probs, vh));
  }
  const Tensor merged = w.heads == 1 ? heads[0] : concat_cols(heads);
  return matmul(merged, w.w_o);
}

LayerNormWeights LayerNormWeights::bind(ParamBinding& b, const std::string& prefix) {
  return {b[prefix + ".gain"], b[prefix + ".bias"]};
}

void add_layer_norm_params(ParamSet& ps, const std::string& prefix, std::size_t d) {
  ps.add_constant(prefix + ".bias", {d}, 0.0);
  ps.add_constant(prefix + ".gain", {d}, 1.0);
}

Tensor apply(const LayerNormWeights& ln, const Tensor& x) { return layer_norm(x, ln.gain, ln.bias); }

FeedForwardWeights FeedForwardWeights::bind(ParamBinding& b, const std::string& prefix) {
  return {b[prefix + ".w1"], b[prefix + ".b1"], b[prefix + ".w2"], b[prefix + ".b2"]};
}

void add_feed_forward_params(ParamSet& ps, const std::string& prefix, std::size_t d, std::size_t hidden,
                             Rng& rng) {
  ps.add_constant(prefix + ".b1", {hidden}, 0.0);
  ps.add_constant(prefix + ".b2", {d}, 0.0);
  ps.add_normal(prefix + ".w1", {d, hidden}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  ps.add_normal(prefix + ".w2", {hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
}

Tensor apply(const FeedForwardWeights& ff, const Tensor& x) {
  return affine(gelu(affine(x, ff.w1, ff.b1)), ff.w2, ff.b2);
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row_broadcast(matmul(x, w), b); }

}  // namespace unicompress
