#pragma once

#include <cstddef>
#include <string>

#include "unicompress/params.hpp"
#include "unicompress/tensor.hpp"

namespace unicompress {

// Projection weights of one multi-head attention block, stored under
// `<prefix>.w_q`, `.w_k`, `.w_v`, `.w_o` (each d x d, no biases).
struct AttentionWeights {
  Tensor w_q, w_k, w_v, w_o;
  std::size_t heads = 1;

  static AttentionWeights bind(ParamBinding& b, const std::string& prefix, std::size_t heads);
};

void add_attention_params(ParamSet& ps, const std::string& prefix, std::size_t d, Rng& rng);

// softmax((q Wq)(kv Wk)^T / sqrt(d / heads)) (kv Wv), heads concatenated, then Wo.
// With `causal`, query row i sees key rows j <= i only (q and kv must then
// have the same length).
Tensor multi_head_attention(const Tensor& q, const Tensor& kv, const AttentionWeights& w,
                            bool causal);

struct LayerNormWeights {
  Tensor gain, bias;
  static LayerNormWeights bind(ParamBinding& b, const std::string& prefix);
};

void add_layer_norm_params(ParamSet& ps, const std::string& prefix, std::size_t d);
Tensor apply(const LayerNormWeights& ln, const Tensor& x);

// Position-wise GELU MLP: `<prefix>.w1` (d x hidden), `.b1`, `.w2` (hidden x d), `.b2`.
struct FeedForwardWeights {
  Tensor w1, b1, w2, b2;
  static FeedForwardWeights bind(ParamBinding& b, const std::string& prefix);
};

void add_feed_forward_params(ParamSet& ps, const std::string& prefix, std::size_t d,
                             std::size_t hidden, Rng& rng);
Tensor apply(const FeedForwardWeights& ff, const Tensor& x);

// y = x W + b
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace unicompress
