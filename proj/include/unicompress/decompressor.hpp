#pragma once

#include <cstddef>
#include <stdexcept>

#include "unicompress/basetok.hpp"
#include "unicompress/compressor.hpp"
#include "unicompress/globals.hpp"
#include "unicompress/params.hpp"

// Global-guided autoregressive decompressor: expands the compact context
// [G ; X_deq] back into the dense token grid one raster position at a time.
namespace unicompress::decompressor {

struct DecoderShape {
  std::size_t embed_dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff_mult = 4;
  std::size_t dense_h = 8;    // dense grid to generate
  std::size_t dense_w = 8;
  std::size_t n_g = 4;
  std::size_t stride = 2;     // pooling stride of the local context

  std::size_t dense_tokens() const { return dense_h * dense_w; }
  std::size_t local_tokens() const { return (dense_h / stride) * (dense_w / stride); }
  std::size_t context_len() const { return n_g + local_tokens(); }
};

// "decomp.start", "decomp.dense_pos", "decomp.global_pos" (n_g > 0),
// "decomp.layer<i>.*", "decomp.ln_f.*", "decomp.head.*".
// Local context rows are positioned by the stride-pooled dense positional
// embedding, so a dense query and the compressed cell covering it share a
// position code.
void init_params(ParamSet& ps, const DecoderShape& shape, Rng& rng);

// The cross-attention context shared by every layer.
struct DecoderContext {
  globals::GlobalTokens globals;
  Tensor locals;  // compressed tokens, t~ x d

  std::size_t length() const { return globals.count + locals.rows(); }
};

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Predictions for every dense position given the ground-truth prefix
// (teacher forcing). Row t predicts x_t from [start, x_0 .. x_{t-1}].
// `fed`, when defined, replaces the ground-truth rows fed as the prefix
// (same shape as the target); the prediction targets are unchanged.
Tensor teacher_forced_predictions(const Tensor& dense_target, const DecoderContext& ctx, ParamBinding& params,
                                  const DecoderShape& shape, const Tensor& fed = {});

// Prediction for dense position t. Only rows 0..t-1 of `dense` are read;
// for t = 0 `dense` may be undefined.
Tensor decode_step(const Tensor& dense, std::size_t t, const DecoderContext& ctx, ParamBinding& params,
                   const DecoderShape& shape);

// Deterministic raster-order rollout of all T positions.
basetok::TokenGrid decode_full(const DecoderContext& ctx, ParamBinding& params, const DecoderShape& shape);

struct ReconLossReport {
  double l_reg = 0.0;
  double l_cb = 0.0;
  double lambda_cb = 0.0;
  double total = 0.0;
};

struct ReconLoss {
  Tensor total;  // differentiable L_reg + lambda_cb * L_cb
  ReconLossReport report;
};

// L_reg: mean over dense rows of the squared distance to the target row.
// L_cb: vq_losses(predictions, codebook, beta).
ReconLoss teacher_forced_loss(const basetok::TokenGrid& x_target, const DecoderContext& ctx, ParamBinding& params,
                              const DecoderShape& shape, const Tensor& codes, double lambda_cb, double beta,
                              const Tensor& fed = {});

// parse -> dequantize -> decode_full -> basetok decoder. Nothing is produced
// unless every step succeeds.
basetok::ImageTensor generate_image_from_indices(const compressor::IndexSequence& seq, ParamBinding& params,
                                                 const DecoderShape& shape, const basetok::TokenizerShape& tok);

}  // namespace unicompress::decompressor
