#include "unicompress/decompressor.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "unicompress/layers.hpp"
#include "unicompress/ops.hpp"

namespace unicompress::decompressor {

namespace {

std::string layer_prefix(std::size_t i) { return "decomp.layer" + std::to_string(i); }

Tensor context_rows(const DecoderContext& ctx, ParamBinding& params, const DecoderShape& shape) {
  if (ctx.globals.count != shape.n_g || ctx.locals.rows() != shape.local_tokens()) {
    throw ShapeError("decompressor context has " + std::to_string(ctx.globals.count) + " global and " +
                     std::to_string(ctx.locals.rows()) + " local rows, model expects " + std::to_string(shape.n_g) +
                     " and " + std::to_string(shape.local_tokens()));
  }
  if (ctx.locals.cols() != shape.embed_dim || (shape.n_g > 0 && ctx.globals.values.cols() != shape.embed_dim)) {
    throw ShapeError("decompressor context width " + std::to_string(ctx.locals.cols()) + " vs " +
                     std::to_string(shape.embed_dim));
  }
  const basetok::TokenGrid pos_grid{shape.dense_h, shape.dense_w, params["decomp.dense_pos"]};
  const Tensor local_pos = compressor::avg_pool_grid(pos_grid, shape.stride).tokens;
  const Tensor locals = add(ctx.locals, local_pos);
  if (shape.n_g == 0) return locals;
  return concat_rows(std::vector<Tensor>{add(ctx.globals.values, params["decomp.global_pos"]), locals});
}

// `inputs` row i is the token fed at dense position i ([start, x_0, ...]).
Tensor run_decoder(const Tensor& inputs, const Tensor& ctx_rows, ParamBinding& params, const DecoderShape& shape) {
  const std::size_t n = inputs.rows();
  Tensor h = add(inputs, slice_rows(params["decomp.dense_pos"], 0, n));
  for (std::size_t l = 0; l < shape.layers; ++l) {
    const std::string p = layer_prefix(l);
    const Tensor a = apply(LayerNormWeights::bind(params, p + ".ln1"), h);
    h = add(h, multi_head_attention(a, a, AttentionWeights::bind(params, p + ".self", shape.heads), true));
    const Tensor c = apply(LayerNormWeights::bind(params, p + ".ln2"), h);
    h = add(h, multi_head_attention(c, ctx_rows, AttentionWeights::bind(params, p + ".cross", shape.heads), false));
    const Tensor f = apply(LayerNormWeights::bind(params, p + ".ln3"), h);
    h = add(h, apply(FeedForwardWeights::bind(params, p + ".ff"), f));
  }
  const Tensor out = apply(LayerNormWeights::bind(params, "decomp.ln_f"), h);
  return affine(out, params["decomp.head.weight"], params["decomp.head.bias"]);
}

}  // namespace

void init_params(ParamSet& ps, const DecoderShape& shape, Rng& rng) {
  const std::size_t d = shape.embed_dim;
  if (shape.heads == 0 || d % shape.heads != 0) throw basetok::ConfigError("decoder heads must divide embed_dim");
  if (shape.stride == 0 || shape.dense_h % shape.stride != 0 || shape.dense_w % shape.stride != 0) {
    throw basetok::ConfigError("decoder stride must divide the dense grid");
  }
  ps.add_normal("decomp.dense_pos", {shape.dense_tokens(), d}, 0.5, rng);
  if (shape.n_g > 0) ps.add_normal("decomp.global_pos", {shape.n_g, d}, 0.5, rng);
  ps.add_constant("decomp.head.bias", {d}, 0.0);
  ps.add_normal("decomp.head.weight", {d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  for (std::size_t l = 0; l < shape.layers; ++l) {
    const std::string p = layer_prefix(l);
    add_attention_params(ps, p + ".cross", d, rng);
    add_feed_forward_params(ps, p + ".ff", d, shape.ff_mult * d, rng);
    add_layer_norm_params(ps, p + ".ln1", d);
    add_layer_norm_params(ps, p + ".ln2", d);
    add_layer_norm_params(ps, p + ".ln3", d);
    add_attention_params(ps, p + ".self", d, rng);
  }
  add_layer_norm_params(ps, "decomp.ln_f", d);
  ps.add_normal("decomp.start", {1, d}, 0.02, rng);
}

Tensor teacher_forced_predictions(const Tensor& dense_target, const DecoderContext& ctx, ParamBinding& params,
                                  const DecoderShape& shape, const Tensor& fed) {
  const std::size_t t = shape.dense_tokens();
  if (dense_target.rows() != t || dense_target.cols() != shape.embed_dim) {
    throw ShapeError("teacher forcing target " + shape_str(dense_target.dims()) + ", model expects " +
                     std::to_string(t) + "x" + std::to_string(shape.embed_dim));
  }
  const Tensor& prefix = fed.defined() ? fed : dense_target;
  if (prefix.dims() != dense_target.dims()) throw ShapeError("teacher forcing: fed prefix shape differs from target");
  const Tensor& start = params["decomp.start"];
  const Tensor inputs = t == 1 ? start : concat_rows(std::vector<Tensor>{start, slice_rows(prefix, 0, t - 1)});
  return run_decoder(inputs, context_rows(ctx, params, shape), params, shape);
}

Tensor decode_step(const Tensor& dense, std::size_t t, const DecoderContext& ctx, ParamBinding& params,
                   const DecoderShape& shape) {
  if (t >= shape.dense_tokens()) {
    throw RangeError("decode_step: position " + std::to_string(t) + " outside dense grid of " +
                     std::to_string(shape.dense_tokens()));
  }
  const Tensor& start = params["decomp.start"];
  Tensor inputs = start;
  if (t > 0) {
    if (!dense.defined() || dense.rows() < t) throw ShapeError("decode_step: prefix shorter than position");
    inputs = concat_rows(std::vector<Tensor>{start, slice_rows(dense, 0, t)});
  }
  const Tensor out = run_decoder(inputs, context_rows(ctx, params, shape), params, shape);
  return slice_rows(out, t, 1);
}

basetok::TokenGrid decode_full(const DecoderContext& ctx, ParamBinding& params, const DecoderShape& shape) {
  NoGradGuard no_grad;
  const std::size_t total = shape.dense_tokens(), d = shape.embed_dim;
  Tensor dense = Tensor::zeros({total, d});
  auto buf = dense.mutable_data();
  for (std::size_t t = 0; t < total; ++t) {
    const Tensor next = decode_step(dense, t, ctx, params, shape);
    const auto v = next.data();
    std::copy(v.begin(), v.end(), buf.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  return basetok::TokenGrid{shape.dense_h, shape.dense_w, dense};
}

ReconLoss teacher_forced_loss(const basetok::TokenGrid& x_target, const DecoderContext& ctx, ParamBinding& params,
                              const DecoderShape& shape, const Tensor& codes, double lambda_cb, double beta,
                              const Tensor& fed) {
  const Tensor target = detach(x_target.tokens);
  const Tensor preds = teacher_forced_predictions(target, ctx, params, shape, fed.defined() ? detach(fed) : fed);
  const Tensor l_reg = mean_row_sq_dist(preds, target);
  const auto vq = basetok::vq_losses(preds, codes, beta);
  Tensor total = lambda_cb == 0.0 ? l_reg : add(l_reg, scale(vq.loss, lambda_cb));
  ReconLossReport report{l_reg.item(), vq.loss.item(), lambda_cb, total.item()};
  return ReconLoss{std::move(total), report};
}

basetok::ImageTensor generate_image_from_indices(const compressor::IndexSequence& seq, ParamBinding& params,
                                                 const DecoderShape& shape, const basetok::TokenizerShape& tok) {
  NoGradGuard no_grad;
  const auto split = compressor::parse_sequence(seq);
  const Tensor& codes = params[basetok::kCodebookName];
  DecoderContext ctx;
  if (!split.globals.empty()) {
    ctx.globals = globals::GlobalTokens{split.globals.size(), basetok::dequantize(split.globals, codes)};
  }
  ctx.locals = basetok::dequantize(split.locals, codes);
  const auto dense = decode_full(ctx, params, shape);
  return basetok::decode_tokens(dense, params, tok);
}

}  // namespace unicompress::decompressor
