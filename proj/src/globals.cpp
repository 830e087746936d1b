#include "unicompress/globals.hpp"

#include <cmath>

#include "unicompress/layers.hpp"
#include "unicompress/ops.hpp"

namespace unicompress::globals {

GlobalKind parse_kind(std::string_view name) {
  if (name == "meta") return GlobalKind::kMeta;
  if (name == "mean_pool") return GlobalKind::kMeanPool;
  if (name == "cls") return GlobalKind::kCls;
  throw basetok::ConfigError("unknown global token kind '" + std::string(name) + "' (meta|mean_pool|cls)");
}

std::string_view kind_name(GlobalKind kind) {
  switch (kind) {
    case GlobalKind::kMeta: return "meta";
    case GlobalKind::kMeanPool: return "mean_pool";
    case GlobalKind::kCls: return "cls";
  }
  return "?";
}

void init_params(ParamSet& ps, GlobalKind kind, const ExtractorShape& shape, Rng& rng) {
  const std::size_t d = shape.embed_dim;
  if (shape.count == 0) return;
  switch (kind) {
    case GlobalKind::kMeta:
      if (shape.heads == 0 || d % shape.heads != 0) {
        throw basetok::ConfigError("extractor heads must divide embed_dim");
      }
      add_attention_params(ps, "globals.attn", d, rng);
      add_layer_norm_params(ps, "globals.ln", d);
      ps.add_normal("globals.pos", {shape.count, d}, 0.02, rng);
      ps.add_normal("globals.queries", {shape.count, d}, 1.0, rng);
      break;
    case GlobalKind::kCls:
      add_attention_params(ps, "globals.cls.attn", d, rng);
      add_layer_norm_params(ps, "globals.cls.ln", d);
      ps.add_normal("globals.cls.query", {1, d}, 1.0, rng);
      break;
    case GlobalKind::kMeanPool:
      break;
  }
}

GlobalTokens extract_globals(const basetok::TokenGrid& x, ParamBinding& params, const ExtractorShape& shape) {
  const Tensor& q = params["globals.queries"];
  const Tensor& pos = params["globals.pos"];
  if (q.rows() != shape.count || q.cols() != x.tokens.cols()) {
    throw ShapeError("extract_globals: queries " + shape_str(q.dims()) + " against tokens " +
                     shape_str(x.tokens.dims()));
  }
  const auto attn = AttentionWeights::bind(params, "globals.attn", shape.heads);
  const Tensor mixed = multi_head_attention(add(q, pos), x.tokens, attn, /*causal=*/false);
  Tensor g = apply(LayerNormWeights::bind(params, "globals.ln"), add(q, mixed));
  return GlobalTokens{shape.count, std::move(g)};
}

GlobalTokens global_token_baseline(GlobalKind kind, const basetok::TokenGrid& x, ParamBinding& params,
                                   std::size_t count) {
  switch (kind) {
    case GlobalKind::kMeanPool:
      return GlobalTokens{count, repeat_rows(mean_rows(x.tokens), count)};
    case GlobalKind::kCls: {
      const Tensor& q = params["globals.cls.query"];
      const auto attn = AttentionWeights::bind(params, "globals.cls.attn", 1);
      const Tensor mixed = multi_head_attention(q, x.tokens, attn, /*causal=*/false);
      const Tensor g = apply(LayerNormWeights::bind(params, "globals.cls.ln"), add(q, mixed));
      return GlobalTokens{count, repeat_rows(g, count)};
    }
    case GlobalKind::kMeta:
      break;
  }
  throw basetok::ConfigError("global_token_baseline: kind must be mean_pool or cls");
}

GlobalTokens make_globals(GlobalKind kind, const basetok::TokenGrid& x, ParamBinding& params,
                          const ExtractorShape& shape) {
  if (shape.count == 0) return {};
  if (kind == GlobalKind::kMeta) return extract_globals(x, params, shape);
  return global_token_baseline(kind, x, params, shape.count);
}

}  // namespace unicompress::globals
