#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "unicompress/basetok.hpp"
#include "unicompress/params.hpp"

// Image-specific global tokens read from the token field by learnable meta
// queries through one-way cross-attention.
namespace unicompress::globals {

enum class GlobalKind { kMeta, kMeanPool, kCls };

GlobalKind parse_kind(std::string_view name);
std::string_view kind_name(GlobalKind kind);

// count == 0 means the global stream is disabled and `values` is undefined.
struct GlobalTokens {
  std::size_t count = 0;
  Tensor values;
};

struct ExtractorShape {
  std::size_t count = 4;  // N_g
  std::size_t embed_dim = 32;
  std::size_t heads = 2;
};

// "globals.queries", "globals.pos", "globals.attn.*", "globals.ln.*" for the
// meta extractor; "globals.cls.*" for the CLS baseline.
void init_params(ParamSet& ps, GlobalKind kind, const ExtractorShape& shape, Rng& rng);

// G = LN(Q + MHA((Q + P) W_Q, X W_K, X W_V) W_O). X is only read.
GlobalTokens extract_globals(const basetok::TokenGrid& x, ParamBinding& params, const ExtractorShape& shape);

// mean_pool: every slot is the mean token. cls: one learned query read with a
// single head, replicated to `count` slots.
GlobalTokens global_token_baseline(GlobalKind kind, const basetok::TokenGrid& x, ParamBinding& params,
                                   std::size_t count);

// Dispatches on `kind`; count == 0 yields an empty GlobalTokens.
GlobalTokens make_globals(GlobalKind kind, const basetok::TokenGrid& x, ParamBinding& params,
                          const ExtractorShape& shape);

}  // namespace unicompress::globals
