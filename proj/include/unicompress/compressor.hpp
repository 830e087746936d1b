#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "unicompress/basetok.hpp"
#include "unicompress/globals.hpp"

// Pooling compressor and the discrete visual-sequence wire format
//   <BOS> global indices <SEP> local indices <EOS>
namespace unicompress::compressor {

struct CompressedGrid {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t stride = 1;
  Tensor tokens;

  std::size_t count() const { return grid_h * grid_w; }
};

enum class PoolKind { kAvg, kMax };
PoolKind parse_pool_kind(std::string_view name);
std::string_view pool_kind_name(PoolKind kind);

// Mean of each non-overlapping s x s block, raster order. s = 1 is the identity.
CompressedGrid avg_pool_grid(const basetok::TokenGrid& x, std::size_t stride);
// Element-wise block maximum; only used by the compressor ablation.
CompressedGrid max_pool_grid(const basetok::TokenGrid& x, std::size_t stride);
CompressedGrid pool_grid(PoolKind kind, const basetok::TokenGrid& x, std::size_t stride);
// Nearest-neighbour expansion back to the dense grid.
basetok::TokenGrid upsample_nearest(const CompressedGrid& xc);

struct Rational {
  std::uint64_t num = 1;
  std::uint64_t den = 1;
  friend bool operator==(const Rational&, const Rational&) = default;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

// 1 / s^2
Rational keep_ratio(std::size_t stride);

enum class TokenKind : std::uint8_t { kBos, kSep, kEos, kGlobal, kLocal };

struct SeqToken {
  TokenKind kind;
  std::uint32_t index = 0;  // 1..K for kGlobal / kLocal
  friend bool operator==(const SeqToken&, const SeqToken&) = default;
};

struct IndexSequence {
  std::vector<SeqToken> items;
  std::size_t n_g = 0;
  std::size_t t_local = 0;
  std::size_t codebook_size = 0;

  std::size_t size() const { return items.size(); }
};

class GrammarError : public std::runtime_error {
 public:
  GrammarError(const std::string& what, std::size_t position)
      : std::runtime_error(what + " (position " + std::to_string(position) + ")"), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

struct SplitIndices {
  std::vector<std::uint32_t> globals;
  std::vector<std::uint32_t> locals;
  friend bool operator==(const SplitIndices&, const SplitIndices&) = default;
};

// Empty `zg` is rejected unless `allow_empty_globals` (the N_g = 0 ablation).
IndexSequence assemble_sequence(std::span<const std::uint32_t> zg, std::span<const std::uint32_t> zx,
                                std::size_t codebook_size, bool allow_empty_globals = false);
// Validates against the declared n_g / t_local / codebook size.
SplitIndices parse_sequence(const IndexSequence& seq);

// Discrete vocabulary ids: codes 1..K, then <BOS>=K+1, <SEP>=K+2, <EOS>=K+3.
std::uint32_t bos_id(std::size_t codebook_size);
std::uint32_t sep_id(std::size_t codebook_size);
std::uint32_t eos_id(std::size_t codebook_size);
std::vector<std::uint32_t> to_ids(const IndexSequence& seq);
// Classifies ids by value only; parse_sequence() does the grammar check.
IndexSequence from_ids(std::span<const std::uint32_t> ids, std::size_t n_g, std::size_t t_local,
                       std::size_t codebook_size);

// "<BOS> 3 17 <SEP> 5 ... <EOS>"
std::string to_text(const IndexSequence& seq);
IndexSequence from_text(std::string_view line, std::size_t n_g, std::size_t t_local, std::size_t codebook_size);

inline constexpr const char* kSpecialsName = "compressor.specials";
// Three d-dim special embeddings (BOS, SEP, EOS rows).
void init_params(ParamSet& ps, std::size_t embed_dim, Rng& rng);

// Continuous rows [BOS; G; SEP; Xc; EOS] for the understanding path.
Tensor embed_sequence_for_understanding(const globals::GlobalTokens& g, const CompressedGrid& xc,
                                        const Tensor& specials);

}  // namespace unicompress::compressor
