#pragma once

#include <cstdint>
#include <vector>

#include "unicompress/compressor.hpp"
#include "unicompress/rng.hpp"

namespace unicompress::testing {

inline compressor::IndexSequence random_valid_sequence(Rng& rng, std::size_t k, std::size_t n_g,
                                                       std::size_t t_local) {
  std::vector<std::uint32_t> zg(n_g), zx(t_local);
  for (auto& v : zg) v = static_cast<std::uint32_t>(1 + rng.below(k));
  for (auto& v : zx) v = static_cast<std::uint32_t>(1 + rng.below(k));
  return compressor::assemble_sequence(zg, zx, k, n_g == 0);
}

// One grammar-breaking edit at a random position: delete, insert, swap a
// special for a code (or the reverse), exchange specials, move a code to
// the wrong segment, or push a code out of 1..K. Substituting one in-range
// code for another is not a grammar violation and is never produced.
inline compressor::IndexSequence mutate(const compressor::IndexSequence& seq, Rng& rng) {
  using compressor::SeqToken;
  using compressor::TokenKind;
  auto out = seq;
  auto& items = out.items;
  const std::size_t k = seq.codebook_size;
  const auto random_code = [&] { return static_cast<std::uint32_t>(1 + rng.below(k)); };
  const auto random_kind = [&] { return static_cast<TokenKind>(rng.below(5)); };
  const std::size_t pos = rng.below(items.size());
  const bool is_special = items[pos].kind == TokenKind::kBos || items[pos].kind == TokenKind::kSep ||
                          items[pos].kind == TokenKind::kEos;
  switch (rng.below(4)) {
    case 0:
      items.erase(items.begin() + static_cast<std::ptrdiff_t>(pos));
      break;
    case 1: {
      const auto kind = random_kind();
      const bool code = kind == TokenKind::kGlobal || kind == TokenKind::kLocal;
      items.insert(items.begin() + static_cast<std::ptrdiff_t>(rng.below(items.size() + 1)),
                   SeqToken{kind, code ? random_code() : 0u});
      break;
    }
    case 2:
      if (is_special) {
        // Another special, or a code of either segment.
        TokenKind kind = items[pos].kind;
        while (kind == items[pos].kind) kind = random_kind();
        const bool code = kind == TokenKind::kGlobal || kind == TokenKind::kLocal;
        items[pos] = SeqToken{kind, code ? random_code() : 0u};
      } else {
        const TokenKind specials[] = {TokenKind::kBos, TokenKind::kSep, TokenKind::kEos};
        const TokenKind wrong = items[pos].kind == TokenKind::kGlobal ? TokenKind::kLocal : TokenKind::kGlobal;
        items[pos] = rng.below(2) ? SeqToken{specials[rng.below(3)], 0u} : SeqToken{wrong, items[pos].index};
      }
      break;
    default:
      if (is_special) {
        items[pos] = SeqToken{rng.below(2) ? TokenKind::kGlobal : TokenKind::kLocal, random_code()};
      } else {
        items[pos].index = rng.below(2) ? 0u : static_cast<std::uint32_t>(k + 1 + rng.below(1000));
      }
      break;
  }
  return out;
}

}  // namespace unicompress::testing
