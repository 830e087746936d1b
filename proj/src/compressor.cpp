#include "unicompress/compressor.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <sstream>

#include "unicompress/ops.hpp"

namespace unicompress::compressor {

namespace {

void check_stride(const basetok::TokenGrid& x, std::size_t s) {
  if (s == 0 || x.grid_h % s != 0 || x.grid_w % s != 0) {
    throw ShapeError("pool: grid H=" + std::to_string(x.grid_h) + ", W=" + std::to_string(x.grid_w) +
                     " is not divisible by stride s=" + std::to_string(s));
  }
  if (x.tokens.rows() != x.count()) throw ShapeError("pool: token count does not match grid dims");
}

// Source row of element (block b, member m) for an s x s block in raster order.
std::size_t block_source(std::size_t b, std::size_t m, std::size_t gw, std::size_t s) {
  const std::size_t ow = gw / s;
  const std::size_t by = b / ow, bx = b % ow;
  return (by * s + m / s) * gw + bx * s + m % s;
}

}  // namespace

PoolKind parse_pool_kind(std::string_view name) {
  if (name == "avg") return PoolKind::kAvg;
  if (name == "max") return PoolKind::kMax;
  throw basetok::ConfigError("unknown compressor '" + std::string(name) + "' (avg|max)");
}

std::string_view pool_kind_name(PoolKind kind) { return kind == PoolKind::kAvg ? "avg" : "max"; }

CompressedGrid avg_pool_grid(const basetok::TokenGrid& x, std::size_t s) {
  check_stride(x, s);
  if (s == 1) return CompressedGrid{x.grid_h, x.grid_w, 1, x.tokens};
  const std::size_t d = x.tokens.cols(), gw = x.grid_w;
  const std::size_t oh = x.grid_h / s, ow = gw / s, blocks = oh * ow, members = s * s;
  const auto src = x.tokens.data();
  std::vector<double> out(blocks * d, 0.0);
  const double inv = 1.0 / static_cast<double>(members);
  // Mean as first member plus the mean offset from it: exact on constant
  // blocks, so pooling a constant (or nearest-upsampled) grid is lossless.
  for (std::size_t b = 0; b < blocks; ++b) {
    double* dst = out.data() + b * d;
    const double* first = src.data() + block_source(b, 0, gw, s) * d;
    for (std::size_t m = 1; m < members; ++m) {
      const double* row = src.data() + block_source(b, m, gw, s) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += row[j] - first[j];
    }
    for (std::size_t j = 0; j < d; ++j) dst[j] = first[j] + dst[j] * inv;
  }
  const bool track = detail::needs_grad({&x.tokens});
  Tensor r = detail::make_result({blocks, d}, std::move(out), track);
  if (track) {
    Tape::active()->record([xn = x.tokens.node_ptr(), rn = r.node_ptr(), blocks, members, gw, s, d, inv] {
      if (rn->grad.empty()) return;
      auto& g = xn->ensure_grad();
      for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t m = 0; m < members; ++m) {
          double* row = g.data() + block_source(b, m, gw, s) * d;
          for (std::size_t j = 0; j < d; ++j) row[j] += inv * rn->grad[b * d + j];
        }
    });
  }
  return CompressedGrid{oh, ow, s, std::move(r)};
}

CompressedGrid max_pool_grid(const basetok::TokenGrid& x, std::size_t s) {
  check_stride(x, s);
  if (s == 1) return CompressedGrid{x.grid_h, x.grid_w, 1, x.tokens};
  const std::size_t d = x.tokens.cols(), gw = x.grid_w;
  const std::size_t oh = x.grid_h / s, ow = gw / s, blocks = oh * ow, members = s * s;
  const auto src = x.tokens.data();
  std::vector<double> out(blocks * d);
  std::vector<std::size_t> arg(blocks * d);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t j = 0; j < d; ++j) {
      std::size_t best = block_source(b, 0, gw, s);
      for (std::size_t m = 1; m < members; ++m) {
        const std::size_t r = block_source(b, m, gw, s);
        if (src[r * d + j] > src[best * d + j]) best = r;
      }
      out[b * d + j] = src[best * d + j];
      arg[b * d + j] = best;
    }
  const bool track = detail::needs_grad({&x.tokens});
  Tensor r = detail::make_result({blocks, d}, std::move(out), track);
  if (track) {
    Tape::active()->record([xn = x.tokens.node_ptr(), rn = r.node_ptr(), arg = std::move(arg), d] {
      if (rn->grad.empty()) return;
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i] * d + i % d] += rn->grad[i];
    });
  }
  return CompressedGrid{oh, ow, s, std::move(r)};
}

CompressedGrid pool_grid(PoolKind kind, const basetok::TokenGrid& x, std::size_t stride) {
  return kind == PoolKind::kAvg ? avg_pool_grid(x, stride) : max_pool_grid(x, stride);
}

basetok::TokenGrid upsample_nearest(const CompressedGrid& xc) {
  const std::size_t s = xc.stride, gh = xc.grid_h * s, gw = xc.grid_w * s;
  std::vector<std::size_t> rows(gh * gw);
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x) rows[y * gw + x] = (y / s) * xc.grid_w + x / s;
  return basetok::TokenGrid{gh, gw, gather_rows(xc.tokens, rows)};
}

Rational keep_ratio(std::size_t stride) {
  if (stride == 0) throw std::domain_error("keep_ratio: stride must be >= 1");
  return Rational{1, static_cast<std::uint64_t>(stride) * stride};
}

IndexSequence assemble_sequence(std::span<const std::uint32_t> zg, std::span<const std::uint32_t> zx,
                                std::size_t codebook_size, bool allow_empty_globals) {
  if (zg.empty() && !allow_empty_globals) throw GrammarError("global segment is empty", 1);
  if (zx.empty()) throw GrammarError("local segment is empty", zg.size() + 2);
  IndexSequence seq;
  seq.n_g = zg.size();
  seq.t_local = zx.size();
  seq.codebook_size = codebook_size;
  seq.items.reserve(zg.size() + zx.size() + 3);
  seq.items.push_back({TokenKind::kBos, 0});
  for (std::size_t i = 0; i < zg.size(); ++i) {
    if (zg[i] < 1 || zg[i] > codebook_size) {
      throw GrammarError("global index " + std::to_string(zg[i]) + " outside 1.." + std::to_string(codebook_size), i + 1);
    }
    seq.items.push_back({TokenKind::kGlobal, zg[i]});
  }
  seq.items.push_back({TokenKind::kSep, 0});
  for (std::size_t i = 0; i < zx.size(); ++i) {
    if (zx[i] < 1 || zx[i] > codebook_size) {
      throw GrammarError("local index " + std::to_string(zx[i]) + " outside 1.." + std::to_string(codebook_size),
                         zg.size() + 2 + i);
    }
    seq.items.push_back({TokenKind::kLocal, zx[i]});
  }
  seq.items.push_back({TokenKind::kEos, 0});
  return seq;
}

namespace {

std::string describe(const SeqToken& t) {
  switch (t.kind) {
    case TokenKind::kBos: return "<BOS>";
    case TokenKind::kSep: return "<SEP>";
    case TokenKind::kEos: return "<EOS>";
    case TokenKind::kGlobal: return "global index " + std::to_string(t.index);
    case TokenKind::kLocal: return "local index " + std::to_string(t.index);
  }
  return "?";
}

}  // namespace

SplitIndices parse_sequence(const IndexSequence& seq) {
  const auto& items = seq.items;
  const std::size_t n_g = seq.n_g, t_local = seq.t_local, k = seq.codebook_size;
  auto expect_special = [&](std::size_t pos, TokenKind kind, const std::string& label) {
    if (pos >= items.size()) throw GrammarError("sequence ends where " + label + " is expected", pos);
    if (items[pos].kind != kind) {
      throw GrammarError("expected " + label + ", found " + describe(items[pos]), pos);
    }
  };
  auto expect_code = [&](std::size_t pos, TokenKind kind, const std::string& segment) {
    if (pos >= items.size()) throw GrammarError("sequence ends inside the " + segment + " segment", pos);
    if (items[pos].kind != kind) {
      throw GrammarError("expected " + segment + " index, found " + describe(items[pos]), pos);
    }
    if (items[pos].index < 1 || items[pos].index > k) {
      throw GrammarError(segment + " index " + std::to_string(items[pos].index) + " outside 1.." + std::to_string(k), pos);
    }
  };

  SplitIndices out;
  expect_special(0, TokenKind::kBos, "<BOS>");
  for (std::size_t i = 0; i < n_g; ++i) {
    expect_code(1 + i, TokenKind::kGlobal, "global");
    out.globals.push_back(items[1 + i].index);
  }
  const std::size_t sep = 1 + n_g;
  if (sep < items.size() && items[sep].kind == TokenKind::kGlobal) {
    throw GrammarError("expected <SEP> after n_g=" + std::to_string(n_g) + " global indices", sep);
  }
  expect_special(sep, TokenKind::kSep, "<SEP>");
  for (std::size_t i = 0; i < t_local; ++i) {
    expect_code(sep + 1 + i, TokenKind::kLocal, "local");
    out.locals.push_back(items[sep + 1 + i].index);
  }
  const std::size_t eos = sep + 1 + t_local;
  if (eos < items.size() && items[eos].kind == TokenKind::kLocal) {
    throw GrammarError("expected <EOS> after t_local=" + std::to_string(t_local) + " local indices", eos);
  }
  expect_special(eos, TokenKind::kEos, "<EOS>");
  if (items.size() != eos + 1) throw GrammarError("trailing tokens after <EOS>", eos + 1);
  if (t_local == 0) throw GrammarError("local segment is empty", sep + 1);
  return out;
}

std::uint32_t bos_id(std::size_t k) { return static_cast<std::uint32_t>(k + 1); }
std::uint32_t sep_id(std::size_t k) { return static_cast<std::uint32_t>(k + 2); }
std::uint32_t eos_id(std::size_t k) { return static_cast<std::uint32_t>(k + 3); }

std::vector<std::uint32_t> to_ids(const IndexSequence& seq) {
  std::vector<std::uint32_t> ids;
  ids.reserve(seq.items.size());
  for (const auto& t : seq.items) {
    switch (t.kind) {
      case TokenKind::kBos: ids.push_back(bos_id(seq.codebook_size)); break;
      case TokenKind::kSep: ids.push_back(sep_id(seq.codebook_size)); break;
      case TokenKind::kEos: ids.push_back(eos_id(seq.codebook_size)); break;
      default: ids.push_back(t.index); break;
    }
  }
  return ids;
}

IndexSequence from_ids(std::span<const std::uint32_t> ids, std::size_t n_g, std::size_t t_local,
                       std::size_t codebook_size) {
  IndexSequence seq;
  seq.n_g = n_g;
  seq.t_local = t_local;
  seq.codebook_size = codebook_size;
  bool after_sep = false;
  for (std::uint32_t id : ids) {
    if (id == bos_id(codebook_size)) {
      seq.items.push_back({TokenKind::kBos, 0});
    } else if (id == sep_id(codebook_size)) {
      seq.items.push_back({TokenKind::kSep, 0});
      after_sep = true;
    } else if (id == eos_id(codebook_size)) {
      seq.items.push_back({TokenKind::kEos, 0});
    } else {
      seq.items.push_back({after_sep ? TokenKind::kLocal : TokenKind::kGlobal, id});
    }
  }
  return seq;
}

std::string to_text(const IndexSequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.items.size(); ++i) {
    if (i) out += ' ';
    const auto& t = seq.items[i];
    switch (t.kind) {
      case TokenKind::kBos: out += "<BOS>"; break;
      case TokenKind::kSep: out += "<SEP>"; break;
      case TokenKind::kEos: out += "<EOS>"; break;
      default: out += std::to_string(t.index); break;
    }
  }
  return out;
}

IndexSequence from_text(std::string_view line, std::size_t n_g, std::size_t t_local, std::size_t codebook_size) {
  std::vector<std::uint32_t> ids;
  std::size_t pos = 0;
  std::size_t token_no = 0;
  while (pos < line.size()) {
    while (pos < line.size() && std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
    if (pos >= line.size()) break;
    std::size_t end = pos;
    while (end < line.size() && !std::isspace(static_cast<unsigned char>(line[end]))) ++end;
    const std::string_view word = line.substr(pos, end - pos);
    if (word == "<BOS>") {
      ids.push_back(bos_id(codebook_size));
    } else if (word == "<SEP>") {
      ids.push_back(sep_id(codebook_size));
    } else if (word == "<EOS>") {
      ids.push_back(eos_id(codebook_size));
    } else {
      std::uint32_t v = 0;
      const auto [p, ec] = std::from_chars(word.data(), word.data() + word.size(), v);
      if (ec != std::errc() || p != word.data() + word.size() || v == 0 || v > codebook_size) {
        throw GrammarError("unrecognised token '" + std::string(word) + "'", token_no);
      }
      ids.push_back(v);
    }
    ++token_no;
    pos = end;
  }
  return from_ids(ids, n_g, t_local, codebook_size);
}

void init_params(ParamSet& ps, std::size_t embed_dim, Rng& rng) {
  ps.add_normal(kSpecialsName, {3, embed_dim}, 1.0, rng);
}

Tensor embed_sequence_for_understanding(const globals::GlobalTokens& g, const CompressedGrid& xc,
                                        const Tensor& specials) {
  const std::size_t d = xc.tokens.cols();
  if (specials.rows() != 3 || specials.cols() != d) {
    throw ShapeError("specials " + shape_str(specials.dims()) + " against width " + std::to_string(d));
  }
  if (g.count > 0 && g.values.cols() != d) {
    throw ShapeError("global tokens " + shape_str(g.values.dims()) + " against width " + std::to_string(d));
  }
  std::vector<Tensor> parts;
  parts.push_back(slice_rows(specials, 0, 1));
  if (g.count > 0) parts.push_back(g.values);
  parts.push_back(slice_rows(specials, 1, 1));
  parts.push_back(xc.tokens);
  parts.push_back(slice_rows(specials, 2, 1));
  return concat_rows(parts);
}

}  // namespace unicompress::compressor
