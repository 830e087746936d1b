#include <gtest/gtest.h>

#include "grammar_fuzz.hpp"
#include "test_support.hpp"
#include "unicompress/compressor.hpp"

using namespace unicompress;
using namespace unicompress::compressor;
using unicompress::testing::mutate;
using unicompress::testing::random_tensor;
using unicompress::testing::random_valid_sequence;

namespace {

basetok::TokenGrid random_grid(std::size_t h, std::size_t w, std::size_t d, Rng& rng) {
  return {h, w, random_tensor({h * w, d}, rng)};
}

}  // namespace

TEST(AvgPool, StrideTwoOnSixteenGrid) {
  Rng rng(1);
  const auto out = avg_pool_grid(random_grid(16, 16, 4, rng), 2);
  EXPECT_EQ(out.count(), 64u);
  EXPECT_EQ(out.tokens.rows(), 64u);
  EXPECT_EQ(out.grid_h, 8u);
}

TEST(AvgPool, StrideOneIsBitIdentical) {
  Rng rng(2);
  const auto x = random_grid(8, 8, 32, rng);
  EXPECT_EQ(avg_pool_grid(x, 1).tokens.to_vector(), x.tokens.to_vector());
}

TEST(AvgPool, TwoByTwoBlockMean) {
  const auto x = Tensor::matrix({{1, 2}, {3, 5}, {-4, 0.5}, {7, 1}});
  const auto out = avg_pool_grid({2, 2, x}, 2);
  ASSERT_EQ(out.count(), 1u);
  EXPECT_DOUBLE_EQ(out.tokens.at(0, 0), (1 + 3 - 4 + 7) / 4.0);
  EXPECT_DOUBLE_EQ(out.tokens.at(0, 1), (2 + 5 + 0.5 + 1) / 4.0);
}

TEST(AvgPool, RasterOrderOfBlocks) {
  // 4x4 grid of scalars with value = raster index; block (by, bx) mean is known.
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  const auto out = avg_pool_grid({4, 4, Tensor({16, 1}, v)}, 2);
  EXPECT_EQ(out.tokens.to_vector(), (std::vector<double>{2.5, 4.5, 10.5, 12.5}));
}

TEST(AvgPool, ConstantGridStaysConstantExactly) {
  for (std::size_t s : {1u, 2u, 4u, 8u}) {
    const auto out = avg_pool_grid({8, 8, Tensor::full({64, 3}, 0.3)}, s);
    for (double v : out.tokens.data()) EXPECT_EQ(v, 0.3) << "stride " << s;
    const auto mx = max_pool_grid({8, 8, Tensor::full({64, 3}, 0.3)}, s);
    EXPECT_EQ(mx.tokens.to_vector(), out.tokens.to_vector());
  }
}

TEST(AvgPool, NonDivisibleNamesDims) {
  try {
    avg_pool_grid({6, 8, Tensor::zeros({48, 2})}, 4);
    FAIL() << "no throw";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("H=6"), std::string::npos) << msg;
    EXPECT_NE(msg.find("W=8"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4"), std::string::npos) << msg;
  }
}

TEST(AvgPool, UpsampleThenPoolIsBitIdentical) {
  Rng rng(3);
  for (std::size_t s : {1u, 2u, 4u}) {
    const auto pooled = avg_pool_grid(random_grid(8, 8, 5, rng), s);
    const auto again = avg_pool_grid(upsample_nearest(pooled), s);
    EXPECT_EQ(again.tokens.to_vector(), pooled.tokens.to_vector()) << "stride " << s;
  }
}

TEST(AvgPool, Linear) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_grid(8, 8, 3, rng), y = random_grid(8, 8, 3, rng);
    const double a = rng.normal(), b = rng.normal();
    const auto mix = add(scale(x.tokens, a), scale(y.tokens, b));
    const auto lhs = avg_pool_grid({8, 8, mix}, 2).tokens;
    const auto px = avg_pool_grid(x, 2).tokens, py = avg_pool_grid(y, 2).tokens;
    for (std::size_t i = 0; i < lhs.numel(); ++i)
      EXPECT_NEAR(lhs.data()[i], a * px.data()[i] + b * py.data()[i], 1e-12);
  }
}

TEST(KeepRatio, Grid) {
  EXPECT_EQ(keep_ratio(1), (Rational{1, 1}));
  EXPECT_EQ(keep_ratio(2), (Rational{1, 4}));
  EXPECT_EQ(keep_ratio(4), (Rational{1, 16}));
  EXPECT_EQ(keep_ratio(8), (Rational{1, 64}));
  EXPECT_THROW(keep_ratio(0), std::domain_error);
}

TEST(KeepRatio, LocalCountFollowsRatio) {
  Rng rng(5);
  for (std::size_t s : {1u, 2u, 4u, 8u}) {
    const auto r = keep_ratio(s);
    EXPECT_EQ(avg_pool_grid(random_grid(16, 16, 2, rng), s).count() * r.den, 256u * r.num);
  }
}

TEST(Assemble, Lengths) {
  Rng rng(6);
  EXPECT_EQ(random_valid_sequence(rng, 64, 4, 16).size(), 23u);
  EXPECT_EQ(random_valid_sequence(rng, 64, 4, 64).size(), 71u);
}

TEST(Assemble, EmptySegmentsRejected) {
  const std::vector<std::uint32_t> some{1, 2}, none;
  EXPECT_THROW(assemble_sequence(none, some, 8), GrammarError);
  EXPECT_THROW(assemble_sequence(some, none, 8), GrammarError);
  EXPECT_NO_THROW(assemble_sequence(none, some, 8, true));
  const std::vector<std::uint32_t> bad{1, 9};
  EXPECT_THROW(assemble_sequence(bad, some, 8), GrammarError);
}

TEST(Parse, RoundTrip) {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 1 + rng.below(300);
    const std::size_t n_g = rng.below(6), t = 1 + rng.below(70);
    const auto seq = random_valid_sequence(rng, k, n_g, t);
    const auto split = parse_sequence(seq);
    const auto again = assemble_sequence(split.globals, split.locals, k, n_g == 0);
    ASSERT_EQ(again.items, seq.items);
    ASSERT_EQ(parse_sequence(from_ids(to_ids(seq), n_g, t, k)), split);
    ASSERT_EQ(parse_sequence(from_text(to_text(seq), n_g, t, k)), split);
  }
}

TEST(Parse, MissingSepReportsFirstLocalPosition) {
  const std::vector<std::uint32_t> zg{1, 2, 3, 4}, zx{5, 6};
  auto seq = assemble_sequence(zg, zx, 8);
  seq.items.erase(seq.items.begin() + 5);
  try {
    parse_sequence(seq);
    FAIL() << "no throw";
  } catch (const GrammarError& e) {
    EXPECT_EQ(e.position(), 5u);
  }
}

TEST(Parse, ExtraGlobalCitesExpectedCount) {
  const std::vector<std::uint32_t> zg{1, 2, 3, 4, 5}, zx{5, 6};
  auto seq = assemble_sequence(zg, zx, 8);
  seq.n_g = 4;
  try {
    parse_sequence(seq);
    FAIL() << "no throw";
  } catch (const GrammarError& e) {
    EXPECT_NE(std::string(e.what()).find("n_g=4"), std::string::npos) << e.what();
    EXPECT_EQ(e.position(), 5u);
  }
}

TEST(Parse, RejectsEverySingleMutation) {
  Rng rng(8);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto seq = random_valid_sequence(rng, 64, rng.below(2) ? 4 : 0, 1 + rng.below(16));
    const auto bad = mutate(seq, rng);
    ASSERT_THROW(parse_sequence(bad), GrammarError) << to_text(bad);
  }
}

TEST(TextFormat, SpellsSpecials) {
  const std::vector<std::uint32_t> zg{3, 17}, zx{5, 1, 9};
  const auto seq = assemble_sequence(zg, zx, 32);
  EXPECT_EQ(to_text(seq), "<BOS> 3 17 <SEP> 5 1 9 <EOS>");
  EXPECT_THROW(from_text("<BOS> x <SEP> 1 <EOS>", 1, 1, 8), GrammarError);
  EXPECT_THROW(from_text("<BOS> 9 <SEP> 1 <EOS>", 1, 1, 8), GrammarError);
  EXPECT_EQ(to_ids(seq), (std::vector<std::uint32_t>{33, 3, 17, 34, 5, 1, 9, 35}));
}

TEST(Understanding, OrderingAndSpecials) {
  Rng rng(9);
  const globals::GlobalTokens g{4, random_tensor({4, 32}, rng)};
  const auto xc = avg_pool_grid(random_grid(8, 8, 32, rng), 2);
  const auto specials = random_tensor({3, 32}, rng);
  const auto e = embed_sequence_for_understanding(g, xc, specials);
  ASSERT_EQ(e.dims(), (Shape{23, 32}));
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_TRUE(std::equal(e.row(1 + i).begin(), e.row(1 + i).end(), g.values.row(i).begin()));
  for (std::size_t i = 0; i < 16; ++i)
    EXPECT_TRUE(std::equal(e.row(6 + i).begin(), e.row(6 + i).end(), xc.tokens.row(i).begin()));
  EXPECT_TRUE(std::equal(e.row(0).begin(), e.row(0).end(), specials.row(0).begin()));
  EXPECT_TRUE(std::equal(e.row(5).begin(), e.row(5).end(), specials.row(1).begin()));
  EXPECT_TRUE(std::equal(e.row(22).begin(), e.row(22).end(), specials.row(2).begin()));

  const auto z = embed_sequence_for_understanding(g, xc, Tensor::zeros({3, 32}));
  for (std::size_t r : {0u, 5u, 22u})
    for (double v : z.row(r)) EXPECT_EQ(v, 0.0);

  EXPECT_THROW(embed_sequence_for_understanding(g, xc, Tensor::zeros({3, 16})), ShapeError);
  const globals::GlobalTokens narrow{4, random_tensor({4, 16}, rng)};
  EXPECT_THROW(embed_sequence_for_understanding(narrow, xc, specials), ShapeError);
}

TEST(PoolKinds, ParseAndReject) {
  EXPECT_EQ(parse_pool_kind("avg"), PoolKind::kAvg);
  EXPECT_EQ(parse_pool_kind("max"), PoolKind::kMax);
  EXPECT_THROW(parse_pool_kind("conv"), basetok::ConfigError);
}

TEST(MaxPool, BlockMaximum) {
  const auto x = Tensor::matrix({{1, -2}, {3, -5}, {-4, 0.5}, {7, -1}});
  EXPECT_EQ(max_pool_grid({2, 2, x}, 2).tokens.to_vector(), (std::vector<double>{7, 0.5}));
}
