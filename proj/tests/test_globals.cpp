#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_support.hpp"
#include "unicompress/globals.hpp"

using namespace unicompress;
using namespace unicompress::globals;
using unicompress::testing::check_param_grads;
using unicompress::testing::random_tensor;

namespace {

basetok::TokenGrid grid_of(Tensor t, std::size_t h, std::size_t w) { return {h, w, std::move(t)}; }

// Plain-loop layer norm over one row.
std::vector<double> ln_row(std::vector<double> v, std::span<const double> gain, std::span<const double> bias) {
  const double n = static_cast<double>(v.size());
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = gain[j] * (v[j] - mu) * inv + bias[j];
  return v;
}

std::vector<double> vec_mat(std::span<const double> v, const Tensor& m) {
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += v[i] * m.at(i, j);
  return out;
}

void randomize(ParamSet& ps, const std::string& name, Rng& rng) {
  for (auto& v : *ps.entry(name).value) v = rng.normal();
}

}  // namespace

TEST(ExtractGlobals, ZeroFieldGivesNormalisedQueries) {
  ExtractorShape shape{4, 8, 2};
  ParamSet ps;
  Rng rng(1);
  init_params(ps, GlobalKind::kMeta, shape, rng);
  ParamBinding b(ps);
  const auto g = extract_globals(grid_of(Tensor::zeros({6, 8}), 2, 3), b, shape);
  const auto q = ps.tensor("globals.queries");
  const auto gain = ps.tensor("globals.ln.gain").data(), bias = ps.tensor("globals.ln.bias").data();
  for (std::size_t i = 0; i < 4; ++i) {
    const auto expect = ln_row({q.row(i).begin(), q.row(i).end()}, gain, bias);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(g.values.at(i, j), expect[j], 1e-12);
  }
}

TEST(ExtractGlobals, SingleTokenSingleHead) {
  ExtractorShape shape{3, 6, 1};
  ParamSet ps;
  Rng rng(2);
  init_params(ps, GlobalKind::kMeta, shape, rng);
  randomize(ps, "globals.ln.gain", rng);
  randomize(ps, "globals.ln.bias", rng);
  const auto x = random_tensor({1, 6}, rng);
  ParamBinding b(ps);
  const auto g = extract_globals(grid_of(x, 1, 1), b, shape);
  const auto xv = vec_mat(vec_mat(x.row(0), ps.tensor("globals.attn.w_v")), ps.tensor("globals.attn.w_o"));
  const auto q = ps.tensor("globals.queries");
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> pre(6);
    for (std::size_t j = 0; j < 6; ++j) pre[j] = q.at(i, j) + xv[j];
    const auto expect = ln_row(pre, ps.tensor("globals.ln.gain").data(), ps.tensor("globals.ln.bias").data());
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(g.values.at(i, j), expect[j], 1e-12);
  }
}

TEST(ExtractGlobals, ShapeForAnyTokenCount) {
  ExtractorShape shape{4, 32, 2};
  ParamSet ps;
  Rng rng(3);
  init_params(ps, GlobalKind::kMeta, shape, rng);
  ParamBinding b(ps);
  for (std::size_t t : {1u, 2u, 7u, 64u}) {
    const auto g = extract_globals(grid_of(random_tensor({t, 32}, rng), 1, t), b, shape);
    EXPECT_EQ(g.count, 4u);
    EXPECT_EQ(g.values.dims(), (Shape{4, 32}));
    for (double v : g.values.data()) EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_THROW(extract_globals(grid_of(random_tensor({5, 16}, rng), 1, 5), b, shape), ShapeError);
}

TEST(ExtractGlobals, DistinctSlotPositions) {
  ExtractorShape shape{4, 32, 2};
  ParamSet ps;
  Rng rng(4);
  init_params(ps, GlobalKind::kMeta, shape, rng);
  const auto pos = ps.tensor("globals.pos");
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t c = a + 1; c < 4; ++c)
      EXPECT_FALSE(std::equal(pos.row(a).begin(), pos.row(a).end(), pos.row(c).begin()));
}

TEST(ExtractGlobals, InputNotMutated) {
  ExtractorShape shape{4, 8, 2};
  ParamSet ps;
  Rng rng(5);
  init_params(ps, GlobalKind::kMeta, shape, rng);
  const auto x = random_tensor({9, 8}, rng);
  const auto before = x.to_vector();
  ParamBinding b(ps);
  extract_globals(grid_of(x, 3, 3), b, shape);
  EXPECT_EQ(x.to_vector(), before);
}

TEST(ExtractGlobals, PermutationOfTokensLeavesGlobalsUnchanged) {
  ExtractorShape shape{4, 8, 2};
  ParamSet ps;
  Rng rng(6);
  init_params(ps, GlobalKind::kMeta, shape, rng);
  ParamBinding b(ps);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor({12, 8}, rng);
    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 11; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    const auto g1 = extract_globals(grid_of(x, 3, 4), b, shape).values;
    const auto g2 = extract_globals(grid_of(gather_rows(x, perm), 3, 4), b, shape).values;
    for (std::size_t i = 0; i < g1.numel(); ++i) EXPECT_NEAR(g1.data()[i], g2.data()[i], 1e-12);
  }
}

TEST(ExtractGlobals, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    ExtractorShape shape{1 + rng.below(3), 4, trial % 2 ? 2u : 1u};
    ParamSet ps;
    init_params(ps, GlobalKind::kMeta, shape, rng);
    randomize(ps, "globals.ln.gain", rng);
    randomize(ps, "globals.ln.bias", rng);
    const std::size_t t = 1 + rng.below(6);
    const auto x = random_tensor({t, 4}, rng);
    const auto w = unicompress::testing::random_weights(shape.count * 4, rng);
    const auto rep = check_param_grads(ps, [&](ParamBinding& b) {
      return dot_const(extract_globals(grid_of(x, 1, t), b, shape).values, w);
    });
    EXPECT_LT(rep.worst, 1e-5) << "trial " << trial << " worst " << rep.worst_name;
  }
}

TEST(GlobalBaseline, MeanPool) {
  ParamSet ps;
  ParamBinding b(ps);
  const auto constant = Tensor::full({6, 3}, 0.7);
  const auto g = global_token_baseline(GlobalKind::kMeanPool, grid_of(constant, 2, 3), b, 4);
  EXPECT_EQ(g.values.dims(), (Shape{4, 3}));
  for (double v : g.values.data()) EXPECT_NEAR(v, 0.7, 1e-15);

  const auto two = global_token_baseline(GlobalKind::kMeanPool, grid_of(Tensor::matrix({{0, 2}, {2, 0}}), 1, 2), b, 1);
  EXPECT_EQ(two.values.to_vector(), (std::vector<double>{1.0, 1.0}));
}

TEST(GlobalBaseline, ClsReplicatesOneToken) {
  ExtractorShape shape{4, 8, 2};
  ParamSet ps;
  Rng rng(8);
  init_params(ps, GlobalKind::kCls, shape, rng);
  ParamBinding b(ps);
  const auto g = make_globals(GlobalKind::kCls, grid_of(random_tensor({6, 8}, rng), 2, 3), b, shape);
  ASSERT_EQ(g.values.dims(), (Shape{4, 8}));
  for (std::size_t i = 1; i < 4; ++i)
    EXPECT_TRUE(std::equal(g.values.row(0).begin(), g.values.row(0).end(), g.values.row(i).begin()));
}

TEST(GlobalBaseline, AllKindsFillTheSameSlots) {
  ExtractorShape shape{4, 8, 2};
  Rng rng(9);
  const auto x = grid_of(random_tensor({16, 8}, rng), 4, 4);
  for (auto kind : {GlobalKind::kMeta, GlobalKind::kMeanPool, GlobalKind::kCls}) {
    ParamSet ps;
    init_params(ps, kind, shape, rng);
    ParamBinding b(ps);
    const auto g = make_globals(kind, x, b, shape);
    EXPECT_EQ(g.count, 4u) << kind_name(kind);
    EXPECT_EQ(g.values.dims(), (Shape{4, 8})) << kind_name(kind);
  }
  ParamSet ps;
  ParamBinding b(ps);
  EXPECT_EQ(make_globals(GlobalKind::kMeanPool, x, b, ExtractorShape{0, 8, 2}).count, 0u);
}

TEST(GlobalKinds, ParseAndReject) {
  for (auto kind : {GlobalKind::kMeta, GlobalKind::kMeanPool, GlobalKind::kCls})
    EXPECT_EQ(parse_kind(kind_name(kind)), kind);
  EXPECT_THROW(parse_kind("perceiver"), basetok::ConfigError);
  ParamSet ps;
  ParamBinding b(ps);
  EXPECT_THROW(global_token_baseline(GlobalKind::kMeta, grid_of(Tensor::zeros({1, 2}), 1, 1), b, 1),
               basetok::ConfigError);
  EXPECT_THROW(init_params(ps, GlobalKind::kMeta, ExtractorShape{4, 9, 2}, *std::make_unique<Rng>(0)),
               basetok::ConfigError);
}
