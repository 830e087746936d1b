#include <gtest/gtest.h>

#include "test_support.hpp"
#include "unicompress/decompressor.hpp"

using namespace unicompress;
using namespace unicompress::decompressor;
using unicompress::testing::check_param_grads;
using unicompress::testing::random_tensor;

namespace {

DecoderContext random_context(const DecoderShape& shape, Rng& rng) {
  DecoderContext ctx;
  if (shape.n_g > 0) ctx.globals = {shape.n_g, random_tensor({shape.n_g, shape.embed_dim}, rng)};
  ctx.locals = random_tensor({shape.local_tokens(), shape.embed_dim}, rng);
  return ctx;
}

void fill(ParamSet& ps, const std::string& name, double v) {
  for (auto& x : *ps.entry(name).value) x = v;
}

struct Fixture {
  DecoderShape shape;
  ParamSet ps;
  Fixture(DecoderShape s, std::uint64_t seed) : shape(s) {
    Rng rng(seed);
    init_params(ps, shape, rng);
  }
};

}  // namespace

TEST(DecodeStep, OutputShape) {
  Fixture f({32, 2, 2, 4, 8, 8, 4, 2}, 1);
  Rng rng(2);
  ParamBinding b(f.ps);
  const auto out = decode_step(random_tensor({10, 32}, rng), 10, random_context(f.shape, rng), b, f.shape);
  EXPECT_EQ(out.numel(), 32u);
  const auto first = decode_step(Tensor{}, 0, random_context(f.shape, rng), b, f.shape);
  EXPECT_EQ(first.numel(), 32u);
}

TEST(DecodeStep, PositionBeyondGridIsRangeError) {
  Fixture f({8, 1, 2, 2, 2, 2, 1, 2}, 3);
  Rng rng(4);
  ParamBinding b(f.ps);
  EXPECT_THROW(decode_step(random_tensor({4, 8}, rng), 4, random_context(f.shape, rng), b, f.shape), RangeError);
}

TEST(DecodeStep, FuturePrefixHasNoEffect) {
  Fixture f({16, 2, 2, 2, 4, 4, 2, 2}, 5);
  Rng rng(6);
  ParamBinding b(f.ps);
  const auto ctx = random_context(f.shape, rng);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = rng.below(f.shape.dense_tokens());
    const auto dense = random_tensor({f.shape.dense_tokens(), 16}, rng);
    auto perturbed = dense.clone();
    auto buf = perturbed.mutable_data();
    for (std::size_t i = t * 16; i < buf.size(); ++i) buf[i] += rng.normal() * 10.0;
    ASSERT_EQ(decode_step(dense, t, ctx, b, f.shape).to_vector(),
              decode_step(perturbed, t, ctx, b, f.shape).to_vector())
        << "t=" << t;
  }
}

TEST(DecodeStep, ZeroCrossValuesIgnoreContext) {
  Fixture f({16, 1, 2, 2, 4, 4, 2, 2}, 7);
  fill(f.ps, "decomp.layer0.cross.w_v", 0.0);
  Rng rng(8);
  ParamBinding b(f.ps);
  const auto dense = random_tensor({16, 16}, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = rng.below(16);
    EXPECT_EQ(decode_step(dense, t, random_context(f.shape, rng), b, f.shape).to_vector(),
              decode_step(dense, t, random_context(f.shape, rng), b, f.shape).to_vector());
  }
}

TEST(DecodeStep, ContextMattersWithValues) {
  Fixture f({16, 1, 2, 2, 4, 4, 2, 2}, 9);
  Rng rng(10);
  ParamBinding b(f.ps);
  const auto dense = random_tensor({16, 16}, rng);
  EXPECT_NE(decode_step(dense, 5, random_context(f.shape, rng), b, f.shape).to_vector(),
            decode_step(dense, 5, random_context(f.shape, rng), b, f.shape).to_vector());
}

TEST(DecodeFull, FixedLengthDeterministic) {
  Fixture f({16, 2, 2, 2, 4, 6, 2, 2}, 11);
  Rng rng(12);
  ParamBinding b(f.ps);
  const auto ctx = random_context(f.shape, rng);
  const auto a = decode_full(ctx, b, f.shape);
  EXPECT_EQ(a.count(), 24u);
  EXPECT_EQ(a.tokens.dims(), (Shape{24, 16}));
  EXPECT_EQ(a.tokens.to_vector(), decode_full(ctx, b, f.shape).tokens.to_vector());
}

TEST(DecodeFull, RolloutFeedsItsOwnOutputs) {
  Fixture f({8, 1, 2, 2, 2, 4, 0, 1}, 13);
  Rng rng(14);
  ParamBinding b(f.ps);
  const auto ctx = random_context(f.shape, rng);
  const auto full = decode_full(ctx, b, f.shape).tokens;
  for (std::size_t t = 0; t < 8; ++t) {
    const auto step = decode_step(full, t, ctx, b, f.shape);
    EXPECT_EQ(step.to_vector(), slice_rows(full, t, 1).to_vector()) << "t=" << t;
  }
}

TEST(TeacherForcing, MatchesStepwiseOutputs) {
  Fixture f({16, 2, 2, 2, 4, 4, 2, 2}, 15);
  Rng rng(16);
  ParamBinding b(f.ps);
  const auto ctx = random_context(f.shape, rng);
  const auto target = random_tensor({16, 16}, rng);
  const auto preds = teacher_forced_predictions(target, ctx, b, f.shape);
  for (std::size_t t = 0; t < 16; ++t) {
    const auto step = decode_step(target, t, ctx, b, f.shape).to_vector();
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(preds.at(t, j), step[j], 1e-12) << "t=" << t;
  }
}

TEST(TeacherForcing, ContextLengthChecked) {
  Fixture f({16, 1, 2, 2, 4, 4, 2, 2}, 17);
  Rng rng(18);
  ParamBinding b(f.ps);
  DecoderContext ctx = random_context(f.shape, rng);
  ctx.locals = random_tensor({3, 16}, rng);
  EXPECT_THROW(teacher_forced_predictions(random_tensor({16, 16}, rng), ctx, b, f.shape), ShapeError);
  EXPECT_EQ(f.shape.context_len(), 2u + 4u);
}

TEST(ReconLoss, DecompositionIdentity) {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    Fixture f({8, 1, 2, 2, 4, 4, 2, 2}, 100 + trial);
    ParamBinding b(f.ps);
    const auto codes = random_tensor({10, 8}, rng);
    const double lambda = rng.uniform(0.0, 2.0);
    const auto r = teacher_forced_loss({4, 4, random_tensor({16, 8}, rng)}, random_context(f.shape, rng), b, f.shape,
                                       codes, lambda, 0.25);
    EXPECT_NEAR(r.report.total, r.report.l_reg + lambda * r.report.l_cb, 1e-12);
    EXPECT_EQ(r.report.total, r.total.item());
    EXPECT_GE(r.report.l_reg, 0.0);
    EXPECT_GE(r.report.l_cb, 0.0);
  }
}

TEST(ReconLoss, LambdaZeroIsRegressionOnly) {
  Fixture f({8, 1, 2, 2, 2, 2, 1, 2}, 20);
  Rng rng(21);
  ParamBinding b(f.ps);
  const auto r = teacher_forced_loss({2, 2, random_tensor({4, 8}, rng)}, random_context(f.shape, rng), b, f.shape,
                                     random_tensor({5, 8}, rng), 0.0, 0.25);
  EXPECT_EQ(r.report.total, r.report.l_reg);
}

TEST(ReconLoss, PerfectPredictionOnCodeIsZero) {
  Fixture f({4, 1, 2, 2, 2, 2, 1, 2}, 22);
  Rng rng(23);
  const auto codes = random_tensor({6, 4}, rng);
  // Zero head weight: every prediction is the head bias, set to code 3.
  fill(f.ps, "decomp.head.weight", 0.0);
  auto& bias = *f.ps.entry("decomp.head.bias").value;
  for (std::size_t j = 0; j < 4; ++j) bias[j] = codes.at(2, j);
  ParamBinding b(f.ps);
  const auto target = repeat_rows(slice_rows(codes, 2, 1), 4);
  const auto r = teacher_forced_loss({2, 2, target}, random_context(f.shape, rng), b, f.shape, codes, 0.25, 0.25);
  EXPECT_EQ(r.report.total, 0.0);
}

TEST(ReconLoss, GradientsMatchFiniteDifferences) {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t stride = trial % 2 ? 2 : 1;
    const std::size_t n_g = trial % 3;
    Fixture f({4, 1, trial % 4 < 2 ? 1u : 2u, 2, 2, 2, n_g, stride}, 200 + trial);
    // Perturb the zero/one-initialised tensors so every path is exercised.
    for (auto& [name, e] : f.ps.entries_mutable())
      for (auto& v : *e.value) v += 0.1 * rng.normal();
    DecoderContext ctx;
    if (n_g > 0) ctx.globals = {n_g, random_tensor({n_g, 4}, rng, 0.5)};
    ctx.locals = random_tensor({f.shape.local_tokens(), 4}, rng, 0.5);
    const basetok::TokenGrid target{2, 2, random_tensor({4, 4}, rng, 0.5)};
    const auto codes = random_tensor({5, 4}, rng, 0.5);
    const auto rep = check_param_grads(f.ps, [&](ParamBinding& b) {
      return teacher_forced_loss(target, ctx, b, f.shape, codes, 0.25, 0.25).total;
    });
    EXPECT_LT(rep.worst, 1e-5) << "trial " << trial << " worst " << rep.worst_name;
  }
}

TEST(ReconLoss, ContextGradientsMatchFiniteDifferences) {
  Rng rng(25);
  for (int trial = 0; trial < 20; ++trial) {
    Fixture f({4, 1, 2, 2, 2, 2, 2, 2}, 300 + trial);
    ParamBinding b(f.ps);
    const auto target = random_tensor({4, 4}, rng);
    const double err = unicompress::testing::check_op_grads(
        {random_tensor({2, 4}, rng), random_tensor({1, 4}, rng)},
        [&](const std::vector<Tensor>& a) {
          DecoderContext ctx{{2, a[0]}, a[1]};
          return teacher_forced_predictions(target, ctx, b, f.shape);
        },
        rng);
    EXPECT_LT(err, 1e-5) << "trial " << trial;
  }
}

TEST(GenerateFromIndices, MatchesManualPath) {
  basetok::TokenizerShape tok{16, 16, 1, 4, 8, 12};
  DecoderShape shape{8, 1, 2, 2, 4, 4, 2, 2};
  ParamSet ps;
  Rng rng(26);
  basetok::init_params(ps, tok, rng);
  init_params(ps, shape, rng);
  const std::vector<std::uint32_t> zg{3, 12}, zx{1, 5, 5, 7};
  const auto seq = compressor::assemble_sequence(zg, zx, 12);
  ParamBinding b(ps);
  const auto img = generate_image_from_indices(seq, b, shape, tok);

  const auto codes = ps.tensor(basetok::kCodebookName);
  DecoderContext ctx{{2, basetok::dequantize(zg, codes)}, basetok::dequantize(zx, codes)};
  const auto expect = basetok::decode_tokens(decode_full(ctx, b, shape), b, tok);
  EXPECT_EQ(img.values, expect.values);
  EXPECT_EQ(img.height, 16u);
}

TEST(GenerateFromIndices, MalformedSequenceThrows) {
  basetok::TokenizerShape tok{8, 8, 1, 4, 8, 12};
  DecoderShape shape{8, 1, 2, 2, 2, 2, 2, 2};
  ParamSet ps;
  Rng rng(27);
  basetok::init_params(ps, tok, rng);
  init_params(ps, shape, rng);
  ParamBinding b(ps);
  const std::vector<std::uint32_t> zg{3, 12}, zx{1};
  auto seq = compressor::assemble_sequence(zg, zx, 12);
  seq.items.pop_back();
  EXPECT_THROW(generate_image_from_indices(seq, b, shape, tok), compressor::GrammarError);
}

TEST(DecoderInit, StrideMustDivideGrid) {
  ParamSet ps;
  Rng rng(28);
  EXPECT_THROW(init_params(ps, DecoderShape{8, 1, 2, 2, 6, 6, 0, 4}, rng), basetok::ConfigError);
  EXPECT_THROW(init_params(ps, DecoderShape{9, 1, 2, 2, 4, 4, 0, 2}, rng), basetok::ConfigError);
}
