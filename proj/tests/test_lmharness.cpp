#include <gtest/gtest.h>

#include <cmath>

#include "grammar_fuzz.hpp"
#include "test_support.hpp"
#include "unicompress/lmharness.hpp"

using namespace unicompress;
using namespace unicompress::lmharness;
using unicompress::testing::check_param_grads;
using unicompress::testing::random_tensor;
using unicompress::testing::random_valid_sequence;

namespace {

SequenceModelShape tiny_shape() {
  SequenceModelShape s;
  s.codebook_size = 6;
  s.classes = 2;
  s.width = 4;
  s.layers = 1;
  s.heads = 2;
  s.ff_mult = 2;
  s.max_positions = 12;
  s.visual_dim = 4;
  return s;
}

ParamSet make_params(const SequenceModelShape& shape, Rng& rng) {
  ParamSet ps;
  compressor::init_params(ps, shape.visual_dim, rng);
  init_params(ps, shape, rng);
  return ps;
}

// Class c always maps to the same code pattern, with occasional substitutions.
std::vector<PromptRecord> patterned_records(const SequenceModelShape& shape, std::size_t count, std::size_t n_g,
                                            std::size_t t_local, Rng& rng) {
  std::vector<PromptRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % shape.classes;
    std::vector<std::uint32_t> zg(n_g), zx(t_local);
    for (std::size_t j = 0; j < n_g; ++j) zg[j] = static_cast<std::uint32_t>(1 + (c * 5 + j) % shape.codebook_size);
    for (std::size_t j = 0; j < t_local; ++j) {
      zx[j] = static_cast<std::uint32_t>(1 + (c * 3 + j * (c + 1)) % shape.codebook_size);
      if (rng.uniform() < 0.1) zx[j] = static_cast<std::uint32_t>(1 + rng.below(shape.codebook_size));
    }
    out.push_back({{shape.class_id(c)}, compressor::assemble_sequence(zg, zx, shape.codebook_size)});
  }
  return out;
}

}  // namespace

TEST(Vocabulary, CoversEverySequenceId) {
  SequenceModelShape shape;
  EXPECT_EQ(shape.vocab(), 64u + 3 + 4 + 1);
  EXPECT_EQ(compressor::eos_id(64), 67u);
  EXPECT_EQ(shape.class_id(0), 68u);
  EXPECT_EQ(shape.ask_id(), 72u);
}

TEST(GenerationLoss, StepZeroIsLogVocab) {
  const auto shape = tiny_shape();
  Rng rng(1);
  const auto ps = make_params(shape, rng);
  ParamBinding b(ps);
  const auto seq = random_valid_sequence(rng, shape.codebook_size, 2, 5);
  const double loss = generation_loss({{shape.class_id(1)}, seq}, b, shape).item();
  EXPECT_NEAR(loss, std::log(static_cast<double>(shape.vocab())), 1e-12);
}

TEST(GenerationLoss, GradientsMatchFiniteDifferences) {
  const auto shape = tiny_shape();
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto ps = make_params(shape, rng);
    for (auto& [name, e] : ps.entries_mutable())
      for (auto& v : *e.value) v += 0.1 * rng.normal();
    // An O(1) head keeps every gradient entry well above finite-difference noise.
    for (auto& v : *ps.entry("lm.head.weight").value) v = rng.normal();
    const PromptRecord rec{{shape.class_id(trial % 2)}, random_valid_sequence(rng, shape.codebook_size, 1 + rng.below(2), 1 + rng.below(4))};
    const auto rep = check_param_grads(ps, [&](ParamBinding& b) { return generation_loss(rec, b, shape); });
    EXPECT_LT(rep.worst, 1e-5) << "trial " << trial << " worst " << rep.worst_name;
  }
}

TEST(UnderstandingLoss, GradientsMatchFiniteDifferences) {
  const auto shape = tiny_shape();
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto ps = make_params(shape, rng);
    for (auto& [name, e] : ps.entries_mutable())
      for (auto& v : *e.value) v += 0.1 * rng.normal();
    // An O(1) head keeps every gradient entry well above finite-difference noise.
    for (auto& v : *ps.entry("lm.head.weight").value) v = rng.normal();
    const std::size_t n_g = trial % 3;
    ProbeRecord probe;
    if (n_g > 0) probe.globals = {n_g, random_tensor({n_g, 4}, rng, 0.5)};
    probe.compressed = random_tensor({1 + rng.below(4), 4}, rng, 0.5);
    probe.label = trial % shape.classes;
    const auto rep = check_param_grads(ps, [&](ParamBinding& b) { return understanding_loss(probe, b, shape); });
    EXPECT_LT(rep.worst, 1e-5) << "trial " << trial << " worst " << rep.worst_name;
  }
}

TEST(Training, MemorisesSingleRecord) {
  auto shape = tiny_shape();
  shape.width = 16;
  Rng rng(4);
  auto ps = make_params(shape, rng);
  const std::vector<PromptRecord> data{{{shape.class_id(0)}, random_valid_sequence(rng, shape.codebook_size, 2, 6)}};
  TrainOptions opt;
  opt.steps = 300;
  opt.batch = 1;
  opt.lr = 1e-2;
  const auto curve = train_sequence_model(data, {}, ps, shape, opt);
  EXPECT_NEAR(curve.front().total, std::log(static_cast<double>(shape.vocab())), 1e-9);
  EXPECT_LT(curve.back().total, 0.1);
}

TEST(Training, PatternedSetHalvesLoss) {
  SequenceModelShape shape = tiny_shape();
  shape.codebook_size = 16;
  shape.classes = 4;
  shape.width = 32;
  shape.layers = 2;
  shape.max_positions = 24;
  Rng rng(5);
  auto ps = make_params(shape, rng);
  const auto data = patterned_records(shape, 200, 2, 8, rng);
  TrainOptions opt;
  opt.steps = 400;
  opt.batch = 8;
  const auto curve = train_sequence_model(data, {}, ps, shape, opt);
  EXPECT_LT(curve.back().total, 0.5 * curve.front().total);
}

TEST(Training, DeterministicGivenSeed) {
  const auto shape = tiny_shape();
  Rng data_rng(6);
  const auto data = patterned_records(shape, 10, 1, 3, data_rng);
  auto run = [&] {
    Rng rng(7);
    auto ps = make_params(shape, rng);
    TrainOptions opt;
    opt.steps = 20;
    opt.batch = 4;
    opt.seed = 11;
    const auto curve = train_sequence_model(data, {}, ps, shape, opt);
    std::vector<double> out;
    for (const auto& p : curve) out.push_back(p.total);
    ParamBinding b(ps);
    const auto seq = generate_sequence(data[0].prompt, b, shape, 1, 3, 0.0, 0);
    return std::make_pair(out, compressor::to_ids(seq));
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, FrozenTokenizerTensorsUnchanged) {
  const auto shape = tiny_shape();
  Rng rng(8);
  auto ps = make_params(shape, rng);
  const auto before = ps.tensor(compressor::kSpecialsName).to_vector();
  ps.set_trainable("compressor.", false);
  const auto data = patterned_records(shape, 4, 1, 3, rng);
  TrainOptions opt;
  opt.steps = 5;
  opt.batch = 2;
  EXPECT_NO_THROW(train_sequence_model(data, {}, ps, shape, opt));
  EXPECT_EQ(ps.tensor(compressor::kSpecialsName).to_vector(), before);

}

TEST(Generate, LengthGrammarAndDeterminism) {
  SequenceModelShape shape;
  shape.max_positions = 80;
  Rng rng(9);
  const auto ps = make_params(shape, rng);
  ParamBinding b(ps);
  const std::uint32_t prompt = shape.class_id(2);
  const auto seq = generate_sequence(std::span(&prompt, 1), b, shape, 4, 64, 0.0, 0);
  EXPECT_EQ(seq.size(), 71u);
  const auto split = compressor::parse_sequence(seq);
  EXPECT_EQ(split.globals.size(), 4u);
  EXPECT_EQ(split.locals.size(), 64u);
  EXPECT_EQ(compressor::to_ids(generate_sequence(std::span(&prompt, 1), b, shape, 4, 64, 0.0, 99)),
            compressor::to_ids(seq));
}

TEST(Generate, SampledSequencesAlwaysParse) {
  auto shape = tiny_shape();
  shape.max_positions = 16;
  Rng rng(10);
  auto ps = make_params(shape, rng);
  for (auto& v : *ps.entry("lm.head.weight").value) v = rng.normal();
  ParamBinding b(ps);
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const std::uint32_t prompt = shape.class_id(i % shape.classes);
    const auto seq = generate_sequence(std::span(&prompt, 1), b, shape, 2, 5, 1.0, i);
    ASSERT_NO_THROW(compressor::parse_sequence(seq)) << compressor::to_text(seq);
  }
}

TEST(Understanding, ZeroProjectionIgnoresImage) {
  const auto shape = tiny_shape();
  Rng rng(11);
  auto ps = make_params(shape, rng);
  for (auto& v : *ps.entry("lm.head.weight").value) v = rng.normal();
  for (auto& v : *ps.entry("lm.vis_proj").value) v = 0.0;
  ParamBinding b(ps);
  const std::uint32_t ask = shape.ask_id();
  const globals::GlobalTokens g1{2, random_tensor({2, 4}, rng)}, g2{2, random_tensor({2, 4}, rng)};
  const auto a = understanding_forward(g1, random_tensor({4, 4}, rng), std::span(&ask, 1), b, shape);
  const auto c = understanding_forward(g2, random_tensor({4, 4}, rng), std::span(&ask, 1), b, shape);
  EXPECT_EQ(a.dims(), (Shape{1, shape.classes}));
  EXPECT_EQ(a.to_vector(), c.to_vector());
}

TEST(Understanding, SequenceLengthAndWidthChecked) {
  auto shape = tiny_shape();
  Rng rng(12);
  const auto ps = make_params(shape, rng);
  ParamBinding b(ps);
  const std::uint32_t ask = shape.ask_id();
  const globals::GlobalTokens g{2, random_tensor({2, 4}, rng)};
  // 1 prompt + (2 + 6 + 3) visual rows = 12 positions: fits exactly.
  EXPECT_NO_THROW(understanding_forward(g, random_tensor({6, 4}, rng), std::span(&ask, 1), b, shape));
  EXPECT_THROW(understanding_forward(g, random_tensor({7, 4}, rng), std::span(&ask, 1), b, shape), ShapeError);
  EXPECT_THROW(understanding_forward(g, random_tensor({2, 3}, rng), std::span(&ask, 1), b, shape), ShapeError);
}

TEST(Understanding, ProbeLearnsAboveChance) {
  auto shape = tiny_shape();
  shape.width = 16;
  shape.classes = 4;
  Rng rng(13);
  auto ps = make_params(shape, rng);
  std::vector<ProbeRecord> probes;
  for (std::size_t i = 0; i < 40; ++i) {
    ProbeRecord p;
    p.label = i % 4;
    p.globals = {1, random_tensor({1, 4}, rng, 0.1)};
    p.compressed = random_tensor({2, 4}, rng, 0.1);
    auto buf = p.compressed.mutable_data();
    buf[p.label] += 1.0;
    probes.push_back(p);
  }
  const auto data = patterned_records(shape, 4, 1, 2, rng);
  TrainOptions opt;
  opt.steps = 300;
  opt.batch = 8;
  opt.lr = 3e-3;
  train_sequence_model(data, probes, ps, shape, opt);
  ParamBinding b(ps);
  EXPECT_GT(probe_accuracy(probes, b, shape), 0.25);
}
