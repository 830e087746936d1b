#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "unicompress/compressor.hpp"
#include "unicompress/globals.hpp"
#include "unicompress/params.hpp"

// A small causal transformer standing in for the language backbone. It reads
// and writes the compact visual sequence through the discrete vocabulary
//   1..K codes | K+1..K+3 <BOS> <SEP> <EOS> | class prompts | <ASK>
namespace unicompress::lmharness {

struct SequenceModelShape {
  std::size_t codebook_size = 64;
  std::size_t classes = 4;
  std::size_t width = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff_mult = 4;
  std::size_t max_positions = 96;
  std::size_t visual_dim = 32;  // tokenizer embed_dim, projected to width

  std::size_t vocab() const { return codebook_size + 3 + classes + 1; }
  std::uint32_t class_id(std::size_t c) const { return static_cast<std::uint32_t>(codebook_size + 4 + c); }
  std::uint32_t ask_id() const { return static_cast<std::uint32_t>(codebook_size + 4 + classes); }
};

// "lm.*" tensors. The output head starts at zero so step-0 logits are uniform.
void init_params(ParamSet& ps, const SequenceModelShape& shape, Rng& rng);

struct PromptRecord {
  std::vector<std::uint32_t> prompt;  // class-conditioning ids
  compressor::IndexSequence target;
};

// Continuous-input sample for the understanding probe.
struct ProbeRecord {
  globals::GlobalTokens globals;
  Tensor compressed;  // t~ x d
  std::size_t label = 0;
};

// Logits (n x vocab) for an id sequence. Special ids embed as the projected
// compressor special embeddings, shared with the understanding path.
Tensor forward_ids(std::span<const std::uint32_t> ids, ParamBinding& params, const SequenceModelShape& shape);

// Next-token cross-entropy on the code positions of `record.target`.
Tensor generation_loss(const PromptRecord& record, ParamBinding& params, const SequenceModelShape& shape);

// [prompt, <BOS>, proj(G), <SEP>, proj(Xc), <EOS>] -> logits over the class
// answer ids (1 x classes), read at the <EOS> position.
Tensor understanding_forward(const globals::GlobalTokens& g, const Tensor& compressed,
                             std::span<const std::uint32_t> prompt, ParamBinding& params,
                             const SequenceModelShape& shape);
Tensor understanding_loss(const ProbeRecord& record, ParamBinding& params, const SequenceModelShape& shape);

// Specials are placed at their fixed positions; only code ids are sampled.
// temperature == 0 is greedy (lowest id on ties).
compressor::IndexSequence generate_sequence(std::span<const std::uint32_t> prompt, ParamBinding& params,
                                            const SequenceModelShape& shape, std::size_t n_g, std::size_t t_local,
                                            double temperature, std::uint64_t seed);

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  // Weight of the understanding probe loss; 0 trains generation only.
  double understanding_weight = 1.0;
};

struct LossPoint {
  double total = 0.0;
  double generation = 0.0;
  double understanding = 0.0;
};

// Trains every trainable "lm." tensor. Throws if a frozen tensor would
// receive a gradient.
std::vector<LossPoint> train_sequence_model(std::span<const PromptRecord> dataset, std::span<const ProbeRecord> probes,
                                            ParamSet& params, const SequenceModelShape& shape,
                                            const TrainOptions& options);

// Fraction of probes whose argmax answer equals the label.
double probe_accuracy(std::span<const ProbeRecord> probes, ParamBinding& params, const SequenceModelShape& shape);

}  // namespace unicompress::lmharness
