#include "unicompress/lmharness.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "unicompress/layers.hpp"
#include "unicompress/ops.hpp"

namespace unicompress::lmharness {

namespace {

std::string layer_prefix(std::size_t i) { return "lm.layer" + std::to_string(i); }

// Full V x width embedding table: codes, projected specials, prompt ids.
Tensor embedding_table(ParamBinding& params) {
  const Tensor specials = matmul(params[compressor::kSpecialsName], params["lm.vis_proj"]);
  return concat_rows(std::vector<Tensor>{params["lm.embed.codes"], specials, params["lm.embed.prompts"]});
}

Tensor run_blocks(const Tensor& embedded, ParamBinding& params, const SequenceModelShape& shape) {
  const std::size_t n = embedded.rows();
  if (n > shape.max_positions) {
    throw ShapeError("sequence of " + std::to_string(n) + " exceeds " + std::to_string(shape.max_positions) +
                     " positions");
  }
  Tensor h = add(embedded, slice_rows(params["lm.pos"], 0, n));
  for (std::size_t l = 0; l < shape.layers; ++l) {
    const std::string p = layer_prefix(l);
    const Tensor a = apply(LayerNormWeights::bind(params, p + ".ln1"), h);
    h = add(h, multi_head_attention(a, a, AttentionWeights::bind(params, p + ".attn", shape.heads), true));
    const Tensor f = apply(LayerNormWeights::bind(params, p + ".ln2"), h);
    h = add(h, apply(FeedForwardWeights::bind(params, p + ".ff"), f));
  }
  const Tensor out = apply(LayerNormWeights::bind(params, "lm.ln_f"), h);
  return affine(out, params["lm.head.weight"], params["lm.head.bias"]);
}

std::vector<std::size_t> table_rows(std::span<const std::uint32_t> ids, const SequenceModelShape& shape) {
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 1 || ids[i] > shape.vocab()) {
      throw ShapeError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary 1.." + std::to_string(shape.vocab()));
    }
    rows[i] = ids[i] - 1;
  }
  return rows;
}

}  // namespace

void init_params(ParamSet& ps, const SequenceModelShape& shape, Rng& rng) {
  const std::size_t w = shape.width;
  if (shape.heads == 0 || w % shape.heads != 0) throw basetok::ConfigError("lm heads must divide width");
  ps.add_normal("lm.embed.codes", {shape.codebook_size, w}, 0.1, rng);
  ps.add_normal("lm.embed.prompts", {shape.classes + 1, w}, 0.1, rng);
  ps.add_constant("lm.head.bias", {shape.vocab()}, 0.0);
  ps.add_constant("lm.head.weight", {w, shape.vocab()}, 0.0);
  for (std::size_t l = 0; l < shape.layers; ++l) {
    const std::string p = layer_prefix(l);
    add_attention_params(ps, p + ".attn", w, rng);
    add_feed_forward_params(ps, p + ".ff", w, shape.ff_mult * w, rng);
    add_layer_norm_params(ps, p + ".ln1", w);
    add_layer_norm_params(ps, p + ".ln2", w);
  }
  add_layer_norm_params(ps, "lm.ln_f", w);
  ps.add_normal("lm.pos", {shape.max_positions, w}, 0.02, rng);
  ps.add_normal("lm.vis_proj", {shape.visual_dim, w}, 1.0 / std::sqrt(static_cast<double>(shape.visual_dim)), rng);
}

Tensor forward_ids(std::span<const std::uint32_t> ids, ParamBinding& params, const SequenceModelShape& shape) {
  const auto rows = table_rows(ids, shape);
  return run_blocks(gather_rows(embedding_table(params), rows), params, shape);
}

Tensor generation_loss(const PromptRecord& record, ParamBinding& params, const SequenceModelShape& shape) {
  std::vector<std::uint32_t> ids = record.prompt;
  const auto body = compressor::to_ids(record.target);
  ids.insert(ids.end(), body.begin(), body.end());
  std::vector<std::size_t> rows, targets;
  for (std::size_t p = 1; p < ids.size(); ++p) {
    if (p < record.prompt.size()) continue;
    if (ids[p] >= 1 && ids[p] <= shape.codebook_size) {
      rows.push_back(p - 1);
      targets.push_back(ids[p] - 1);
    }
  }
  return cross_entropy_rows(forward_ids(ids, params, shape), rows, targets);
}

Tensor understanding_forward(const globals::GlobalTokens& g, const Tensor& compressed,
                             std::span<const std::uint32_t> prompt, ParamBinding& params,
                             const SequenceModelShape& shape) {
  if (compressed.cols() != shape.visual_dim) {
    throw ShapeError("understanding input width " + std::to_string(compressed.cols()) + ", projection expects " +
                     std::to_string(shape.visual_dim));
  }
  compressor::CompressedGrid xc{1, compressed.rows(), 1, compressed};
  const Tensor visual = compressor::embed_sequence_for_understanding(g, xc, params[compressor::kSpecialsName]);
  const Tensor projected = matmul(visual, params["lm.vis_proj"]);
  Tensor embedded = projected;
  if (!prompt.empty()) {
    const auto rows = table_rows(prompt, shape);
    embedded = concat_rows(std::vector<Tensor>{gather_rows(embedding_table(params), rows), projected});
  }
  const Tensor logits = run_blocks(embedded, params, shape);
  const Tensor last = slice_rows(logits, logits.rows() - 1, 1);
  return slice_cols(last, shape.class_id(0) - 1, shape.classes);
}

Tensor understanding_loss(const ProbeRecord& record, ParamBinding& params, const SequenceModelShape& shape) {
  const std::uint32_t ask = shape.ask_id();
  const Tensor logits = understanding_forward(record.globals, record.compressed, std::span(&ask, 1), params, shape);
  const std::size_t row = 0;
  return cross_entropy_rows(logits, std::span(&row, 1), std::span(&record.label, 1));
}

compressor::IndexSequence generate_sequence(std::span<const std::uint32_t> prompt, ParamBinding& params,
                                            const SequenceModelShape& shape, std::size_t n_g, std::size_t t_local,
                                            double temperature, std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(seed);
  const std::size_t k = shape.codebook_size;
  std::vector<std::uint32_t> ids(prompt.begin(), prompt.end());
  const std::size_t body_start = ids.size();
  ids.push_back(compressor::bos_id(k));

  auto sample_code = [&] {
    const Tensor logits = forward_ids(ids, params, shape);
    const auto last = logits.row(logits.rows() - 1);
    std::size_t pick = 0;
    if (temperature <= 0.0) {
      for (std::size_t j = 1; j < k; ++j)
        if (last[j] > last[pick]) pick = j;
    } else {
      double mx = last[0];
      for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, last[j]);
      std::vector<double> w(k);
      double total = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        w[j] = std::exp((last[j] - mx) / temperature);
        total += w[j];
      }
      double u = rng.uniform() * total;
      pick = k - 1;
      for (std::size_t j = 0; j < k; ++j) {
        if (u < w[j]) {
          pick = j;
          break;
        }
        u -= w[j];
      }
    }
    ids.push_back(static_cast<std::uint32_t>(pick + 1));
  };

  for (std::size_t i = 0; i < n_g; ++i) sample_code();
  ids.push_back(compressor::sep_id(k));
  for (std::size_t i = 0; i < t_local; ++i) sample_code();
  ids.push_back(compressor::eos_id(k));
  return compressor::from_ids(std::span(ids).subspan(body_start), n_g, t_local, k);
}

std::vector<LossPoint> train_sequence_model(std::span<const PromptRecord> dataset, std::span<const ProbeRecord> probes,
                                            ParamSet& params, const SequenceModelShape& shape,
                                            const TrainOptions& options) {
  if (dataset.empty()) throw std::invalid_argument("train_sequence_model: empty dataset");
  Rng rng(options.seed);
  Adam adam(AdamConfig{options.lr});
  std::vector<LossPoint> curve;
  curve.reserve(options.steps);
  const bool use_probes = !probes.empty() && options.understanding_weight > 0.0;
  const std::size_t batch = std::max<std::size_t>(1, options.batch);
  for (std::size_t step = 0; step < options.steps; ++step) {
    ParamBinding binding(params);
    Tape tape;
    LossPoint point;
    Tensor total;
    auto accumulate = [&total](const Tensor& t) { total = total.defined() ? add(total, t) : t; };
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& rec = dataset[rng.below(dataset.size())];
      const Tensor gen = generation_loss(rec, binding, shape);
      point.generation += gen.item() / static_cast<double>(batch);
      accumulate(scale(gen, 1.0 / static_cast<double>(batch)));
      if (use_probes) {
        const auto& probe = probes[rng.below(probes.size())];
        const Tensor und = understanding_loss(probe, binding, shape);
        point.understanding += und.item() / static_cast<double>(batch);
        accumulate(scale(und, options.understanding_weight / static_cast<double>(batch)));
      }
    }
    point.total = total.item();
    if (!std::isfinite(point.total)) throw std::runtime_error("sequence model loss diverged at step " + std::to_string(step));
    tape.backward(total);
    GradMap grads;
    binding.accumulate_into(grads);
    adam.step(params, grads);
    curve.push_back(point);
  }
  return curve;
}

double probe_accuracy(std::span<const ProbeRecord> probes, ParamBinding& params, const SequenceModelShape& shape) {
  if (probes.empty()) return 0.0;
  NoGradGuard no_grad;
  std::size_t correct = 0;
  const std::uint32_t ask = shape.ask_id();
  for (const auto& p : probes) {
    const Tensor logits = understanding_forward(p.globals, p.compressed, std::span(&ask, 1), params, shape);
    const auto row = logits.row(0);
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
      if (row[j] > row[best]) best = j;
    if (best == p.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(probes.size());
}

}  // namespace unicompress::lmharness
