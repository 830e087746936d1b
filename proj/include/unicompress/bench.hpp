#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "unicompress/pipeline.hpp"

// Cost model, wall-clock timing and the ablation sweeps.
namespace unicompress::bench {

// FLOPs are multiply-accumulates x2; normalization and softmax are ignored.
inline constexpr const char* kFlopNote = "flops = 2 x multiply-accumulates; normalization and softmax ignored";

// One forward pass over n positions: per layer 2n^2 d (scores and mixing)
// + 4nd^2 (projections) + 8nd^2 (feed-forward) multiply-accumulates.
std::uint64_t flops_forward(std::uint64_t n, std::uint64_t d, std::uint64_t layers);
// Sum of forward costs over prefixes 1..n (generation without a cache).
std::uint64_t flops_autoregressive(std::uint64_t n, std::uint64_t d, std::uint64_t layers);
// The 2n^2 d term alone, summed over prefixes.
std::uint64_t attention_flops_autoregressive(std::uint64_t n, std::uint64_t d, std::uint64_t layers);

struct Timing {
  std::vector<double> seconds;  // one entry per repeat
  double mean() const;
  double stddev() const;  // sample standard deviation
};

// Generation cost of one image for a configuration: sequence-model steps
// (the visual sequence length) and decompressor steps.
struct GenerationSteps {
  std::size_t sequence_model = 0;
  std::size_t decompressor = 0;
};

enum class GenerationPath {
  kCompact,  // sequence model -> dequantize -> decompressor -> decoder
  kDense,    // sequence model emits the full grid -> dequantize -> decoder
};

GenerationSteps generation_steps(const pipeline::RunConfig& cfg, GenerationPath path);

// End-to-end generation of one image from a class prompt at temperature 0.
basetok::ImageTensor generate_image(const ParamSet& params, const pipeline::RunConfig& cfg, GenerationPath path,
                                    std::size_t label, std::uint64_t seed = 0);

// Wall-clock of generating `count` images, `repeats` times.
Timing time_generation(const ParamSet& params, const pipeline::RunConfig& cfg, GenerationPath path,
                       std::size_t count, std::size_t repeats);

struct BenchReport {
  std::string config_id;
  std::size_t dense_tokens = 0;
  std::size_t compact_tokens = 0;  // n_g + T~ + 3
  std::uint64_t flops_generation = 0;
  Timing timing;
  double recon_mse = 0.0;
  double probe_accuracy = 0.0;
  double lm_loss = 0.0;
  std::string status = "ok";  // or "skipped: <reason>"
  bool skipped() const { return status != "ok"; }
};

struct ArmOptions {
  bool train_sequence_model = true;
  bool time_generation = true;
  std::size_t timing_images = 1;
  std::size_t timing_repeats = 5;
  // Trained checkpoints are cached in <cache_dir>/<config_id>/ when set.
  std::filesystem::path cache_dir;
};

// Trains (or loads) one configuration and measures it on the held-out set.
BenchReport run_arm(const pipeline::RunConfig& cfg, const std::string& config_id, const ArmOptions& options);

std::vector<BenchReport> sweep_keep_ratio(const pipeline::RunConfig& base, std::span<const std::size_t> strides,
                                          const ArmOptions& options);
std::vector<BenchReport> sweep_global_tokens(const pipeline::RunConfig& base, std::span<const std::size_t> counts,
                                             const ArmOptions& options);
std::vector<BenchReport> ablate_global_type(const pipeline::RunConfig& base,
                                            std::span<const globals::GlobalKind> kinds, const ArmOptions& options);
std::vector<BenchReport> ablate_compressor(const pipeline::RunConfig& base,
                                           std::span<const compressor::PoolKind> kinds, const ArmOptions& options);

// Compact arm (cfg as given) against the dense baseline: the same frozen
// tokenizer with a sequence model trained on full grids (stride 1, no
// globals) whose output goes straight to the base decoder.
struct EfficiencyReport {
  BenchReport compact;
  BenchReport dense;
  GenerationSteps compact_steps;
  GenerationSteps dense_steps;
  double flop_ratio = 0.0;  // compact / dense
};

EfficiencyReport compare_generation(const pipeline::RunConfig& cfg, const ParamSet& stage_one, std::size_t count,
                                    std::size_t repeats);

inline constexpr std::size_t kDefaultStrides[] = {1, 2, 4, 8};
inline constexpr std::size_t kDefaultGlobalCounts[] = {0, 2, 4, 8, 16};

// Header line, then one row per report; skipped rows keep their status.
void write_csv(const std::filesystem::path& path, std::span<const BenchReport> reports);
std::string csv_header();
std::string csv_row(const BenchReport& r);

}  // namespace unicompress::bench
