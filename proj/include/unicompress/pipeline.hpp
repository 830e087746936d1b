#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "unicompress/basetok.hpp"
#include "unicompress/compressor.hpp"
#include "unicompress/decompressor.hpp"
#include "unicompress/globals.hpp"
#include "unicompress/lmharness.hpp"
#include "unicompress/params.hpp"

// Two-stage training, the synthetic dataset, run configuration and the
// checkpoint file format.
namespace unicompress::pipeline {

struct RunConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t codebook_size = 64;
  std::size_t stride = 2;
  std::size_t n_g = 4;
  std::size_t heads = 2;
  std::size_t decoder_layers = 2;
  globals::GlobalKind global_kind = globals::GlobalKind::kMeta;
  compressor::PoolKind pool_kind = compressor::PoolKind::kAvg;
  double lambda_cb = 0.25;
  double beta = 0.25;
  double pixel_weight = 1.0;
  // Gaussian noise added to the teacher-forced prefix, relative to the RMS of
  // the dense tokens. Reduces train/rollout mismatch of the decompressor.
  double prefix_noise = 2.0;
  // Probability that a prefix row is replaced by the decoder's own
  // (detached) teacher-forced prediction.
  double self_feed = 0.0;
  // Every this many steps, codes no quantized row used during the window are
  // re-seeded with current pre-quantization vectors. 0 disables.
  std::size_t codebook_restart = 200;
  double lr = 1e-3;
  std::size_t batch = 16;
  std::size_t stage_one_steps = 3000;
  std::size_t stage_two_steps = 2000;
  std::size_t dataset_size = 200;
  std::size_t heldout_size = 50;
  std::size_t classes = 4;
  std::size_t lm_width = 64;
  std::size_t lm_layers = 2;
  double understanding_weight = 1.0;
  bool freeze_base = false;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "run";

  // Throws basetok::ConfigError naming the offending key.
  void validate() const;

  basetok::TokenizerShape tokenizer_shape() const;
  globals::ExtractorShape extractor_shape() const;
  decompressor::DecoderShape decoder_shape() const;
  lmharness::SequenceModelShape sequence_model_shape() const;
  std::size_t dense_tokens() const { return tokenizer_shape().tokens(); }
  std::size_t compressed_tokens() const;
  // n_g + compressed + 3 specials
  std::size_t sequence_length() const { return n_g + compressed_tokens() + 3; }
};

// `key = value` lines, '#' starts a comment. Unknown keys are errors.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
std::string format_config(const RunConfig& cfg);

struct SyntheticSample {
  basetok::ImageTensor image;
  std::size_t label = 0;
};

// Class c = index % classes: 0 disc, 1 square, 2 horizontal stripes,
// 3 vertical stripes (further classes cycle the four with inverted contrast).
// Each sample depends only on (seed, index).
SyntheticSample make_sample(std::uint64_t seed, std::size_t index, std::size_t h, std::size_t w,
                            std::size_t channels, std::size_t classes);
std::vector<SyntheticSample> make_dataset(std::uint64_t seed, std::size_t count, std::size_t h, std::size_t w,
                                          std::size_t channels, std::size_t classes, std::size_t first_index = 0);
std::vector<SyntheticSample> training_set(const RunConfig& cfg);
// Indices following the training set.
std::vector<SyntheticSample> heldout_set(const RunConfig& cfg);

// Checkpoint file: "UCKP", u32 version, u32 count, then per tensor u32 name
// length, name bytes, u8 dtype (0 = f32), u8 rank, u32 dims, f32 payload.
// Everything little-endian, tensors in name order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class MissingTensorsError : public std::runtime_error {
 public:
  explicit MissingTensorsError(std::vector<std::string> names);
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
};

std::vector<std::uint8_t> serialize_checkpoint(const ParamSet& params);
ParamSet deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_checkpoint(const std::filesystem::path& path);
// Copies every tensor of `into` from `loaded`; throws MissingTensorsError
// listing all names absent from `loaded` and ShapeError on a dims mismatch.
void restore_params(ParamSet& into, const ParamSet& loaded);
// Checkpoint bytes of the tensors whose names start with one of `prefixes`.
std::vector<std::uint8_t> checkpoint_bytes(const ParamSet& params, std::span<const std::string_view> prefixes);

inline constexpr std::string_view kTokenizerPrefixes[] = {"basetok.", "compressor.", "decomp.", "globals."};

// Exclusive advisory lock on <dir>/.lock held for the object's lifetime.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

class LockError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Tokenizer stack tensors (basetok, globals, compressor, decompressor), each
// module initialized from its own stream of cfg.seed.
ParamSet init_tokenizer_params(const RunConfig& cfg);
void add_sequence_model_params(ParamSet& params, const RunConfig& cfg);

// Everything stage one computes for one image.
struct StackForward {
  basetok::TokenGrid dense;
  globals::GlobalTokens globals;       // continuous G
  compressor::CompressedGrid compressed;  // continuous pooled grid
};
StackForward run_stack(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg);

struct StageOneLoss {
  double total = 0.0;
  double reg = 0.0;
  double cb = 0.0;
  double recon = 0.0;  // reg + lambda_cb * cb
  double pixel = 0.0;
};

// Stage-one objective for one image: L_recon on the quantized context plus
// the pixel loss of the base decoder and the VQ terms of every quantized
// stream.
// `noise_rng` drives the prefix noise; without it the prefix is clean.
Tensor stage_one_loss(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg,
                      StageOneLoss* report, Rng* noise_rng = nullptr);

struct StageOneResult {
  ParamSet params;
  std::vector<StageOneLoss> curve;
};

// Called after every step with the step index and the step's mean loss.
using StepObserver = std::function<void(std::size_t, const StageOneLoss&)>;

// In-memory stage one. On a non-finite loss, throws DivergenceError after
// copying the parameters from before that step into `last_good` (if given).
StageOneResult stage_one_train(const RunConfig& cfg, const StepObserver& observer = {},
                               ParamSet* last_good = nullptr);

// The base tokenizer alone (pixel + VQ loss), same data order and budget.
StageOneResult train_base_autoencoder(const RunConfig& cfg);

struct StageTwoResult {
  ParamSet params;
  std::vector<lmharness::LossPoint> curve;
};

std::vector<lmharness::PromptRecord> build_prompt_records(std::span<const SyntheticSample> samples,
                                                          ParamBinding& params, const RunConfig& cfg);
std::vector<lmharness::ProbeRecord> build_probe_records(std::span<const SyntheticSample> samples,
                                                        ParamBinding& params, const RunConfig& cfg);

// Adds the sequence model to a stage-one parameter set, freezes every
// tokenizer tensor and trains on the frozen stack's compact sequences.
StageTwoResult stage_two_train(const RunConfig& cfg, const ParamSet& stage_one);

// Discrete path: image -> <BOS> Zg <SEP> Zx <EOS>.
compressor::IndexSequence compress_image(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg);
// compress -> dequantize -> decompress -> decode.
basetok::ImageTensor reconstruct_image(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg);
// Same compact input, nearest-neighbour expansion instead of the decompressor.
basetok::ImageTensor reconstruct_nearest(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg);
// Base tokenizer alone: encode -> quantize -> decode.
basetok::ImageTensor reconstruct_base(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg);

using Reconstructor =
    std::function<basetok::ImageTensor(const basetok::ImageTensor&, ParamBinding&, const RunConfig&)>;
double mean_pixel_mse(std::span<const SyntheticSample> samples, const ParamSet& params, const RunConfig& cfg,
                      const Reconstructor& fn);

// Stage-one / stage-two runs with on-disk artifacts under cfg.out_dir:
// stage1.ckpt + stage1_loss.csv, stage2.ckpt + stage2_loss.csv.
ParamSet run_stage_one(const RunConfig& cfg);
ParamSet run_stage_two(const RunConfig& cfg, const std::filesystem::path& stage_one_checkpoint);

void write_stage_one_csv(const std::filesystem::path& path, std::span<const StageOneLoss> curve);
void write_stage_two_csv(const std::filesystem::path& path, std::span<const lmharness::LossPoint> curve);

}  // namespace unicompress::pipeline
