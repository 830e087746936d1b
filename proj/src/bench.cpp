#include "unicompress/bench.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "unicompress/ops.hpp"

namespace unicompress::bench {

namespace {

std::uint64_t sum_to(std::uint64_t n) { return n * (n + 1) / 2; }
std::uint64_t sum_sq_to(std::uint64_t n) { return n * (n + 1) * (2 * n + 1) / 6; }

void require_length(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("cost model: sequence length must be at least 1");
}

// Decoder steps 1..t with cross-attention to m context rows.
std::uint64_t flops_decompressor(std::uint64_t t, std::uint64_t m, std::uint64_t d, std::uint64_t layers) {
  const std::uint64_t cross = 2 * layers * (2 * d * d * sum_to(t) + 2 * m * d * d * t + 2 * m * d * sum_to(t));
  return flops_autoregressive(t, d, layers) + cross;
}

std::uint64_t generation_flops(const pipeline::RunConfig& cfg, GenerationPath path) {
  const auto steps = generation_steps(cfg, path);
  // +1 for the class prompt that precedes the visual sequence
  std::uint64_t total = flops_autoregressive(steps.sequence_model + 1, cfg.lm_width, cfg.lm_layers);
  if (steps.decompressor > 0) {
    total += flops_decompressor(steps.decompressor, cfg.decoder_shape().context_len(), cfg.embed_dim,
                                cfg.decoder_layers);
  }
  return total;
}

pipeline::RunConfig arm_config(const pipeline::RunConfig& base, const std::string& id) {
  pipeline::RunConfig cfg = base;
  cfg.out_dir = base.out_dir / id;
  return cfg;
}

}  // namespace

std::uint64_t flops_forward(std::uint64_t n, std::uint64_t d, std::uint64_t layers) {
  require_length(n);
  return 2 * layers * (2 * n * n * d + 12 * n * d * d);
}

std::uint64_t flops_autoregressive(std::uint64_t n, std::uint64_t d, std::uint64_t layers) {
  require_length(n);
  return 2 * layers * (2 * d * sum_sq_to(n) + 12 * d * d * sum_to(n));
}

std::uint64_t attention_flops_autoregressive(std::uint64_t n, std::uint64_t d, std::uint64_t layers) {
  require_length(n);
  return 2 * layers * 2 * d * sum_sq_to(n);
}

double Timing::mean() const {
  if (seconds.empty()) return 0.0;
  return std::accumulate(seconds.begin(), seconds.end(), 0.0) / static_cast<double>(seconds.size());
}

double Timing::stddev() const {
  if (seconds.size() < 2) return 0.0;
  const double m = mean();
  double sq = 0.0;
  for (double s : seconds) sq += (s - m) * (s - m);
  return std::sqrt(sq / static_cast<double>(seconds.size() - 1));
}

GenerationSteps generation_steps(const pipeline::RunConfig& cfg, GenerationPath path) {
  if (path == GenerationPath::kDense) return {cfg.dense_tokens() + 3, 0};
  return {cfg.sequence_length(), cfg.dense_tokens()};
}

basetok::ImageTensor generate_image(const ParamSet& params, const pipeline::RunConfig& cfg, GenerationPath path,
                                    std::size_t label, std::uint64_t seed) {
  const auto lm = cfg.sequence_model_shape();
  const auto tok = cfg.tokenizer_shape();
  ParamBinding binding(params);
  const std::uint32_t prompt = lm.class_id(label % cfg.classes);
  if (path == GenerationPath::kDense) {
    if (cfg.stride != 1 || cfg.n_g != 0) {
      throw basetok::ConfigError("dense generation needs stride = 1 and n_g = 0");
    }
    const auto seq =
        lmharness::generate_sequence(std::span(&prompt, 1), binding, lm, 0, cfg.dense_tokens(), 0.0, seed);
    NoGradGuard no_grad;
    const auto split = compressor::parse_sequence(seq);
    const Tensor dense = basetok::dequantize(split.locals, binding[basetok::kCodebookName]);
    return basetok::decode_tokens(basetok::TokenGrid{tok.grid_h(), tok.grid_w(), dense}, binding, tok);
  }
  const auto seq =
      lmharness::generate_sequence(std::span(&prompt, 1), binding, lm, cfg.n_g, cfg.compressed_tokens(), 0.0, seed);
  return decompressor::generate_image_from_indices(seq, binding, cfg.decoder_shape(), tok);
}

Timing time_generation(const ParamSet& params, const pipeline::RunConfig& cfg, GenerationPath path,
                       std::size_t count, std::size_t repeats) {
  if (repeats == 0 || count == 0) throw std::invalid_argument("time_generation: count and repeats must be positive");
  Timing t;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < count; ++i) {
      const auto img = generate_image(params, cfg, path, i, i);
      if (img.values.empty()) throw std::logic_error("time_generation: empty image");
    }
    t.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  return t;
}

BenchReport run_arm(const pipeline::RunConfig& cfg, const std::string& config_id, const ArmOptions& options) {
  BenchReport r;
  r.config_id = config_id;
  r.dense_tokens = cfg.dense_tokens();
  r.compact_tokens = cfg.sequence_length();
  r.flops_generation = generation_flops(cfg, GenerationPath::kCompact);

  const std::filesystem::path dir = options.cache_dir.empty() ? std::filesystem::path{} : options.cache_dir / config_id;
  ParamSet stage_one = pipeline::init_tokenizer_params(cfg);
  const auto s1_path = dir / "stage1.ckpt";
  if (!dir.empty() && std::filesystem::exists(s1_path)) {
    pipeline::restore_params(stage_one, pipeline::load_checkpoint(s1_path));
  } else {
    auto trained = pipeline::stage_one_train(cfg);
    stage_one = std::move(trained.params);
    if (!dir.empty()) {
      pipeline::save_checkpoint(s1_path, stage_one);
      pipeline::write_stage_one_csv(dir / "stage1_loss.csv", trained.curve);
    }
  }
  const auto held = pipeline::heldout_set(cfg);
  r.recon_mse = pipeline::mean_pixel_mse(held, stage_one, cfg, pipeline::reconstruct_image);
  if (!options.train_sequence_model) return r;

  ParamSet stage_two = stage_one.clone();
  pipeline::add_sequence_model_params(stage_two, cfg);
  const auto s2_path = dir / "stage2.ckpt";
  if (!dir.empty() && std::filesystem::exists(s2_path)) {
    pipeline::restore_params(stage_two, pipeline::load_checkpoint(s2_path));
  } else {
    auto trained = pipeline::stage_two_train(cfg, stage_one);
    stage_two = std::move(trained.params);
    const std::size_t tail = std::min<std::size_t>(10, trained.curve.size());
    for (std::size_t i = trained.curve.size() - tail; i < trained.curve.size(); ++i) {
      r.lm_loss += trained.curve[i].generation / static_cast<double>(tail);
    }
    if (!dir.empty()) {
      pipeline::save_checkpoint(s2_path, stage_two);
      pipeline::write_stage_two_csv(dir / "stage2_loss.csv", trained.curve);
    }
  }
  {
    ParamBinding binding(stage_two);
    const auto probes = pipeline::build_probe_records(held, binding, cfg);
    r.probe_accuracy = lmharness::probe_accuracy(probes, binding, cfg.sequence_model_shape());
  }
  if (options.time_generation) {
    r.timing = time_generation(stage_two, cfg, GenerationPath::kCompact, options.timing_images, options.timing_repeats);
  }
  return r;
}

EfficiencyReport compare_generation(const pipeline::RunConfig& cfg, const ParamSet& stage_one, std::size_t count,
                                    std::size_t repeats) {
  pipeline::RunConfig dense_cfg = cfg;
  dense_cfg.stride = 1;
  dense_cfg.n_g = 0;
  // Timing does not depend on the understanding head.
  dense_cfg.understanding_weight = 0.0;
  pipeline::RunConfig compact_cfg = cfg;
  compact_cfg.understanding_weight = 0.0;

  EfficiencyReport rep;
  rep.compact_steps = generation_steps(compact_cfg, GenerationPath::kCompact);
  rep.dense_steps = generation_steps(dense_cfg, GenerationPath::kDense);

  const auto compact_lm = pipeline::stage_two_train(compact_cfg, stage_one);
  const auto dense_lm = pipeline::stage_two_train(dense_cfg, stage_one);

  auto fill = [&](BenchReport& r, const std::string& id, const pipeline::RunConfig& c, GenerationPath path,
                  const pipeline::StageTwoResult& lm) {
    r.config_id = id;
    r.dense_tokens = c.dense_tokens();
    r.compact_tokens = generation_steps(c, path).sequence_model;
    r.flops_generation = generation_flops(c, path);
    r.lm_loss = lm.curve.empty() ? 0.0 : lm.curve.back().generation;
  };
  fill(rep.compact, "compact", compact_cfg, GenerationPath::kCompact, compact_lm);
  fill(rep.dense, "dense", dense_cfg, GenerationPath::kDense, dense_lm);
  // Interleave the arms so drift in machine load affects both alike.
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto c = time_generation(compact_lm.params, compact_cfg, GenerationPath::kCompact, count, 1);
    const auto d = time_generation(dense_lm.params, dense_cfg, GenerationPath::kDense, count, 1);
    rep.compact.timing.seconds.push_back(c.seconds[0]);
    rep.dense.timing.seconds.push_back(d.seconds[0]);
  }
  rep.flop_ratio =
      static_cast<double>(rep.compact.flops_generation) / static_cast<double>(rep.dense.flops_generation);
  return rep;
}

std::vector<BenchReport> sweep_keep_ratio(const pipeline::RunConfig& base, std::span<const std::size_t> strides,
                                          const ArmOptions& options) {
  std::vector<BenchReport> out;
  for (std::size_t s : strides) {
    const std::string id = "stride" + std::to_string(s);
    pipeline::RunConfig cfg = arm_config(base, id);
    cfg.stride = s;
    try {
      cfg.validate();
    } catch (const basetok::ConfigError& e) {
      BenchReport skip;
      skip.config_id = id;
      skip.dense_tokens = base.dense_tokens();
      skip.status = std::string("skipped: ") + e.what();
      out.push_back(std::move(skip));
      continue;
    }
    out.push_back(run_arm(cfg, id, options));
  }
  return out;
}

std::vector<BenchReport> sweep_global_tokens(const pipeline::RunConfig& base, std::span<const std::size_t> counts,
                                             const ArmOptions& options) {
  std::vector<BenchReport> out;
  for (std::size_t n : counts) {
    const std::string id = "ng" + std::to_string(n);
    pipeline::RunConfig cfg = arm_config(base, id);
    cfg.n_g = n;
    out.push_back(run_arm(cfg, id, options));
  }
  return out;
}

std::vector<BenchReport> ablate_global_type(const pipeline::RunConfig& base,
                                            std::span<const globals::GlobalKind> kinds, const ArmOptions& options) {
  std::vector<BenchReport> out;
  for (auto k : kinds) {
    const std::string id = "global_" + std::string(globals::kind_name(k));
    pipeline::RunConfig cfg = arm_config(base, id);
    cfg.global_kind = k;
    out.push_back(run_arm(cfg, id, options));
  }
  return out;
}

std::vector<BenchReport> ablate_compressor(const pipeline::RunConfig& base,
                                           std::span<const compressor::PoolKind> kinds, const ArmOptions& options) {
  std::vector<BenchReport> out;
  for (auto k : kinds) {
    const std::string id = "pool_" + std::string(compressor::pool_kind_name(k));
    pipeline::RunConfig cfg = arm_config(base, id);
    cfg.pool_kind = k;
    out.push_back(run_arm(cfg, id, options));
  }
  return out;
}

std::string csv_header() {
  return "config_id,dense_tokens,compact_tokens,flops_generation,wall_mean_s,wall_stddev_s,repeats,recon_mse,"
         "probe_accuracy,lm_loss,status";
}

std::string csv_row(const BenchReport& r) {
  std::ostringstream o;
  o << std::setprecision(9);
  o << r.config_id << ',' << r.dense_tokens << ',' << r.compact_tokens << ',' << r.flops_generation << ','
    << r.timing.mean() << ',' << r.timing.stddev() << ',' << r.timing.seconds.size() << ',' << r.recon_mse << ','
    << r.probe_accuracy << ',' << r.lm_loss << ',';
  // status may contain commas
  std::string status = r.status;
  for (char& c : status)
    if (c == ',' || c == '\n') c = ';';
  o << status;
  return o.str();
}

void write_csv(const std::filesystem::path& path, std::span<const BenchReport> reports) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# " << kFlopNote << '\n' << csv_header() << '\n';
  for (const auto& r : reports) out << csv_row(r) << '\n';
}

}  // namespace unicompress::bench
