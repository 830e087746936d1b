// Command-line front end: training, reconstruction, generation, benchmarks.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "unicompress/bench.hpp"
#include "unicompress/pipeline.hpp"

namespace fs = std::filesystem;
using namespace unicompress;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
};

pipeline::RunConfig resolve(const Common& c) {
  pipeline::RunConfig cfg;
  if (!c.config.empty()) cfg = pipeline::load_config(c.config);
  if (c.seed_set) cfg.seed = c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

ParamSet load_stage(const pipeline::RunConfig& cfg, const fs::path& path, bool with_lm) {
  ParamSet params = pipeline::init_tokenizer_params(cfg);
  if (with_lm) pipeline::add_sequence_model_params(params, cfg);
  pipeline::restore_params(params, pipeline::load_checkpoint(path));
  return params;
}

void print_report(const bench::BenchReport& r) { std::cout << bench::csv_row(r) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compact visual token pipeline: training, reconstruction, generation, benchmarks"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "key = value config file")->check(CLI::ExistingFile);
  app.add_option_function<std::uint64_t>(
      "--seed",
      [&](const std::uint64_t& s) {
        common.seed = s;
        common.seed_set = true;
      },
      "random seed");
  app.add_option("--out", common.out, "run directory");

  auto* train_tok = app.add_subcommand("train-tokenizer", "stage one: tokenizer, globals, decompressor");
  auto* train_lm = app.add_subcommand("train-lm", "stage two: sequence model on the frozen tokenizer");

  auto* recon = app.add_subcommand("reconstruct", "compress and decompress a PGM/PPM image");
  std::string image_path;
  recon->add_option("image", image_path, "input image")->required()->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("generate", "generate images for a class prompt");
  std::size_t prompt = 0, count = 1;
  double temperature = 0.0;
  gen->add_option("--prompt", prompt, "class id")->required();
  gen->add_option("--count", count, "number of images")->check(CLI::PositiveNumber);
  gen->add_option("--temperature", temperature, "0 = greedy")->check(CLI::NonNegativeNumber);

  auto* benchmark = app.add_subcommand("benchmark", "compact vs dense generation timing");
  std::size_t repeats = 5;
  benchmark->add_option("--repeats", repeats, "timing repeats")->check(CLI::Range(5, 1000));

  auto* ablate = app.add_subcommand("ablate", "run an ablation sweep");
  std::string which;
  ablate->add_option("kind", which, "ratio | ng | global-type | compressor")
      ->required()
      ->check(CLI::IsMember({"ratio", "ng", "global-type", "compressor"}));

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = resolve(common);
    fs::create_directories(cfg.out_dir);
    const fs::path s1 = cfg.out_dir / "stage1.ckpt";
    const fs::path s2 = cfg.out_dir / "stage2.ckpt";

    if (*train_tok) {
      std::ofstream(cfg.out_dir / "config.txt") << pipeline::format_config(cfg);
      pipeline::run_stage_one(cfg);
      std::cout << "wrote " << s1.string() << " and " << (cfg.out_dir / "stage1_loss.csv").string() << '\n';
    } else if (*train_lm) {
      pipeline::run_stage_two(cfg, s1);
      std::cout << "wrote " << s2.string() << " and " << (cfg.out_dir / "stage2_loss.csv").string() << '\n';
    } else if (*recon) {
      const ParamSet params = load_stage(cfg, s1, false);
      const auto img = basetok::read_pnm(image_path);
      ParamBinding binding(params);
      const auto seq = pipeline::compress_image(img, binding, cfg);
      const auto out = pipeline::reconstruct_image(img, binding, cfg);
      const fs::path dst = cfg.out_dir / (fs::path(image_path).stem().string() + "_recon" +
                                          (img.channels == 3 ? ".ppm" : ".pgm"));
      basetok::write_pnm(dst, out);
      std::cout << compressor::to_text(seq) << '\n'
                << "mse " << basetok::pixel_mse(out, img) << "\nwrote " << dst.string() << '\n';
    } else if (*gen) {
      const ParamSet params = load_stage(cfg, s2, true);
      ParamBinding binding(params);
      const auto lm = cfg.sequence_model_shape();
      if (prompt >= cfg.classes) throw basetok::ConfigError("prompt class out of range");
      const std::uint32_t id = lm.class_id(prompt);
      std::ofstream lines(cfg.out_dir / "generated.txt", std::ios::app);
      for (std::size_t i = 0; i < count; ++i) {
        const auto seq = lmharness::generate_sequence(std::span(&id, 1), binding, lm, cfg.n_g,
                                                      cfg.compressed_tokens(), temperature, cfg.seed + i);
        const auto img = decompressor::generate_image_from_indices(seq, binding, cfg.decoder_shape(),
                                                                   cfg.tokenizer_shape());
        const fs::path dst = cfg.out_dir / ("gen_c" + std::to_string(prompt) + "_" + std::to_string(i) +
                                            (img.channels == 3 ? ".ppm" : ".pgm"));
        basetok::write_pnm(dst, img);
        lines << compressor::to_text(seq) << '\n';
        std::cout << compressor::to_text(seq) << "\nwrote " << dst.string() << '\n';
      }
    } else if (*benchmark) {
      const ParamSet stage_one = load_stage(cfg, s1, false);
      const auto rep = bench::compare_generation(cfg, stage_one, 1, repeats);
      const std::vector<bench::BenchReport> rows{rep.compact, rep.dense};
      bench::write_csv(cfg.out_dir / "benchmark.csv", rows);
      std::cout << "# " << bench::kFlopNote << '\n' << bench::csv_header() << '\n';
      for (const auto& r : rows) print_report(r);
      std::cout << "sequence-model steps " << rep.compact_steps.sequence_model << " vs "
                << rep.dense_steps.sequence_model << ", flop ratio " << rep.flop_ratio << '\n';
    } else if (*ablate) {
      bench::ArmOptions opt;
      opt.cache_dir = cfg.out_dir / ("ablate_" + which);
      std::vector<bench::BenchReport> rows;
      if (which == "ratio") {
        rows = bench::sweep_keep_ratio(cfg, bench::kDefaultStrides, opt);
      } else if (which == "ng") {
        rows = bench::sweep_global_tokens(cfg, bench::kDefaultGlobalCounts, opt);
      } else if (which == "global-type") {
        const globals::GlobalKind kinds[] = {globals::GlobalKind::kMeta, globals::GlobalKind::kMeanPool,
                                             globals::GlobalKind::kCls};
        rows = bench::ablate_global_type(cfg, kinds, opt);
      } else {
        const compressor::PoolKind kinds[] = {compressor::PoolKind::kAvg, compressor::PoolKind::kMax};
        rows = bench::ablate_compressor(cfg, kinds, opt);
      }
      const fs::path dst = cfg.out_dir / ("ablate_" + which + ".csv");
      bench::write_csv(dst, rows);
      std::cout << "# " << bench::kFlopNote << '\n' << bench::csv_header() << '\n';
      for (const auto& r : rows) print_report(r);
      std::cout << "wrote " << dst.string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
