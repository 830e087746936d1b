#include "unicompress/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "unicompress/ops.hpp"

namespace unicompress::pipeline {

namespace {

// Independent random streams derived from cfg.seed.
enum Stream : std::uint64_t {
  kBasetokInit = 1,
  kGlobalsInit = 2,
  kCompressorInit = 3,
  kDecoderInit = 4,
  kSequenceInit = 5,
  kStageOneOrder = 10,
  kStageTwoOrder = 11,
  kPrefixNoise = 12,
  kCodebookRestart = 13,
};

basetok::ConfigError config_error(std::string_view key, const std::string& what) {
  return basetok::ConfigError("config key '" + std::string(key) + "': " + what);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_size(std::string_view key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw config_error(key, "expected a non-negative integer, got '" + v + "'");
  }
  if (pos != v.size()) throw config_error(key, "expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double parse_double(std::string_view key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw config_error(key, "expected a number, got '" + v + "'");
  }
  if (pos != v.size() || !std::isfinite(x)) throw config_error(key, "expected a number, got '" + v + "'");
  return x;
}

bool parse_bool(std::string_view key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw config_error(key, "expected true or false, got '" + v + "'");
}

// ---- checkpoint byte helpers ----

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(std::string("truncated checkpoint: ") + what + " needs " + std::to_string(n) +
                                " bytes, " + std::to_string(bytes_.size() - pos_) + " left",
                            pos_);
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return take(1, what)[0]; }
  std::uint32_t u32(const char* what) {
    const auto s = take(4, what);
    return static_cast<std::uint32_t>(s[0]) | (static_cast<std::uint32_t>(s[1]) << 8) |
           (static_cast<std::uint32_t>(s[2]) << 16) | (static_cast<std::uint32_t>(s[3]) << 24);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

// ---------------------------------------------------------------- config

void RunConfig::validate() const {
  if (image_h == 0 || image_w == 0) throw config_error("image_h", "image dims must be positive");
  if (channels != 1 && channels != 3) throw config_error("channels", "must be 1 or 3");
  if (patch_size == 0 || image_h % patch_size != 0 || image_w % patch_size != 0) {
    throw config_error("patch_size", "must divide the image dims");
  }
  if (embed_dim == 0) throw config_error("embed_dim", "must be positive");
  if (codebook_size == 0) throw config_error("codebook_size", "must be positive");
  if (stride != 1 && stride != 2 && stride != 4 && stride != 8) throw config_error("stride", "must be 1, 2, 4 or 8");
  const auto shape = tokenizer_shape();
  if (shape.grid_h() % stride != 0 || shape.grid_w() % stride != 0) {
    throw config_error("stride", std::to_string(stride) + " does not divide the " + std::to_string(shape.grid_h()) +
                                     "x" + std::to_string(shape.grid_w()) + " token grid");
  }
  if (n_g != 0 && n_g != 2 && n_g != 4 && n_g != 8 && n_g != 16) throw config_error("n_g", "must be 0, 2, 4, 8 or 16");
  if (heads == 0 || embed_dim % heads != 0) throw config_error("heads", "must divide embed_dim");
  if (decoder_layers == 0) throw config_error("decoder_layers", "must be positive");
  if (lm_layers == 0) throw config_error("lm_layers", "must be positive");
  if (lm_width == 0 || lm_width % heads != 0) throw config_error("lm_width", "must be a positive multiple of heads");
  if (lambda_cb < 0.0) throw config_error("lambda_cb", "must be non-negative");
  if (beta < 0.0) throw config_error("beta", "must be non-negative");
  if (pixel_weight < 0.0) throw config_error("pixel_weight", "must be non-negative");
  if (prefix_noise < 0.0) throw config_error("prefix_noise", "must be non-negative");
  if (self_feed < 0.0 || self_feed > 1.0) throw config_error("self_feed", "must be in [0, 1]");
  if (!(lr > 0.0)) throw config_error("lr", "must be positive");
  if (batch == 0) throw config_error("batch", "must be positive");
  if (dataset_size == 0) throw config_error("dataset_size", "must be positive");
  if (classes == 0) throw config_error("classes", "must be positive");
  if (understanding_weight < 0.0) throw config_error("understanding_weight", "must be non-negative");
}

basetok::TokenizerShape RunConfig::tokenizer_shape() const {
  return basetok::TokenizerShape{image_h, image_w, channels, patch_size, embed_dim, codebook_size};
}

globals::ExtractorShape RunConfig::extractor_shape() const { return globals::ExtractorShape{n_g, embed_dim, heads}; }

decompressor::DecoderShape RunConfig::decoder_shape() const {
  const auto t = tokenizer_shape();
  return decompressor::DecoderShape{embed_dim, decoder_layers, heads, 4, t.grid_h(), t.grid_w(), n_g, stride};
}

lmharness::SequenceModelShape RunConfig::sequence_model_shape() const {
  lmharness::SequenceModelShape s;
  s.codebook_size = codebook_size;
  s.classes = classes;
  s.width = lm_width;
  s.layers = lm_layers;
  s.heads = heads;
  s.visual_dim = embed_dim;
  // class prompt or <ASK>, then the visual segment
  s.max_positions = sequence_length() + 1;
  return s;
}

std::size_t RunConfig::compressed_tokens() const {
  const auto t = tokenizer_shape();
  return (t.grid_h() / stride) * (t.grid_w() / stride);
}

RunConfig parse_config(std::string_view text, RunConfig cfg) {
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw basetok::ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string v = trim(std::string_view(line).substr(eq + 1));
    if (!seen.insert(key).second) throw config_error(key, "set twice (line " + std::to_string(line_no) + ")");

    if (key == "image_h") cfg.image_h = parse_size(key, v);
    else if (key == "image_w") cfg.image_w = parse_size(key, v);
    else if (key == "channels") cfg.channels = parse_size(key, v);
    else if (key == "patch_size") cfg.patch_size = parse_size(key, v);
    else if (key == "embed_dim") cfg.embed_dim = parse_size(key, v);
    else if (key == "codebook_size") cfg.codebook_size = parse_size(key, v);
    else if (key == "stride") cfg.stride = parse_size(key, v);
    else if (key == "n_g") cfg.n_g = parse_size(key, v);
    else if (key == "heads") cfg.heads = parse_size(key, v);
    else if (key == "decoder_layers") cfg.decoder_layers = parse_size(key, v);
    else if (key == "global_kind") {
      try {
        cfg.global_kind = globals::parse_kind(v);
      } catch (const std::exception& e) {
        throw config_error(key, e.what());
      }
    } else if (key == "pool_kind") {
      try {
        cfg.pool_kind = compressor::parse_pool_kind(v);
      } catch (const std::exception& e) {
        throw config_error(key, e.what());
      }
    } else if (key == "lambda_cb") cfg.lambda_cb = parse_double(key, v);
    else if (key == "beta") cfg.beta = parse_double(key, v);
    else if (key == "pixel_weight") cfg.pixel_weight = parse_double(key, v);
    else if (key == "prefix_noise") cfg.prefix_noise = parse_double(key, v);
    else if (key == "self_feed") cfg.self_feed = parse_double(key, v);
    else if (key == "codebook_restart") cfg.codebook_restart = parse_size(key, v);
    else if (key == "lr") cfg.lr = parse_double(key, v);
    else if (key == "batch") cfg.batch = parse_size(key, v);
    else if (key == "stage_one_steps") cfg.stage_one_steps = parse_size(key, v);
    else if (key == "stage_two_steps") cfg.stage_two_steps = parse_size(key, v);
    else if (key == "dataset_size") cfg.dataset_size = parse_size(key, v);
    else if (key == "heldout_size") cfg.heldout_size = parse_size(key, v);
    else if (key == "classes") cfg.classes = parse_size(key, v);
    else if (key == "lm_width") cfg.lm_width = parse_size(key, v);
    else if (key == "lm_layers") cfg.lm_layers = parse_size(key, v);
    else if (key == "understanding_weight") cfg.understanding_weight = parse_double(key, v);
    else if (key == "freeze_base") cfg.freeze_base = parse_bool(key, v);
    else if (key == "seed") cfg.seed = parse_size(key, v);
    else if (key == "out_dir") cfg.out_dir = v;
    else throw config_error(key, "unknown key (line " + std::to_string(line_no) + ")");
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw basetok::ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string format_config(const RunConfig& c) {
  std::ostringstream o;
  o << std::setprecision(17);
  o << "image_h = " << c.image_h << "\nimage_w = " << c.image_w << "\nchannels = " << c.channels
    << "\npatch_size = " << c.patch_size << "\nembed_dim = " << c.embed_dim << "\ncodebook_size = " << c.codebook_size
    << "\nstride = " << c.stride << "\nn_g = " << c.n_g << "\nheads = " << c.heads
    << "\ndecoder_layers = " << c.decoder_layers << "\nglobal_kind = " << globals::kind_name(c.global_kind)
    << "\npool_kind = " << compressor::pool_kind_name(c.pool_kind) << "\nlambda_cb = " << c.lambda_cb
    << "\nbeta = " << c.beta << "\npixel_weight = " << c.pixel_weight << "\nprefix_noise = " << c.prefix_noise << "\nself_feed = " << c.self_feed
    << "\ncodebook_restart = " << c.codebook_restart << "\nlr = " << c.lr << "\nbatch = " << c.batch
    << "\nstage_one_steps = " << c.stage_one_steps << "\nstage_two_steps = " << c.stage_two_steps
    << "\ndataset_size = " << c.dataset_size << "\nheldout_size = " << c.heldout_size << "\nclasses = " << c.classes
    << "\nlm_width = " << c.lm_width << "\nlm_layers = " << c.lm_layers
    << "\nunderstanding_weight = " << c.understanding_weight << "\nfreeze_base = " << (c.freeze_base ? "true" : "false")
    << "\nseed = " << c.seed << "\nout_dir = " << c.out_dir.string() << "\n";
  return o.str();
}

// ---------------------------------------------------------------- dataset

SyntheticSample make_sample(std::uint64_t seed, std::size_t index, std::size_t h, std::size_t w,
                            std::size_t channels, std::size_t classes) {
  if (classes == 0) throw std::invalid_argument("make_sample: classes must be positive");
  Rng rng = Rng::for_index(seed, index);
  SyntheticSample s;
  s.label = index % classes;
  const std::size_t pattern = s.label % 4;
  const bool invert = (s.label / 4) % 2 == 1;

  const double bg = rng.uniform(0.0, 0.3);
  const double fg = rng.uniform(0.6, 1.0);
  const double slope = rng.uniform(-0.1, 0.1);  // faint horizontal gradient
  const double side = static_cast<double>(std::min(h, w));
  const double cy = rng.uniform(0.3, 0.7) * static_cast<double>(h);
  const double cx = rng.uniform(0.3, 0.7) * static_cast<double>(w);
  const double radius = rng.uniform(0.15, 0.3) * side;
  const double period = std::max(2.0, rng.uniform(0.12, 0.25) * side);
  const double phase = rng.uniform(0.0, period);
  std::vector<double> tint(channels, 1.0);
  for (std::size_t c = 1; c < channels; ++c) tint[c] = rng.uniform(0.6, 1.0);

  s.image = basetok::ImageTensor::filled(h, w, channels, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      bool on = false;
      switch (pattern) {
        case 0:
          on = (py - cy) * (py - cy) + (px - cx) * (px - cx) <= radius * radius;
          break;
        case 1:
          on = std::abs(py - cy) <= radius && std::abs(px - cx) <= radius;
          break;
        case 2:
          on = std::fmod(py + phase, period) < period / 2.0;
          break;
        default:
          on = std::fmod(px + phase, period) < period / 2.0;
          break;
      }
      double v = (on ? fg : bg) + slope * (px / static_cast<double>(w) - 0.5);
      v = std::clamp(v, 0.0, 1.0);
      if (invert) v = 1.0 - v;
      for (std::size_t c = 0; c < channels; ++c) s.image.at(y, x, c) = v * tint[c];
    }
  }
  return s;
}

std::vector<SyntheticSample> make_dataset(std::uint64_t seed, std::size_t count, std::size_t h, std::size_t w,
                                          std::size_t channels, std::size_t classes, std::size_t first_index) {
  if (count == 0) throw std::invalid_argument("make_dataset: count must be at least 1");
  std::vector<SyntheticSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_sample(seed, first_index + i, h, w, channels, classes));
  return out;
}

std::vector<SyntheticSample> training_set(const RunConfig& cfg) {
  return make_dataset(cfg.seed, cfg.dataset_size, cfg.image_h, cfg.image_w, cfg.channels, cfg.classes);
}

std::vector<SyntheticSample> heldout_set(const RunConfig& cfg) {
  return make_dataset(cfg.seed, std::max<std::size_t>(1, cfg.heldout_size), cfg.image_h, cfg.image_w, cfg.channels,
                      cfg.classes, cfg.dataset_size);
}

// ---------------------------------------------------------------- checkpoints

MissingTensorsError::MissingTensorsError(std::vector<std::string> names)
    : std::runtime_error([&] {
        std::string msg = "checkpoint is missing " + std::to_string(names.size()) + " tensor(s):";
        for (const auto& n : names) msg += " " + n;
        return msg;
      }()),
      names_(std::move(names)) {}

std::vector<std::uint8_t> serialize_checkpoint(const ParamSet& params) {
  std::vector<std::uint8_t> out = {'U', 'C', 'K', 'P'};
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& [name, e] : params.entries()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(0);  // float32
    out.push_back(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : *e.value) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

ParamSet deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), "UCKP", 4) != 0) throw CheckpointError("bad magic, expected UCKP", 0);
  const std::uint64_t version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto count = r.u32("tensor count");
  ParamSet ps;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32("name length");
    const std::uint64_t name_at = r.offset();
    const auto raw = r.take(name_len, "tensor name");
    std::string name(raw.begin(), raw.end());
    if (name.empty()) throw CheckpointError("empty tensor name", name_at);
    if (ps.contains(name)) throw CheckpointError("duplicate tensor '" + name + "'", name_at);
    const std::uint64_t dtype_at = r.offset();
    const auto dtype = r.u8("dtype");
    if (dtype != 0) throw CheckpointError("unsupported dtype " + std::to_string(dtype) + " for '" + name + "'", dtype_at);
    const auto rank = r.u8("rank");
    Shape dims(rank);
    std::uint64_t numel = 1;
    for (auto& d : dims) {
      d = r.u32("dims");
      numel *= d;
    }
    if (numel * 4 > bytes.size()) {
      throw CheckpointError("truncated checkpoint: payload of '" + name + "' exceeds file size", r.offset());
    }
    const auto payload = r.take(static_cast<std::size_t>(numel * 4), "tensor payload");
    std::vector<double> values(static_cast<std::size_t>(numel));
    for (std::size_t k = 0; k < values.size(); ++k) {
      const auto* p = payload.data() + 4 * k;
      const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                              (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
      values[k] = static_cast<double>(std::bit_cast<float>(u));
    }
    ps.add(name, std::move(dims), std::move(values));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last tensor", r.offset());
  return ps;
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  const auto bytes = serialize_checkpoint(params);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

void restore_params(ParamSet& into, const ParamSet& loaded) {
  std::vector<std::string> missing;
  for (const auto& [name, e] : into.entries()) {
    if (!loaded.contains(name)) {
      missing.push_back(name);
      continue;
    }
    if (loaded.entry(name).dims != e.dims) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(loaded.entry(name).dims) +
                       ", expected " + shape_str(e.dims));
    }
  }
  if (!missing.empty()) throw MissingTensorsError(std::move(missing));
  into.assign_from(loaded);
}

std::vector<std::uint8_t> checkpoint_bytes(const ParamSet& params, std::span<const std::string_view> prefixes) {
  ParamSet subset;
  for (const auto& [name, e] : params.entries()) {
    for (auto p : prefixes) {
      if (name.starts_with(p)) {
        subset.add(name, e.dims, *e.value);
        break;
      }
    }
  }
  return serialize_checkpoint(subset);
}

// ---------------------------------------------------------------- lock

RunLock::RunLock(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = (dir / ".lock").string();
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw LockError("cannot open " + path + ": " + std::strerror(errno));
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw LockError("run directory " + dir.string() + " is locked by another process");
  }
}

RunLock::~RunLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

// ---------------------------------------------------------------- model

ParamSet init_tokenizer_params(const RunConfig& cfg) {
  cfg.validate();
  ParamSet ps;
  Rng base_rng = Rng::for_index(cfg.seed, kBasetokInit);
  basetok::init_params(ps, cfg.tokenizer_shape(), base_rng);
  if (cfg.n_g > 0) {
    Rng g_rng = Rng::for_index(cfg.seed, kGlobalsInit);
    globals::init_params(ps, cfg.global_kind, cfg.extractor_shape(), g_rng);
  }
  Rng c_rng = Rng::for_index(cfg.seed, kCompressorInit);
  compressor::init_params(ps, cfg.embed_dim, c_rng);
  Rng d_rng = Rng::for_index(cfg.seed, kDecoderInit);
  decompressor::init_params(ps, cfg.decoder_shape(), d_rng);
  return ps;
}

void add_sequence_model_params(ParamSet& params, const RunConfig& cfg) {
  Rng rng = Rng::for_index(cfg.seed, kSequenceInit);
  lmharness::init_params(params, cfg.sequence_model_shape(), rng);
}

StackForward run_stack(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg) {
  StackForward f;
  f.dense = basetok::encode_image(img, params, cfg.tokenizer_shape());
  f.globals = globals::make_globals(cfg.global_kind, f.dense, params, cfg.extractor_shape());
  f.compressed = compressor::pool_grid(cfg.pool_kind, f.dense, cfg.stride);
  return f;
}

Tensor stage_one_loss(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg,
                      StageOneLoss* report, Rng* noise_rng) {
  const Tensor& codes = params[basetok::kCodebookName];
  const StackForward f = run_stack(img, params, cfg);

  // Base tokenizer: decode the quantized dense grid.
  const auto base_vq = basetok::vq_losses(f.dense.tokens, codes, cfg.beta);
  const Tensor pixel = mse(basetok::decode_patches(base_vq.quantized, params), basetok::patchify(img, cfg.patch_size));
  Tensor total = add(scale(pixel, cfg.pixel_weight), base_vq.loss);

  // Quantized context. At stride 1 the pooled grid is the dense grid, whose
  // VQ term is already counted.
  decompressor::DecoderContext ctx;
  if (f.globals.count > 0) {
    const auto g_vq = basetok::vq_losses(f.globals.values, codes, cfg.beta);
    total = add(total, g_vq.loss);
    ctx.globals = globals::GlobalTokens{f.globals.count, g_vq.quantized};
  }
  if (cfg.stride == 1) {
    ctx.locals = base_vq.quantized;
  } else {
    const auto x_vq = basetok::vq_losses(f.compressed.tokens, codes, cfg.beta);
    total = add(total, x_vq.loss);
    ctx.locals = x_vq.quantized;
  }

  Tensor fed;
  if (cfg.self_feed > 0.0 && noise_rng) {
    // Parallel scheduled sampling: some prefix rows are replaced by the
    // model's own teacher-forced predictions.
    Tensor preds;
    {
      NoGradGuard no_grad;
      preds = decompressor::teacher_forced_predictions(f.dense.tokens, ctx, params, cfg.decoder_shape());
    }
    const auto x = f.dense.tokens.data();
    const auto p = preds.data();
    const std::size_t d = f.dense.tokens.cols();
    std::vector<double> mixed(x.begin(), x.end());
    for (std::size_t r = 0; r < f.dense.tokens.rows(); ++r) {
      if (noise_rng->uniform() < cfg.self_feed) std::copy(p.begin() + r * d, p.begin() + (r + 1) * d, mixed.begin() + r * d);
    }
    fed = Tensor(f.dense.tokens.dims(), std::move(mixed));
  } else if (cfg.prefix_noise > 0.0 && noise_rng) {
    const auto x = f.dense.tokens.data();
    double sq = 0.0;
    for (double v : x) sq += v * v;
    const double sigma = cfg.prefix_noise * std::sqrt(sq / static_cast<double>(x.size()));
    std::vector<double> noisy(x.begin(), x.end());
    for (double& v : noisy) v += sigma * noise_rng->normal();
    fed = Tensor(f.dense.tokens.dims(), std::move(noisy));
  }
  const auto recon = decompressor::teacher_forced_loss(f.dense, ctx, params, cfg.decoder_shape(), codes, cfg.lambda_cb,
                                                       cfg.beta, fed);
  total = add(total, recon.total);
  if (report) {
    report->reg = recon.report.l_reg;
    report->cb = recon.report.l_cb;
    report->recon = recon.report.total;
    report->pixel = pixel.item();
    report->total = total.item();
  }
  return total;
}

namespace {

using LossFn = std::function<Tensor(const basetok::ImageTensor&, ParamBinding&, StageOneLoss*, Rng&)>;
// Pre-quantization rows of every stream that is quantized with the codebook.
using QuantizerInputs = std::function<std::vector<Tensor>(const basetok::ImageTensor&, ParamBinding&)>;

// Dead-code restarts: usage is counted over a window of steps; codes that no
// row selected are replaced by rows drawn from the last batch, one stream
// chosen uniformly per code so that short streams (globals) are represented.
class CodebookRestarter {
 public:
  CodebookRestarter(const RunConfig& cfg, QuantizerInputs inputs)
      : interval_(cfg.codebook_restart),
        total_steps_(cfg.stage_one_steps),
        inputs_(std::move(inputs)),
        counts_(cfg.codebook_size, 0),
        rng_(Rng::for_index(cfg.seed, kCodebookRestart)) {}

  bool enabled(const ParamSet& params) const {
    return interval_ > 0 && inputs_ && params.entry(basetok::kCodebookName).trainable;
  }

  // Called with the batch images of `step` and the parameters they were scored with.
  void observe(std::span<const basetok::ImageTensor* const> batch, ParamBinding& binding) {
    NoGradGuard no_grad;
    const Tensor& codes = binding[basetok::kCodebookName];
    last_.clear();
    for (const auto* img : batch) {
      auto streams = inputs_(*img, binding);
      if (last_.empty()) last_.resize(streams.size());
      for (std::size_t s = 0; s < streams.size(); ++s) {
        for (auto k : basetok::quantize_rows(streams[s], codes)) ++counts_[k - 1];
        last_[s].push_back(std::move(streams[s]));
      }
    }
  }

  // After the optimizer update of `step`.
  void maybe_restart(std::size_t step, ParamSet& params) {
    if ((step + 1) % interval_ != 0) return;
    // A restart in the final window would leave no steps to adapt to it.
    if (step + 1 + interval_ > total_steps_) return;
    auto& codes = *params.entry(basetok::kCodebookName).value;
    const std::size_t d = codes.size() / counts_.size();
    std::vector<std::size_t> live;
    for (std::size_t s = 0; s < last_.size(); ++s)
      if (!last_[s].empty() && last_[s].front().numel() > 0) live.push_back(s);
    for (std::size_t k = 0; k < counts_.size() && !live.empty(); ++k) {
      if (counts_[k] != 0) continue;
      const auto& stream = last_[live[rng_.below(live.size())]];
      const Tensor& rows = stream[rng_.below(stream.size())];
      const auto row = rows.row(rng_.below(rows.rows()));
      std::copy(row.begin(), row.end(), codes.begin() + static_cast<std::ptrdiff_t>(k * d));
      ++restarted_;
    }
    std::fill(counts_.begin(), counts_.end(), 0);
  }

  std::size_t restarted() const { return restarted_; }

 private:
  std::size_t interval_;
  std::size_t total_steps_;
  QuantizerInputs inputs_;
  std::vector<std::size_t> counts_;
  std::vector<std::vector<Tensor>> last_;  // per stream, per image
  Rng rng_;
  std::size_t restarted_ = 0;
};

StageOneResult train_loop(const RunConfig& cfg, ParamSet params, const LossFn& loss_fn,
                          const QuantizerInputs& quantizer_inputs, const StepObserver& observer,
                          ParamSet* last_good) {
  const auto data = training_set(cfg);
  Rng order = Rng::for_index(cfg.seed, kStageOneOrder);
  Rng noise = Rng::for_index(cfg.seed, kPrefixNoise);
  Adam adam(AdamConfig{cfg.lr});
  CodebookRestarter restarter(cfg, quantizer_inputs);
  const bool restarts = restarter.enabled(params);
  StageOneResult result;
  result.curve.reserve(cfg.stage_one_steps);
  const double inv = 1.0 / static_cast<double>(cfg.batch);
  std::vector<const basetok::ImageTensor*> batch(cfg.batch);
  for (std::size_t step = 0; step < cfg.stage_one_steps; ++step) {
    ParamBinding binding(params);
    Tape tape;
    Tensor total;
    StageOneLoss mean;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      batch[b] = &data[order.below(data.size())].image;
      StageOneLoss r;
      const Tensor loss = scale(loss_fn(*batch[b], binding, &r, noise), inv);
      total = total.defined() ? add(total, loss) : loss;
      mean.total += r.total * inv;
      mean.reg += r.reg * inv;
      mean.cb += r.cb * inv;
      mean.recon += r.recon * inv;
      mean.pixel += r.pixel * inv;
    }
    if (!std::isfinite(total.item())) {
      if (last_good) *last_good = params.clone();
      throw DivergenceError("stage one loss is not finite at step " + std::to_string(step), step);
    }
    tape.backward(total);
    if (restarts) restarter.observe(batch, binding);
    GradMap grads;
    binding.accumulate_into(grads);
    adam.step(params, grads);
    if (restarts) restarter.maybe_restart(step, params);
    result.curve.push_back(mean);
    if (observer) observer(step, mean);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace

StageOneResult stage_one_train(const RunConfig& cfg, const StepObserver& observer, ParamSet* last_good) {
  ParamSet params = init_tokenizer_params(cfg);
  if (cfg.freeze_base) {
    params.set_trainable("basetok.encoder", false);
    params.set_trainable("basetok.decoder", false);
  }
  return train_loop(
      cfg, std::move(params),
      [&cfg](const basetok::ImageTensor& img, ParamBinding& b, StageOneLoss* r, Rng& noise) {
        return stage_one_loss(img, b, cfg, r, &noise);
      },
      [&cfg](const basetok::ImageTensor& img, ParamBinding& b) {
        const auto f = run_stack(img, b, cfg);
        std::vector<Tensor> streams{f.dense.tokens};
        if (f.globals.count > 0) streams.push_back(f.globals.values);
        if (cfg.stride > 1) streams.push_back(f.compressed.tokens);
        return streams;
      },
      observer, last_good);
}

StageOneResult train_base_autoencoder(const RunConfig& cfg) {
  cfg.validate();
  ParamSet params;
  Rng rng = Rng::for_index(cfg.seed, kBasetokInit);
  basetok::init_params(params, cfg.tokenizer_shape(), rng);
  return train_loop(
      cfg, std::move(params),
      [&cfg](const basetok::ImageTensor& img, ParamBinding& b, StageOneLoss* r, Rng&) {
        const auto grid = basetok::encode_image(img, b, cfg.tokenizer_shape());
        const auto vq = basetok::vq_losses(grid.tokens, b[basetok::kCodebookName], cfg.beta);
        const Tensor pixel = mse(basetok::decode_patches(vq.quantized, b), basetok::patchify(img, cfg.patch_size));
        const Tensor total = add(scale(pixel, cfg.pixel_weight), vq.loss);
        r->pixel = pixel.item();
        r->total = total.item();
        return total;
      },
      [&cfg](const basetok::ImageTensor& img, ParamBinding& b) {
        return std::vector<Tensor>{basetok::encode_image(img, b, cfg.tokenizer_shape()).tokens};
      },
      {}, nullptr);
}

// ---------------------------------------------------------------- stage two

std::vector<lmharness::PromptRecord> build_prompt_records(std::span<const SyntheticSample> samples,
                                                          ParamBinding& params, const RunConfig& cfg) {
  const auto shape = cfg.sequence_model_shape();
  std::vector<lmharness::PromptRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back({{shape.class_id(s.label)}, compress_image(s.image, params, cfg)});
  }
  return out;
}

std::vector<lmharness::ProbeRecord> build_probe_records(std::span<const SyntheticSample> samples,
                                                        ParamBinding& params, const RunConfig& cfg) {
  NoGradGuard no_grad;
  std::vector<lmharness::ProbeRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    auto f = run_stack(s.image, params, cfg);
    out.push_back({std::move(f.globals), f.compressed.tokens, s.label});
  }
  return out;
}

StageTwoResult stage_two_train(const RunConfig& cfg, const ParamSet& stage_one) {
  ParamSet params = stage_one.clone();
  for (auto p : kTokenizerPrefixes) params.set_trainable(p, false);
  add_sequence_model_params(params, cfg);

  const auto data = training_set(cfg);
  std::vector<lmharness::PromptRecord> records;
  std::vector<lmharness::ProbeRecord> probes;
  {
    ParamBinding frozen(params);
    records = build_prompt_records(data, frozen, cfg);
    if (cfg.understanding_weight > 0.0) probes = build_probe_records(data, frozen, cfg);
  }
  lmharness::TrainOptions opt;
  opt.steps = cfg.stage_two_steps;
  opt.batch = cfg.batch;
  opt.lr = cfg.lr;
  opt.seed = Rng::for_index(cfg.seed, kStageTwoOrder).next_u64();
  opt.understanding_weight = cfg.understanding_weight;
  StageTwoResult result;
  result.curve = lmharness::train_sequence_model(records, probes, params, cfg.sequence_model_shape(), opt);
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------- inference

compressor::IndexSequence compress_image(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg) {
  NoGradGuard no_grad;
  const auto f = run_stack(img, params, cfg);
  const Tensor& codes = params[basetok::kCodebookName];
  std::vector<std::uint32_t> zg;
  if (f.globals.count > 0) zg = basetok::quantize_rows(f.globals.values, codes);
  const auto zx = basetok::quantize_rows(f.compressed.tokens, codes);
  return compressor::assemble_sequence(zg, zx, cfg.codebook_size, /*allow_empty_globals=*/cfg.n_g == 0);
}

basetok::ImageTensor reconstruct_image(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg) {
  return decompressor::generate_image_from_indices(compress_image(img, params, cfg), params, cfg.decoder_shape(),
                                                   cfg.tokenizer_shape());
}

basetok::ImageTensor reconstruct_nearest(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg) {
  NoGradGuard no_grad;
  const auto split = compressor::parse_sequence(compress_image(img, params, cfg));
  const auto t = cfg.tokenizer_shape();
  compressor::CompressedGrid xc{t.grid_h() / cfg.stride, t.grid_w() / cfg.stride, cfg.stride,
                                basetok::dequantize(split.locals, params[basetok::kCodebookName])};
  return basetok::decode_tokens(compressor::upsample_nearest(xc), params, t);
}

basetok::ImageTensor reconstruct_base(const basetok::ImageTensor& img, ParamBinding& params, const RunConfig& cfg) {
  NoGradGuard no_grad;
  const auto t = cfg.tokenizer_shape();
  const auto grid = basetok::encode_image(img, params, t);
  const Tensor& codes = params[basetok::kCodebookName];
  const auto idx = basetok::quantize_rows(grid.tokens, codes);
  return basetok::decode_tokens(basetok::TokenGrid{t.grid_h(), t.grid_w(), basetok::dequantize(idx, codes)}, params,
                                t);
}

double mean_pixel_mse(std::span<const SyntheticSample> samples, const ParamSet& params, const RunConfig& cfg,
                      const Reconstructor& fn) {
  if (samples.empty()) return 0.0;
  ParamBinding binding(params);
  double total = 0.0;
  for (const auto& s : samples) total += basetok::pixel_mse(fn(s.image, binding, cfg), s.image);
  return total / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------- artifacts

void write_stage_one_csv(const std::filesystem::path& path, std::span<const StageOneLoss> curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss_total,loss_reg,loss_cb\n" << std::setprecision(17);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    out << i << ',' << curve[i].total << ',' << curve[i].reg << ',' << curve[i].cb << '\n';
  }
}

void write_stage_two_csv(const std::filesystem::path& path, std::span<const lmharness::LossPoint> curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss_total,loss_gen,loss_und\n" << std::setprecision(17);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    out << i << ',' << curve[i].total << ',' << curve[i].generation << ',' << curve[i].understanding << '\n';
  }
}

ParamSet run_stage_one(const RunConfig& cfg) {
  RunLock lock(cfg.out_dir);
  std::vector<StageOneLoss> seen;
  ParamSet last_good;
  try {
    auto result = stage_one_train(
        cfg, [&seen](std::size_t, const StageOneLoss& l) { seen.push_back(l); }, &last_good);
    save_checkpoint(cfg.out_dir / "stage1.ckpt", result.params);
    write_stage_one_csv(cfg.out_dir / "stage1_loss.csv", result.curve);
    return std::move(result.params);
  } catch (const DivergenceError&) {
    save_checkpoint(cfg.out_dir / "stage1.ckpt", last_good);
    write_stage_one_csv(cfg.out_dir / "stage1_loss.csv", seen);
    throw;
  }
}

ParamSet run_stage_two(const RunConfig& cfg, const std::filesystem::path& stage_one_checkpoint) {
  RunLock lock(cfg.out_dir);
  ParamSet stage_one = init_tokenizer_params(cfg);
  restore_params(stage_one, load_checkpoint(stage_one_checkpoint));
  auto result = stage_two_train(cfg, stage_one);
  save_checkpoint(cfg.out_dir / "stage2.ckpt", result.params);
  write_stage_two_csv(cfg.out_dir / "stage2_loss.csv", result.curve);
  return std::move(result.params);
}

}  // namespace unicompress::pipeline
