#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "unicompress/params.hpp"
#include "unicompress/tensor.hpp"

// The base discrete tokenizer the compression stack plugs into: a linear patch
// autoencoder with a shared vector-quantization codebook.
namespace unicompress::basetok {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DecodeError : public std::runtime_error {
 public:
  DecodeError(const std::string& what, std::size_t position)
      : std::runtime_error(what), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

// Interleaved H x W x C pixels in [0, 1].
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> values;

  static ImageTensor filled(std::size_t h, std::size_t w, std::size_t c, double v);
  double& at(std::size_t y, std::size_t x, std::size_t ch = 0) { return values[(y * width + x) * channels + ch]; }
  double at(std::size_t y, std::size_t x, std::size_t ch = 0) const { return values[(y * width + x) * channels + ch]; }
  void validate() const;
};

// Row-major raster of grid_h x grid_w tokens, each a row of `tokens`.
struct TokenGrid {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  Tensor tokens;

  std::size_t count() const { return grid_h * grid_w; }
  std::size_t embed_dim() const { return tokens.cols(); }
};

struct TokenizerShape {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 1;
  std::size_t patch = 4;
  std::size_t embed_dim = 32;
  std::size_t codebook_size = 64;

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  void validate() const;
};

inline constexpr const char* kCodebookName = "basetok.codebook";

// Adds encoder/decoder/positional tensors and the codebook under "basetok.".
void init_params(ParamSet& ps, const TokenizerShape& shape, Rng& rng);

// Image -> T x patch_dim matrix of flattened patches in raster order.
Tensor patchify(const ImageTensor& img, std::size_t patch);
// Inverse of patchify; values are clamped to [0, 1].
ImageTensor unpatchify(const Tensor& patches, const TokenizerShape& shape);

// Linear patch embedding plus a learned per-position embedding.
TokenGrid encode_image(const ImageTensor& img, ParamBinding& params, const TokenizerShape& shape);
// Linear un-embedding before clamping; the training target space.
Tensor decode_patches(const Tensor& tokens, ParamBinding& params);
ImageTensor decode_tokens(const TokenGrid& grid, ParamBinding& params, const TokenizerShape& shape);

// 1-based nearest code; ties go to the lowest index.
std::uint32_t quantize(std::span<const double> v, const Tensor& codes);
std::vector<std::uint32_t> quantize_rows(const Tensor& rows, const Tensor& codes);
// Rows code[idx_i]; gradients flow into `codes`.
Tensor dequantize(std::span<const std::uint32_t> indices, const Tensor& codes);

struct VqResult {
  Tensor quantized;  // straight-through: forward = code, backward = identity
  Tensor loss;       // codebook term + beta * commitment term, mean over rows
  std::vector<std::uint32_t> indices;
};

VqResult vq_losses(const Tensor& pre_q, const Tensor& codes, double beta);

// Binary PGM (P5) / PPM (P6), maxval 255.
ImageTensor read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const ImageTensor& img);

double pixel_mse(const ImageTensor& a, const ImageTensor& b);

}  // namespace unicompress::basetok
