#include "unicompress/basetok.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "unicompress/layers.hpp"
#include "unicompress/ops.hpp"

namespace unicompress::basetok {

ImageTensor ImageTensor::filled(std::size_t h, std::size_t w, std::size_t c, double v) {
  return ImageTensor{h, w, c, std::vector<double>(h * w * c, v)};
}

void ImageTensor::validate() const {
  if (height == 0 || width == 0) throw ShapeError("image has zero extent");
  if (channels != 1 && channels != 3) throw ShapeError("image channels must be 1 or 3, got " + std::to_string(channels));
  if (values.size() != height * width * channels) throw ShapeError("image buffer size does not match dims");
  for (double v : values) {
    if (!(v >= 0.0 && v <= 1.0)) throw ShapeError("image value outside [0, 1]");
  }
}

void TokenizerShape::validate() const {
  if (patch == 0 || image_h % patch != 0 || image_w % patch != 0) {
    throw ShapeError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                     " is not divisible by patch size " + std::to_string(patch));
  }
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (embed_dim < 2) throw ConfigError("embed_dim must be at least 2");
  if (codebook_size == 0) throw ConfigError("codebook is empty");
}

void init_params(ParamSet& ps, const TokenizerShape& shape, Rng& rng) {
  shape.validate();
  const std::size_t d = shape.embed_dim, pd = shape.patch_dim(), t = shape.tokens();
  const double code_bound = 1.0 / std::sqrt(static_cast<double>(d));
  ps.add_uniform(kCodebookName, {shape.codebook_size, d}, code_bound, rng);
  ps.add_constant("basetok.decoder.bias", {pd}, 0.0);
  ps.add_normal("basetok.decoder.weight", {d, pd}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  ps.add_constant("basetok.encoder.bias", {d}, 0.0);
  ps.add_normal("basetok.encoder.pos", {t, d}, 0.02, rng);
  ps.add_normal("basetok.encoder.weight", {pd, d}, 1.0 / std::sqrt(static_cast<double>(pd)), rng);
}

Tensor patchify(const ImageTensor& img, std::size_t patch) {
  if (patch == 0 || img.height % patch != 0 || img.width % patch != 0) {
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is not divisible by patch size " + std::to_string(patch));
  }
  const std::size_t gh = img.height / patch, gw = img.width / patch, c = img.channels;
  const std::size_t pd = patch * patch * c;
  std::vector<double> out(gh * gw * pd);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* dst = out.data() + (gy * gw + gx) * pd;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px)
          for (std::size_t ch = 0; ch < c; ++ch)
            *dst++ = img.at(gy * patch + py, gx * patch + px, ch);
    }
  return Tensor({gh * gw, pd}, std::move(out));
}

ImageTensor unpatchify(const Tensor& patches, const TokenizerShape& shape) {
  const std::size_t gh = shape.grid_h(), gw = shape.grid_w(), p = shape.patch, c = shape.channels;
  if (patches.rows() != gh * gw || patches.cols() != shape.patch_dim()) {
    throw ShapeError("unpatchify: " + shape_str(patches.dims()) + " does not fit a " + std::to_string(gh) + "x" +
                     std::to_string(gw) + " grid of " + std::to_string(shape.patch_dim()) + "-value patches");
  }
  auto img = ImageTensor::filled(shape.image_h, shape.image_w, c, 0.0);
  const auto src = patches.data();
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const double* s = src.data() + (gy * gw + gx) * shape.patch_dim();
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t ch = 0; ch < c; ++ch) img.at(gy * p + py, gx * p + px, ch) = std::clamp(*s++, 0.0, 1.0);
    }
  return img;
}

TokenGrid encode_image(const ImageTensor& img, ParamBinding& params, const TokenizerShape& shape) {
  if (img.height != shape.image_h || img.width != shape.image_w || img.channels != shape.channels) {
    throw ShapeError("encode_image: got " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                     std::to_string(img.channels) + ", tokenizer expects " + std::to_string(shape.image_h) + "x" +
                     std::to_string(shape.image_w) + "x" + std::to_string(shape.channels));
  }
  const Tensor patches = patchify(img, shape.patch);
  Tensor tokens = add(affine(patches, params["basetok.encoder.weight"], params["basetok.encoder.bias"]),
                      params["basetok.encoder.pos"]);
  return TokenGrid{shape.grid_h(), shape.grid_w(), std::move(tokens)};
}

Tensor decode_patches(const Tensor& tokens, ParamBinding& params) {
  return affine(tokens, params["basetok.decoder.weight"], params["basetok.decoder.bias"]);
}

ImageTensor decode_tokens(const TokenGrid& grid, ParamBinding& params, const TokenizerShape& shape) {
  if (grid.grid_h != shape.grid_h() || grid.grid_w != shape.grid_w() || grid.tokens.rows() != grid.count()) {
    throw ShapeError("decode_tokens: grid " + std::to_string(grid.grid_h) + "x" + std::to_string(grid.grid_w) +
                     " with " + std::to_string(grid.tokens.rows()) + " tokens does not match tokenizer grid " +
                     std::to_string(shape.grid_h()) + "x" + std::to_string(shape.grid_w()));
  }
  NoGradGuard no_grad;
  return unpatchify(decode_patches(grid.tokens, params), shape);
}

std::uint32_t quantize(std::span<const double> v, const Tensor& codes) {
  const std::size_t k = codes.rows(), d = codes.cols();
  if (k == 0) throw ConfigError("quantize: empty codebook");
  if (v.size() != d) {
    throw ShapeError("quantize: vector of length " + std::to_string(v.size()) + " against codes of width " +
                     std::to_string(d));
  }
  const auto c = codes.data();
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < k; ++i) {
    double dist = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = v[j] - c[i * d + j];
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = i;
    }
  }
  return static_cast<std::uint32_t>(best + 1);
}

std::vector<std::uint32_t> quantize_rows(const Tensor& rows, const Tensor& codes) {
  std::vector<std::uint32_t> out(rows.rows());
  for (std::size_t i = 0; i < rows.rows(); ++i) out[i] = quantize(rows.row(i), codes);
  return out;
}

Tensor dequantize(std::span<const std::uint32_t> indices, const Tensor& codes) {
  const std::size_t k = codes.rows();
  std::vector<std::size_t> rows(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 1 || indices[i] > k) {
      throw DecodeError("code index " + std::to_string(indices[i]) + " at position " + std::to_string(i) +
                            " outside 1.." + std::to_string(k),
                        i);
    }
    rows[i] = indices[i] - 1;
  }
  return gather_rows(codes, rows);
}

VqResult vq_losses(const Tensor& pre_q, const Tensor& codes, double beta) {
  const Tensor frozen_pre = detach(pre_q);
  auto indices = quantize_rows(frozen_pre, codes);
  const Tensor picked = dequantize(indices, codes);
  const Tensor codebook_term = mean_row_sq_dist(frozen_pre, picked);
  const Tensor commitment_term = mean_row_sq_dist(pre_q, detach(picked));
  Tensor loss = beta == 0.0 ? codebook_term : add(codebook_term, scale(commitment_term, beta));
  Tensor quantized = add(pre_q, detach(sub(picked, pre_q)));
  return VqResult{std::move(quantized), std::move(loss), std::move(indices)};
}

namespace {

void skip_ws_and_comments(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      return;
    }
  }
}

std::size_t read_header_int(std::istream& in, const std::string& path) {
  skip_ws_and_comments(in);
  std::size_t v = 0;
  if (!(in >> v)) throw DecodeError("malformed PNM header in " + path, static_cast<std::size_t>(in.tellg()));
  return v;
}

}  // namespace

ImageTensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open " + path.string(), 0);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw DecodeError(path.string() + ": expected P5 or P6 magic", 0);
  }
  const std::size_t channels = magic[1] == '5' ? 1 : 3;
  const std::size_t w = read_header_int(in, path.string());
  const std::size_t h = read_header_int(in, path.string());
  const std::size_t maxval = read_header_int(in, path.string());
  if (maxval != 255) throw DecodeError(path.string() + ": only maxval 255 is supported", 0);
  in.get();  // single whitespace before the raster
  std::vector<unsigned char> raw(w * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw DecodeError(path.string() + ": truncated raster", static_cast<std::size_t>(in.gcount()));
  }
  ImageTensor img{h, w, channels, std::vector<double>(raw.size())};
  for (std::size_t i = 0; i < raw.size(); ++i) img.values[i] = raw[i] / 255.0;
  return img;
}

void write_pnm(const std::filesystem::path& path, const ImageTensor& img) {
  img.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.values.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.values[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

double pixel_mse(const ImageTensor& a, const ImageTensor& b) {
  if (a.values.size() != b.values.size()) throw ShapeError("pixel_mse: image sizes differ");
  double total = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) total += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
  return total / static_cast<double>(a.values.size());
}

}  // namespace unicompress::basetok
