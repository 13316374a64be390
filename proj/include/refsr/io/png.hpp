#pragma once

#include <png.h>

#include <cstdint>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"

namespace refsr::io {

/// 8-bit raster, interleaved, row-major.
struct Raster8 {
  int64_t width = 0;
  int64_t height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

namespace detail {

struct MemReader {
  const std::uint8_t* data;
  size_t size;
  size_t pos;
};

inline void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
  auto* r = static_cast<MemReader*>(png_get_io_ptr(png));
  if (r->pos + n > r->size) png_error(png, "truncated PNG");
  std::memcpy(out, r->data + r->pos, n);
  r->pos += n;
}

inline void png_write_mem(png_structp png, png_bytep in, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), in, in + n);
}

inline void png_flush_noop(png_structp) {}

inline void png_warn_ignore(png_structp, png_const_charp) {}

}  // namespace detail

/// Decode PNG bytes. Palette, 16-bit and alpha inputs are normalized to 8-bit
/// gray or RGB.
inline Raster8 decode_png(const std::uint8_t* data, size_t size) {
  if (size < 8 || png_sig_cmp(data, 0, 8) != 0) throw IoError("png: not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warn_ignore);
  if (!png) throw IoError("png: cannot allocate read struct");
  png_infop info = png_create_info_struct(png);
  Raster8 r;
  std::vector<png_bytep> rows;
  // libpng reports errors by longjmp; everything with a destructor lives above.
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png: corrupt or unsupported stream");
  }

  detail::MemReader reader{data, size, 0};
  png_set_read_fn(png, &reader, detail::png_read_mem);
  png_read_info(png, info);

  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  r.width = png_get_image_width(png, info);
  r.height = png_get_image_height(png, info);
  r.channels = png_get_channels(png, info);
  if (r.channels != 1 && r.channels != 3) png_error(png, "unsupported channel layout");
  const size_t stride = png_get_rowbytes(png, info);
  r.pixels.resize(stride * r.height);
  rows.resize(r.height);
  for (int64_t y = 0; y < r.height; ++y) rows[y] = r.pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return r;
}

inline Raster8 decode_png(const std::string& bytes) {
  return decode_png(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size());
}

inline std::vector<std::uint8_t> encode_png(const Raster8& r) {
  if (r.channels != 1 && r.channels != 3) throw IoError("png: unsupported channel count");
  if (r.pixels.size() != static_cast<size_t>(r.width * r.height * r.channels))
    throw IoError("png: raster size mismatch");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warn_ignore);
  if (!png) throw IoError("png: cannot allocate write struct");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: encode failed");
  }

  png_set_write_fn(png, &out, detail::png_write_mem, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8,
               r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed compression settings keep the encoded bytes reproducible.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  const size_t stride = static_cast<size_t>(r.width) * r.channels;
  for (int64_t y = 0; y < r.height; ++y)
    png_write_row(png, const_cast<png_bytep>(r.pixels.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(p.c_str(), "rb"), &std::fclose);
  if (!f) throw IoError("cannot open " + p.string());
  std::string s;
  char buf[1 << 16];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f.get())) > 0) s.append(buf, n);
  return s;
}

inline void write_file(const std::filesystem::path& p, const void* data, size_t size) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(p.c_str(), "wb"), &std::fclose);
  if (!f) throw IoError("cannot write " + p.string());
  if (size && std::fwrite(data, 1, size, f.get()) != size) throw IoError("short write to " + p.string());
  if (std::fflush(f.get()) != 0) throw IoError("flush failed for " + p.string());
}

inline void write_file(const std::filesystem::path& p, const std::string& s) { write_file(p, s.data(), s.size()); }

/// (3,H,W) or (1,H,W) unit-range float tensor -> raster (rounded to nearest).
inline Raster8 to_raster(const torch::Tensor& chw) {
  auto t = chw.detach().to(torch::kCPU, torch::kFloat32);
  if (t.dim() == 4) t = t.squeeze(0);
  if (t.dim() == 2) t = t.unsqueeze(0);
  if (t.dim() != 3 || (t.size(0) != 1 && t.size(0) != 3)) throw ShapeError("to_raster expects (1|3,H,W)");
  auto u8 = (t.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  Raster8 r;
  r.channels = static_cast<int>(t.size(0));
  r.height = t.size(1);
  r.width = t.size(2);
  r.pixels.assign(u8.data_ptr<std::uint8_t>(), u8.data_ptr<std::uint8_t>() + u8.numel());
  return r;
}

/// Raster -> (C,H,W) float tensor in unit range.
inline torch::Tensor from_raster(const Raster8& r) {
  auto t = torch::from_blob(const_cast<std::uint8_t*>(r.pixels.data()), {r.height, r.width, r.channels},
                            torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat32)
               .div(255.0);
  return t.contiguous();
}

/// Raster -> (C,H,W) uint8 tensor, owning.
inline torch::Tensor raster_u8(const Raster8& r) {
  return torch::from_blob(const_cast<std::uint8_t*>(r.pixels.data()), {r.height, r.width, r.channels},
                          torch::kUInt8)
      .permute({2, 0, 1})
      .clone();
}

inline torch::Tensor load_png(const std::filesystem::path& p) { return from_raster(decode_png(read_file(p))); }

/// Loads an RGB image; gray inputs are expanded to three channels.
inline torch::Tensor load_rgb(const std::filesystem::path& p) {
  auto t = load_png(p);
  return t.size(0) == 1 ? t.expand({3, -1, -1}).contiguous() : t;
}

inline void save_png(const std::filesystem::path& p, const torch::Tensor& chw) {
  auto bytes = encode_png(to_raster(chw));
  write_file(p, bytes.data(), bytes.size());
}

inline std::string png_bytes(const torch::Tensor& chw) {
  auto bytes = encode_png(to_raster(chw));
  return {bytes.begin(), bytes.end()};
}

}  // namespace refsr::io
