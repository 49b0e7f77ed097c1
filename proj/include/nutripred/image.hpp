#pragma once

#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "nutripred/error.hpp"
#include "nutripred/tensor.hpp"

namespace nutripred {

/// 8-bit RGB raster, interleaved, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  /// Per-channel mean of value/255 over all pixels.
  std::array<double, 3> channel_means() const {
    std::array<std::uint64_t, 3> sums{};
    for (std::size_t i = 0; i < pixels.size(); ++i) sums[i % 3] += pixels[i];
    const double n = static_cast<double>(width * height) * 255.0;
    return {sums[0] / n, sums[1] / n, sums[2] / n};
  }
};

namespace detail {

inline RgbImage decode_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DecodeError(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out(image.width, image.height);
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DecodeError(path.string() + ": " + msg);
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

inline RgbImage decode_jpeg(const std::filesystem::path& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw DecodeError(path.string() + ": cannot open");
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  // Only trivially destructible locals live across the setjmp boundary.
  RgbImage* out = new RgbImage();
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(file);
    delete out;
    throw DecodeError(path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  *out = RgbImage(cinfo.output_width, cinfo.output_height);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out->pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out->width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(file);
  RgbImage result = std::move(*out);
  delete out;
  return result;
}

}  // namespace detail

/// Decodes a PNG or JPEG file (detected from its signature) to 8-bit RGB.
inline RgbImage decode_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError(path.string() + ": cannot open");
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), sizeof(sig));
  const auto got = in.gcount();
  in.close();
  static constexpr unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (got == 8 && std::equal(sig, sig + 8, png_sig)) return detail::decode_png(path);
  if (got >= 3 && sig[0] == 0xff && sig[1] == 0xd8 && sig[2] == 0xff) return detail::decode_jpeg(path);
  throw DecodeError(path.string() + ": not a PNG or JPEG file");
}

/// Writes an 8-bit RGB PNG. Output bytes depend only on the pixels.
inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw FileError(path.string() + ": " + image.message);
  }
}

/// Bilinear resize to (3, R, R), values scaled by 1/255 into [0, 1]. No per-channel
/// mean/std normalization.
///
/// Sampling uses pixel-center alignment: output pixel x maps to source coordinate
/// (x + 0.5) * W / R - 0.5, so the outer corners of both grids coincide. Coordinates are
/// clamped to the edge pixels. A constant image stays exactly constant.
template <std::floating_point T>
Tensor<T> resize_bilinear(const RgbImage& img, std::size_t resolution) {
  if (resolution == 0) throw ArgumentError("resolution must be positive");
  if (img.width == 0 || img.height == 0) throw DecodeError("empty image");
  struct Tap {
    std::size_t i0, i1;
    double t;
  };
  auto taps = [resolution](std::size_t src) {
    std::vector<Tap> out(resolution);
    const double scale = static_cast<double>(src) / static_cast<double>(resolution);
    for (std::size_t o = 0; o < resolution; ++o) {
      double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(src - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      const std::size_t i1 = std::min(i0 + 1, src - 1);
      out[o] = {i0, i1, s - static_cast<double>(i0)};
    }
    return out;
  };
  const auto xs = taps(img.width);
  const auto ys = taps(img.height);
  Tensor<T> out({3, resolution, resolution});
  auto lerp = [](double a, double b, double t) { return a + t * (b - a); };
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < resolution; ++y) {
      const Tap& ty = ys[y];
      for (std::size_t x = 0; x < resolution; ++x) {
        const Tap& tx = xs[x];
        const double top = lerp(img.at(tx.i0, ty.i0, c), img.at(tx.i1, ty.i0, c), tx.t);
        const double bottom = lerp(img.at(tx.i0, ty.i1, c), img.at(tx.i1, ty.i1, c), tx.t);
        out(c, y, x) = static_cast<T>(lerp(top, bottom, ty.t) / 255.0);
      }
    }
  }
  return out;
}

/// A preprocessed image: (3, R, R) values in [0, 1].
template <std::floating_point T>
struct ImageTensor {
  Tensor<T> pixels;
  std::string source_ref;
};

template <std::floating_point T = float>
ImageTensor<T> load_image(const std::filesystem::path& path, int resolution) {
  if (resolution <= 0) throw ArgumentError("resolution must be positive, got " + std::to_string(resolution));
  return {resize_bilinear<T>(decode_image(path), static_cast<std::size_t>(resolution)), path.string()};
}

}  // namespace nutripred
