#include <cstddef>
#include <cstdio>

#include <jpeglib.h>
#include <png.h>

#include "support.hpp"

using namespace nutripred;
using testing_support::TempDir;

namespace {

RgbImage uniform(std::size_t w, std::size_t h, std::uint8_t v) {
  RgbImage img(w, h);
  std::fill(img.pixels.begin(), img.pixels.end(), v);
  return img;
}

void write_gray_png(const std::filesystem::path& path, std::size_t w, std::size_t h, std::uint8_t v) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(w * h, v);
  ASSERT_TRUE(png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr));
}

void write_jpeg(const std::filesystem::path& path, const RgbImage& img) {
  jpeg_compress_struct cinfo{};
  jpeg_error_mgr err{};
  cinfo.err = jpeg_std_error(&err);
  jpeg_create_compress(&cinfo);
  FILE* f = std::fopen(path.c_str(), "wb");
  ASSERT_NE(f, nullptr);
  jpeg_stdio_dest(&cinfo, f);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, 100, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(img.pixels.data() + cinfo.next_scanline * img.width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(f);
}

/// Independent bilinear reference: sample point (x + 0.5) * W / R - 0.5, clamped.
double reference_sample(const RgbImage& img, std::size_t r, std::size_t c, std::size_t y, std::size_t x) {
  auto coord = [r](std::size_t i, std::size_t n) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(n) / static_cast<double>(r) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n - 1));
  };
  const double sx = coord(x, img.width), sy = coord(y, img.height);
  const auto x0 = static_cast<std::size_t>(std::floor(sx)), y0 = static_cast<std::size_t>(std::floor(sy));
  const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
  const double top = img.at(x0, y0, c) * (1 - fx) + img.at(x1, y0, c) * fx;
  const double bottom = img.at(x0, y1, c) * (1 - fx) + img.at(x1, y1, c) * fx;
  return (top * (1 - fy) + bottom * fy) / 255.0;
}

}  // namespace

TEST(LoadImage, MidGrayIsConstantAtAnyResolution) {
  TempDir dir("img");
  write_png(dir / "gray.png", uniform(13, 7, 128));
  for (int r : {1, 5, 16, 40}) {
    const auto t = load_image<double>(dir / "gray.png", r);
    EXPECT_EQ(t.pixels.shape(), (Shape{3, std::size_t(r), std::size_t(r)}));
    for (double v : t.pixels.values()) EXPECT_NEAR(v, 128.0 / 255.0, 1e-12);
    EXPECT_EQ(t.source_ref, (dir / "gray.png").string());
  }
}

TEST(LoadImage, BlackIsZero) {
  TempDir dir("img");
  write_png(dir / "black.png", uniform(9, 9, 0));
  const auto img = load_image<double>(dir / "black.png", 4);
  for (double v : img.pixels.values()) EXPECT_EQ(v, 0.0);
}

TEST(LoadImage, CheckerboardToSinglePixelIsHalf) {
  RgbImage img(2, 2);
  for (std::size_t y = 0; y < 2; ++y) {
    for (std::size_t x = 0; x < 2; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = (x + y) % 2 ? 255 : 0;
    }
  }
  const auto t = resize_bilinear<double>(img, 1);
  for (double v : t.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(LoadImage, SameSizeIsExactCopy) {
  Rng rng(3);
  RgbImage img(6, 6);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  const auto t = resize_bilinear<double>(img, 6);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < 6; ++y) {
      for (std::size_t x = 0; x < 6; ++x) EXPECT_DOUBLE_EQ(t(c, y, x), img.at(x, y, c) / 255.0);
    }
  }
}

TEST(LoadImage, MatchesIndependentBilinearReference) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    RgbImage img(1 + rng.below(30), 1 + rng.below(30));
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    const std::size_t r = 1 + rng.below(25);
    const auto t = resize_bilinear<double>(img, r);
    ASSERT_EQ(t.shape(), (Shape{3, r, r}));
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < r; ++y) {
        for (std::size_t x = 0; x < r; ++x) {
          const double v = t(c, y, x);
          EXPECT_NEAR(v, reference_sample(img, r, c, y, x), 1e-12);
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
        }
      }
    }
  }
}

TEST(LoadImage, NoPerChannelNormalisation) {
  TempDir dir("img");
  RgbImage img(4, 4);
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    img.pixels[i] = 255;
    img.pixels[i + 1] = 51;
    img.pixels[i + 2] = 0;
  }
  write_png(dir / "c.png", img);
  const auto t = load_image<double>(dir / "c.png", 2).pixels;
  EXPECT_DOUBLE_EQ(t(0, 0, 0), 1.0);
  EXPECT_DOUBLE_EQ(t(1, 1, 1), 0.2);
  EXPECT_DOUBLE_EQ(t(2, 0, 1), 0.0);
}

TEST(LoadImage, GrayscalePngBecomesRgb) {
  TempDir dir("img");
  write_gray_png(dir / "g.png", 5, 3, 200);
  const auto t = load_image<double>(dir / "g.png", 3).pixels;
  for (double v : t.values()) EXPECT_NEAR(v, 200.0 / 255.0, 1e-12);
}

TEST(LoadImage, JpegDecodes) {
  TempDir dir("img");
  write_jpeg(dir / "u.jpg", uniform(16, 16, 128));
  const auto t = load_image<double>(dir / "u.jpg", 8).pixels;
  for (double v : t.values()) EXPECT_NEAR(v, 128.0 / 255.0, 2.0 / 255.0);
  const auto raw = decode_image(dir / "u.jpg");
  EXPECT_EQ(raw.width, 16u);
  EXPECT_EQ(raw.height, 16u);
}

TEST(LoadImage, Errors) {
  TempDir dir("img");
  write_png(dir / "ok.png", uniform(2, 2, 1));
  EXPECT_THROW(load_image<float>(dir / "ok.png", 0), ArgumentError);
  EXPECT_THROW(load_image<float>(dir / "ok.png", -3), ArgumentError);
  EXPECT_THROW(load_image<float>(dir / "missing.png", 4), DecodeError);
  {
    std::ofstream(dir / "junk.png") << "definitely not an image";
  }
  EXPECT_THROW(load_image<float>(dir / "junk.png", 4), DecodeError);
  {
    // Valid signature, truncated body.
    std::ifstream in(dir / "ok.png", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream(dir / "cut.png", std::ios::binary) << bytes.substr(0, 20);
  }
  EXPECT_THROW(load_image<float>(dir / "cut.png", 4), DecodeError);
  {
    std::ofstream(dir / "cut.jpg", std::ios::binary) << std::string("\xFF\xD8\xFF\xE0\x00\x10JFIF", 10);
  }
  EXPECT_THROW(load_image<float>(dir / "cut.jpg", 4), DecodeError);
}

TEST(LoadImage, PngWriteReadRoundTrip) {
  TempDir dir("img");
  Rng rng(5);
  RgbImage img(7, 5);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  write_png(dir / "r.png", img);
  const auto back = decode_image(dir / "r.png");
  EXPECT_EQ(back.width, 7u);
  EXPECT_EQ(back.height, 5u);
  EXPECT_EQ(back.pixels, img.pixels);
}
