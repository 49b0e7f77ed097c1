#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "nutripred/dataio.hpp"
#include "nutripred/image.hpp"
#include "nutripred/rng.hpp"

namespace nutripred {

/// Affine map from (mean R, mean G, mean B) in [0,1] to the five nutrient targets.
struct LabelMap {
  std::array<std::array<double, 3>, kTaskCount> slopes{{
      {400.0, 300.0, 200.0},  // calories
      {150.0, 100.0, 100.0},  // mass
      {30.0, 10.0, 20.0},     // protein
      {10.0, 25.0, 5.0},      // fat
      {20.0, 60.0, 40.0},     // carbohydrates
  }};
  TaskArray intercepts{100.0, 50.0, 5.0, 3.0, 10.0};

  /// Every label must be >= 0 for all channel means in [0,1], i.e. the intercept plus all
  /// negative slopes must stay non-negative.
  void validate() const {
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      double worst = intercepts[k];
      for (double s : slopes[k]) {
        if (!std::isfinite(s)) throw ArgumentError("label map: non-finite slope");
        worst += std::min(s, 0.0);
      }
      if (!std::isfinite(intercepts[k]) || worst < 0.0) {
        throw ArgumentError("label map can produce a negative " + std::string(kTaskNames[k]));
      }
    }
  }

  NutrientVector apply(const std::array<double, 3>& means) const {
    TaskArray v{};
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      v[k] = intercepts[k] + slopes[k][0] * means[0] + slopes[k][1] * means[1] + slopes[k][2] * means[2];
    }
    return NutrientVector(v);
  }
};

struct SynthSpec {
  int count = 64;
  int resolution = 64;
  std::uint64_t seed = 0;
  LabelMap label_map;

  void validate() const {
    if (count < 1) throw ArgumentError("synth: count must be >= 1");
    if (resolution < 1) throw ArgumentError("synth: resolution must be >= 1");
    label_map.validate();
  }
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"count", s.count},
                     {"resolution", s.resolution},
                     {"seed", s.seed},
                     {"label_map", {{"slopes", s.label_map.slopes}, {"intercepts", s.label_map.intercepts}}}};
}

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  s = SynthSpec{};
  if (j.contains("count")) j.at("count").get_to(s.count);
  if (j.contains("resolution")) j.at("resolution").get_to(s.resolution);
  if (j.contains("seed")) j.at("seed").get_to(s.seed);
  if (j.contains("label_map")) {
    j.at("label_map").at("slopes").get_to(s.label_map.slopes);
    j.at("label_map").at("intercepts").get_to(s.label_map.intercepts);
  }
}

/// One image: a random background colour overlaid with 1-4 random axis-aligned rectangles.
inline RgbImage synth_image(std::size_t resolution, Rng& rng) {
  RgbImage img(resolution, resolution);
  auto colour = [&rng] {
    return std::array<std::uint8_t, 3>{static_cast<std::uint8_t>(rng.below(256)),
                                       static_cast<std::uint8_t>(rng.below(256)),
                                       static_cast<std::uint8_t>(rng.below(256))};
  };
  auto paint = [&img](std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1,
                      const std::array<std::uint8_t, 3>& c) {
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) {
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(x, y, ch) = c[ch];
      }
    }
  };
  paint(0, 0, resolution, resolution, colour());
  const std::uint64_t rects = 1 + rng.below(4);
  for (std::uint64_t r = 0; r < rects; ++r) {
    std::size_t xa = rng.below(resolution), xb = rng.below(resolution);
    std::size_t ya = rng.below(resolution), yb = rng.below(resolution);
    if (xa > xb) std::swap(xa, xb);
    if (ya > yb) std::swap(ya, yb);
    paint(xa, ya, xb + 1, yb + 1, colour());
  }
  return img;
}

/// Writes `count` PNG images, `manifest.csv` and `synth_spec.json` into `output_dir`.
/// Labels are label_map applied to each image's exact channel means. Output is a pure
/// function of the spec.
inline DatasetManifest generate(const SynthSpec& spec, const std::filesystem::path& output_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(output_dir / "images", ec);
  if (ec) throw FileError("cannot create " + (output_dir / "images").string() + ": " + ec.message());

  DatasetManifest manifest;
  manifest.base_dir = output_dir;
  Rng rng(derive_seed(spec.seed, "synth"));
  for (int i = 0; i < spec.count; ++i) {
    const RgbImage img = synth_image(static_cast<std::size_t>(spec.resolution), rng);
    char name[64];
    std::snprintf(name, sizeof(name), "images/synth_%05d.png", i);
    write_png(output_dir / name, img);
    manifest.samples.push_back({name, spec.label_map.apply(img.channel_means())});
  }

  auto write_text = [](const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot write " + path.string());
    out << text;
    if (!out) throw FileError("failed writing " + path.string());
  };
  write_text(output_dir / "manifest.csv", render_manifest(manifest));
  write_text(output_dir / "synth_spec.json", nlohmann::json(spec).dump(2) + "\n");
  return manifest;
}

}  // namespace nutripred
