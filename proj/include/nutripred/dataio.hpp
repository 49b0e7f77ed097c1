#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "nutripred/image.hpp"
#include "nutripred/nutrients.hpp"
#include "nutripred/rng.hpp"

namespace nutripred {

inline constexpr std::array<std::string_view, 6> kManifestColumns{"image_path", "calories_kcal", "mass_g",
                                                                  "protein_g",  "fat_g",         "carb_g"};

enum class Split { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ArgumentError("unknown split '" + std::string(s) + "'");
}

struct Sample {
  std::string image_ref;
  NutrientVector label;

  bool operator==(const Sample&) const = default;
};

struct DatasetManifest {
  std::vector<Sample> samples;
  std::optional<std::vector<Split>> split_assignment;
  /// Relative image references resolve against this directory.
  std::filesystem::path base_dir;

  std::size_t size() const { return samples.size(); }

  std::filesystem::path resolve(const Sample& s) const {
    std::filesystem::path p(s.image_ref);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  }

  /// Sample indices of one split, in manifest order.
  std::vector<std::size_t> indices(Split split) const {
    if (!split_assignment) throw ArgumentError("manifest has no split assignment");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if ((*split_assignment)[i] == split) out.push_back(i);
    }
    return out;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> out(samples.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
  }
};

// --- CSV --------------------------------------------------------------------

namespace detail {

/// Splits one CSV record; supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// Shortest decimal text that parses back to exactly `v`, in plain notation unless that would
/// be long (0.0001 rather than 1e-04).
inline std::string format_real(double v) {
  char buf[400];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  if (res.ec == std::errc{} && res.ptr - buf <= 18) return std::string(buf, res.ptr);
  res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// Parses a manifest CSV with header `image_path,calories_kcal,mass_g,protein_g,fat_g,carb_g`.
/// Line numbers in errors count the header as line 1.
inline DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {}) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::unordered_set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
    if (!have_header) {
      const auto cols = detail::split_csv_line(line);
      for (std::size_t i = 0; i < kManifestColumns.size(); ++i) {
        if (i >= cols.size()) throw FormatError("manifest header: missing column " + std::string(kManifestColumns[i]));
        if (detail::trim(cols[i]) != kManifestColumns[i]) {
          throw FormatError("manifest header: column " + std::to_string(i + 1) + " must be " +
                            std::string(kManifestColumns[i]) + ", found '" + cols[i] + "'");
        }
      }
      if (cols.size() > kManifestColumns.size()) {
        throw FormatError("manifest header: unexpected column '" + cols[kManifestColumns.size()] + "'");
      }
      have_header = true;
      continue;
    }
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != kManifestColumns.size()) {
      throw RowError("expected 6 fields at line " + std::to_string(line_no) + ", found " +
                     std::to_string(fields.size()));
    }
    const std::string ref = detail::trim(fields[0]);
    if (ref.empty()) throw RowError("empty image_path at line " + std::to_string(line_no));
    TaskArray values{};
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      const std::string text = detail::trim(fields[k + 1]);
      double v = 0.0;
      const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
      if (text.empty() || res.ec != std::errc{} || res.ptr != text.data() + text.size() || !std::isfinite(v)) {
        throw RowError("non-numeric " + std::string(kManifestColumns[k + 1]) + " '" + text + "' at line " +
                       std::to_string(line_no));
      }
      if (v < 0.0) {
        throw RowError("negative nutrient at line " + std::to_string(line_no) + " (" +
                       std::string(kManifestColumns[k + 1]) + ")");
      }
      values[k] = v;
    }
    if (!seen.insert(ref).second) {
      throw DuplicateError("duplicate image_path '" + ref + "' at line " + std::to_string(line_no));
    }
    m.samples.push_back({ref, NutrientVector(values)});
  }
  if (!have_header) throw FormatError("manifest header: missing column image_path");
  return m;
}

inline DatasetManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir = {}) {
  std::istringstream in{std::string(text)};
  return parse_manifest(in, base_dir);
}

/// Reads a manifest file; relative image paths resolve against its directory.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

/// Renders the manifest as CSV. Values use the shortest round-trip representation.
inline std::string render_manifest(const DatasetManifest& m) {
  std::string out;
  for (std::size_t i = 0; i < kManifestColumns.size(); ++i) {
    if (i) out += ',';
    out += kManifestColumns[i];
  }
  out += '\n';
  for (const auto& s : m.samples) {
    out += detail::csv_field(s.image_ref);
    for (double v : s.label.values()) {
      out += ',';
      out += format_real(v);
    }
    out += '\n';
  }
  return out;
}

// --- splitting --------------------------------------------------------------

/// Split sizes by largest-remainder apportionment: each split gets floor(n * f), the leftover
/// samples go one each to the splits with the largest fractional parts, ties resolved in the
/// order train, val, test.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& fractions) {
  double sum = 0.0;
  for (double f : fractions) {
    if (!std::isfinite(f) || f < 0.0) throw ArgumentError("split fractions must be finite and non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ArgumentError("split fractions must sum to 1, got " + format_real(sum));
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double quota = static_cast<double>(n) * fractions[i];
    sizes[i] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    rem[i] = quota - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b] + 1e-9; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++sizes[order[r % 3]];
  return sizes;
}

/// Seeded shuffle, then the first sizes[0] samples go to train, the next sizes[1] to val,
/// the rest to test.
inline DatasetManifest split_dataset(DatasetManifest manifest, const std::array<double, 3>& fractions,
                                     std::uint64_t seed) {
  const auto sizes = split_sizes(manifest.size(), fractions);
  std::vector<std::size_t> order = manifest.all_indices();
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order.begin(), order.end());
  std::vector<Split> assignment(manifest.size(), Split::test);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    assignment[order[pos]] = pos < sizes[0] ? Split::train : (pos < sizes[0] + sizes[1] ? Split::val : Split::test);
  }
  manifest.split_assignment = std::move(assignment);
  return manifest;
}

// --- batching ---------------------------------------------------------------

/// Partitions `indices` into consecutive batches; with `shuffle` the order is first permuted by a
/// generator seeded from (seed, epoch).
inline std::vector<std::vector<std::size_t>> plan_batches(std::vector<std::size_t> indices, std::size_t batch_size,
                                                          bool shuffle, std::uint64_t seed, std::uint64_t epoch = 0) {
  if (indices.empty()) throw EmptySplitError("empty split");
  if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  if (shuffle) {
    Rng rng(derive_seed(seed, "batches", epoch));
    rng.shuffle(indices.begin(), indices.end());
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(i),
                     indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), i + batch_size)));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> plan_batches(const DatasetManifest& manifest, Split split,
                                                          std::size_t batch_size, bool shuffle, std::uint64_t seed,
                                                          std::uint64_t epoch = 0) {
  auto idx = manifest.indices(split);
  if (idx.empty()) throw EmptySplitError("empty split: " + std::string(to_string(split)));
  return plan_batches(std::move(idx), batch_size, shuffle, seed, epoch);
}

template <std::floating_point T>
struct Batch {
  Tensor<T> images;   // (B, 3, R, R)
  Tensor<T> targets;  // (B, 5)
  std::vector<std::size_t> sample_indices;

  std::size_t size() const { return sample_indices.size(); }
};

/// Loads and preprocesses manifest images into batches. Decoding may use several worker
/// threads; each image lands in the slot of its batch position, so output never depends on
/// the worker count. Decoded tensors are memoized when `cache` is set.
template <std::floating_point T>
class ImageLoader {
 public:
  ImageLoader(const DatasetManifest& manifest, int resolution, std::size_t workers = 1, bool cache = true)
      : manifest_(&manifest), resolution_(resolution), workers_(std::max<std::size_t>(1, workers)), cache_(cache) {
    if (resolution <= 0) throw ArgumentError("resolution must be positive");
  }

  int resolution() const { return resolution_; }

  Batch<T> load(std::span<const std::size_t> indices) {
    const auto r = static_cast<std::size_t>(resolution_);
    const std::size_t plane = 3 * r * r;
    Batch<T> batch{Tensor<T>({indices.size(), 3, r, r}), Tensor<T>({indices.size(), kTaskCount}),
                   std::vector<std::size_t>(indices.begin(), indices.end())};
    auto fill = [&](std::size_t pos) {
      const Tensor<T> img = pixels(indices[pos]);
      std::copy(img.data(), img.data() + plane, batch.images.data() + pos * plane);
    };
    const std::size_t threads = std::min(workers_, indices.size());
    if (threads <= 1) {
      for (std::size_t pos = 0; pos < indices.size(); ++pos) fill(pos);
    } else {
      std::vector<std::exception_ptr> errors(threads);
      {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
          pool.emplace_back([&, t] {
            try {
              for (std::size_t pos = t; pos < indices.size(); pos += threads) fill(pos);
            } catch (...) {
              errors[t] = std::current_exception();
            }
          });
        }
      }
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }
    for (std::size_t pos = 0; pos < indices.size(); ++pos) {
      const auto& label = manifest_->samples.at(indices[pos]).label;
      for (std::size_t k = 0; k < kTaskCount; ++k) batch.targets(pos, k) = static_cast<T>(label[k]);
    }
    return batch;
  }

 private:
  Tensor<T> pixels(std::size_t index) {
    if (cache_) {
      std::lock_guard lock(mutex_);
      if (auto it = memo_.find(index); it != memo_.end()) return it->second;
    }
    Tensor<T> img = load_image<T>(manifest_->resolve(manifest_->samples.at(index)), resolution_).pixels;
    if (cache_) {
      std::lock_guard lock(mutex_);
      memo_.emplace(index, img);
    }
    return img;
  }

  const DatasetManifest* manifest_;
  int resolution_;
  std::size_t workers_;
  bool cache_;
  std::mutex mutex_;
  std::unordered_map<std::size_t, Tensor<T>> memo_;
};

/// Materializes every batch of one split for one epoch.
template <std::floating_point T = float>
std::vector<Batch<T>> batches(const DatasetManifest& manifest, Split split, std::size_t batch_size, bool shuffle,
                              std::uint64_t seed, int resolution, std::uint64_t epoch = 0, std::size_t workers = 1) {
  ImageLoader<T> loader(manifest, resolution, workers, false);
  std::vector<Batch<T>> out;
  for (const auto& idx : plan_batches(manifest, split, batch_size, shuffle, seed, epoch)) out.push_back(loader.load(idx));
  return out;
}

}  // namespace nutripred
