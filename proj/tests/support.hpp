#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

#include <gtest/gtest.h>

#include "nutripred/nutripred.hpp"

namespace testing_support {

/// Directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("nutripred_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename T>
nutripred::Tensor<T> random_tensor(nutripred::Shape shape, nutripred::Rng& rng, double lo = -1.0, double hi = 1.0) {
  nutripred::Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares d/dv of `loss()` against `analytic` for up to `samples` entries of `v`,
/// using central differences with step h.
inline void expect_grad_matches(const std::string& what, nutripred::Tensor<double>& v,
                                const nutripred::Tensor<double>& analytic, const std::function<double()>& loss,
                                nutripred::Rng& rng, std::size_t samples = 12, double h = 1e-6, double tol = 1e-4) {
  ASSERT_EQ(v.shape(), analytic.shape()) << what;
  const std::size_t n = v.size();
  for (std::size_t s = 0; s < std::min(samples, n); ++s) {
    const std::size_t i = samples >= n ? s : static_cast<std::size_t>(rng.below(n));
    const double saved = v[i];
    v[i] = saved + h;
    const double up = loss();
    v[i] = saved - h;
    const double down = loss();
    v[i] = saved;
    const double numeric = (up - down) / (2 * h);
    EXPECT_LT(rel_err(analytic[i], numeric, 1e-5), tol)
        << what << "[" << i << "] analytic " << analytic[i] << " numeric " << numeric;
  }
}

inline double dot(const nutripred::Tensor<double>& a, const nutripred::Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}


/// Small tiny-backbone model for fast training tests.
inline nutripred::ModelConfig tiny_config(nutripred::HeadKind head = nutripred::HeadKind::compressed,
                                          int image_size = 16, std::uint64_t seed = 0) {
  using namespace nutripred;
  ModelConfig mc;
  mc.backbone = BackboneConfig::defaults(BackboneKind::tiny_test);
  mc.backbone.image_size = image_size;
  mc.backbone.feature_dim = 16;
  mc.head = HeadTopology::defaults(head);
  if (head == HeadKind::full) {
    mc.head.shared_widths = {32, 32};
    mc.head.task_width = 16;
  } else {
    mc.head.shared_widths = {32};
  }
  mc.seed = seed;
  return mc;
}

/// Synthetic dataset written under `dir`.
inline nutripred::DatasetManifest synth_dataset(const std::filesystem::path& dir, int count, int resolution = 16,
                                                std::uint64_t seed = 0) {
  nutripred::SynthSpec spec;
  spec.count = count;
  spec.resolution = resolution;
  spec.seed = seed;
  return nutripred::generate(spec, dir);
}

}  // namespace testing_support
