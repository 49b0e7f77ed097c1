#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>

#include "nutripred/error.hpp"

namespace nutripred {

inline constexpr std::size_t kTaskCount = 5;

/// Regression targets in their fixed column order.
enum class Task : std::size_t { calories = 0, mass, protein, fat, carbohydrates };

inline constexpr std::array<std::string_view, kTaskCount> kTaskNames{"calories", "mass", "protein", "fat",
                                                                     "carbohydrates"};
inline constexpr std::array<std::string_view, kTaskCount> kTaskUnits{"kcal", "g", "g", "g", "g"};
/// Column headings used by comparison tables.
inline constexpr std::array<std::string_view, kTaskCount> kTaskHeadings{"Calorie (kcal)", "Mass (g)", "Protein (g)",
                                                                        "Fat (g)", "Carb (g)"};

using TaskArray = std::array<double, kTaskCount>;

/// Calories (kcal), mass, protein, fat and carbohydrates (g). Always finite and non-negative.
class NutrientVector {
 public:
  NutrientVector() = default;

  explicit NutrientVector(const TaskArray& values) : values_(values) {
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      if (!std::isfinite(values_[k])) {
        throw ArgumentError("non-finite " + std::string(kTaskNames[k]));
      }
      if (values_[k] < 0.0) {
        throw ArgumentError("negative " + std::string(kTaskNames[k]));
      }
    }
  }

  NutrientVector(double calories, double mass, double protein, double fat, double carbohydrates)
      : NutrientVector(TaskArray{calories, mass, protein, fat, carbohydrates}) {}

  double calories() const { return values_[0]; }
  double mass() const { return values_[1]; }
  double protein() const { return values_[2]; }
  double fat() const { return values_[3]; }
  double carbohydrates() const { return values_[4]; }

  double operator[](std::size_t k) const { return values_.at(k); }
  double operator[](Task t) const { return values_[static_cast<std::size_t>(t)]; }
  const TaskArray& values() const { return values_; }

  bool operator==(const NutrientVector&) const = default;

 private:
  TaskArray values_{};
};

}  // namespace nutripred
