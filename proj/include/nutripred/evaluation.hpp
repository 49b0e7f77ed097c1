#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nutripred/dataio.hpp"
#include "nutripred/model.hpp"
#include "nutripred/nutrients.hpp"

namespace nutripred {

struct EvalReport {
  std::string model_label;
  TaskArray per_task_mae{};
  double combined_mae = 0.0;
  std::size_t sample_count = 0;
};

/// Plain sum of the five per-task MAEs.
inline double combined_mae(const TaskArray& per_task) {
  double total = 0.0;
  for (std::size_t k = 0; k < kTaskCount; ++k) {
    if (!std::isfinite(per_task[k]) || per_task[k] < 0.0) {
      throw ArgumentError("combined_mae: " + std::string(kTaskNames[k]) + " must be finite and non-negative");
    }
    total += per_task[k];
  }
  return total;
}

/// 100 * (baseline - candidate) / baseline.
inline double improvement_percent(double baseline, double candidate) {
  if (!(baseline > 0.0) || !std::isfinite(baseline)) throw ArgumentError("improvement_percent: baseline must be > 0");
  return 100.0 * (baseline - candidate) / baseline;
}

/// Sample-weighted absolute-error sums. Adding samples in a fixed order gives a fixed result.
class MaeAccumulator {
 public:
  template <std::floating_point T>
  void add(std::span<const T> target, std::span<const T> prediction) {
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      sums_[k] += std::abs(static_cast<double>(target[k]) - static_cast<double>(prediction[k]));
    }
    ++count_;
  }

  std::size_t count() const { return count_; }

  EvalReport report(std::string label) const {
    if (count_ == 0) throw EmptySplitError("empty split");
    EvalReport r{std::move(label), {}, 0.0, count_};
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      r.per_task_mae[k] = sums_[k] / static_cast<double>(count_);
      r.combined_mae += r.per_task_mae[k];
    }
    return r;
  }

 private:
  TaskArray sums_{};
  std::size_t count_ = 0;
};

/// Per-task MAE over `indices` in one pass (not a mean of batch means), so the result does
/// not depend on `batch_size`.
template <std::floating_point T>
EvalReport evaluate(const NutritionModel<T>& model, ImageLoader<T>& loader, std::span<const std::size_t> indices,
                    std::size_t batch_size, std::string label = {}) {
  if (indices.empty()) throw EmptySplitError("empty split");
  if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  MaeAccumulator acc;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    const Batch<T> batch = loader.load(chunk);
    const Tensor<T> pred = model.predict(batch.images);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      acc.add<T>({batch.targets.data() + i * kTaskCount, kTaskCount}, {pred.data() + i * kTaskCount, kTaskCount});
    }
  }
  return acc.report(std::move(label));
}

template <std::floating_point T>
EvalReport evaluate(const NutritionModel<T>& model, const DatasetManifest& manifest, Split split,
                    std::size_t batch_size = 32, std::string label = {}, std::size_t workers = 1) {
  const auto idx = manifest.indices(split);
  if (idx.empty()) throw EmptySplitError("empty split: " + std::string(to_string(split)));
  ImageLoader<T> loader(manifest, model.config().backbone.image_size, workers, false);
  return evaluate(model, loader, idx, batch_size, std::move(label));
}

// --- reporting ---------------------------------------------------------------

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json per_task = nlohmann::json::object();
  for (std::size_t k = 0; k < kTaskCount; ++k) per_task[std::string(kTaskNames[k])] = r.per_task_mae[k];
  j = nlohmann::json{{"model_label", r.model_label},
                     {"per_task_mae", per_task},
                     {"combined_mae", r.combined_mae},
                     {"sample_count", r.sample_count}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("model_label").get_to(r.model_label);
  for (std::size_t k = 0; k < kTaskCount; ++k) {
    j.at("per_task_mae").at(std::string(kTaskNames[k])).get_to(r.per_task_mae[k]);
  }
  j.at("combined_mae").get_to(r.combined_mae);
  j.at("sample_count").get_to(r.sample_count);
}

enum class TableFormat { text, csv, markdown };

inline constexpr std::size_t kTableColumns = kTaskCount + 1;  // five tasks + combined

inline std::array<double, kTableColumns> table_row(const EvalReport& r) {
  std::array<double, kTableColumns> row{};
  std::copy(r.per_task_mae.begin(), r.per_task_mae.end(), row.begin());
  row[kTaskCount] = r.combined_mae;
  return row;
}

/// best[i][c] is true when report i holds the minimum of column c (ties all marked).
inline std::vector<std::array<bool, kTableColumns>> best_markers(std::span<const EvalReport> reports) {
  std::array<double, kTableColumns> minima;
  minima.fill(std::numeric_limits<double>::infinity());
  for (const auto& r : reports) {
    const auto row = table_row(r);
    for (std::size_t c = 0; c < kTableColumns; ++c) minima[c] = std::min(minima[c], row[c]);
  }
  std::vector<std::array<bool, kTableColumns>> out;
  for (const auto& r : reports) {
    const auto row = table_row(r);
    std::array<bool, kTableColumns> marks{};
    for (std::size_t c = 0; c < kTableColumns; ++c) marks[c] = row[c] == minima[c];
    out.push_back(marks);
  }
  return out;
}

inline std::string format_fixed1(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

/// One row per report in the order given; columns are the five tasks then Combined.
/// text: fixed-width, best cells suffixed with '*'. markdown: best cells in bold. Both use one
/// decimal place. csv: full precision plus a `best` column naming the winning columns.
inline std::string render_table(std::span<const EvalReport> reports, TableFormat format) {
  if (reports.empty()) throw ArgumentError("render_table: no reports");
  const auto best = best_markers(reports);
  std::vector<std::string> headings{"Model"};
  for (auto h : kTaskHeadings) headings.emplace_back(h);
  headings.emplace_back("Combined");
  std::string out;

  if (format == TableFormat::csv) {
    out += "model";
    for (auto n : kTaskNames) out += "," + std::string(n);
    out += ",combined,best\n";
    for (std::size_t i = 0; i < reports.size(); ++i) {
      out += detail::csv_field(reports[i].model_label);
      const auto row = table_row(reports[i]);
      std::string marks;
      for (std::size_t c = 0; c < kTableColumns; ++c) {
        out += "," + format_real(row[c]);
        if (best[i][c]) {
          if (!marks.empty()) marks += ";";
          marks += c < kTaskCount ? std::string(kTaskNames[c]) : "combined";
        }
      }
      out += "," + marks + "\n";
    }
    return out;
  }

  std::vector<std::vector<std::string>> cells;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    std::vector<std::string> line{reports[i].model_label};
    const auto row = table_row(reports[i]);
    for (std::size_t c = 0; c < kTableColumns; ++c) {
      const std::string v = format_fixed1(row[c]);
      if (format == TableFormat::markdown) {
        line.push_back(best[i][c] ? "**" + v + "**" : v);
      } else {
        line.push_back(best[i][c] ? v + "*" : v);
      }
    }
    cells.push_back(std::move(line));
  }

  if (format == TableFormat::markdown) {
    auto emit = [&](const std::vector<std::string>& line) {
      out += "|";
      for (const auto& c : line) out += " " + c + " |";
      out += "\n";
    };
    emit(headings);
    out += "|---|";
    for (std::size_t c = 0; c < kTableColumns; ++c) out += "---:|";
    out += "\n";
    for (const auto& line : cells) emit(line);
    return out;
  }

  std::vector<std::size_t> widths(headings.size());
  for (std::size_t c = 0; c < headings.size(); ++c) {
    widths[c] = headings[c].size();
    for (const auto& line : cells) widths[c] = std::max(widths[c], line[c].size());
  }
  auto emit = [&](const std::vector<std::string>& line) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      if (c) out += "  ";
      const std::string pad(widths[c] - line[c].size(), ' ');
      out += c == 0 ? line[c] + pad : pad + line[c];
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += "\n";
  };
  emit(headings);
  for (const auto& line : cells) emit(line);
  return out;
}

}  // namespace nutripred
