#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>

#include <json.hpp>

#include "nutripred/checkpoint.hpp"
#include "nutripred/dataio.hpp"
#include "nutripred/evaluation.hpp"
#include "nutripred/loss.hpp"
#include "nutripred/model.hpp"
#include "nutripred/optimizer.hpp"

namespace nutripred {

struct FitOptions {
  /// When set, best.ckpt, last.ckpt and history.jsonl are written here after every epoch.
  std::optional<std::filesystem::path> output_dir;
  /// Each epoch's JSON line is also written here.
  std::ostream* log = nullptr;
  /// Wall-clock seconds per epoch. Off makes the history a pure function of the inputs.
  bool record_timing = true;
  std::size_t workers = 1;
  /// Continue from this state (normally a last.ckpt) instead of starting fresh.
  const Checkpoint* resume = nullptr;
  nlohmann::json provenance = nlohmann::json::object();
};

struct FitResult {
  TrainHistory history;
  Checkpoint best;
  Checkpoint last;
  bool stopped_early = false;
};

/// Trains `model` in place and leaves it holding the parameters with the lowest validation
/// combined MAE. A manifest without split assignments is split with
/// `config.split_fractions` and `config.seed` first.
template <std::floating_point T>
FitResult fit(NutritionModel<T>& model, const DatasetManifest& input, const TrainConfig& config,
              const FitOptions& options = {}) {
  config.validate();
  const DatasetManifest manifest =
      input.split_assignment ? input : split_dataset(input, config.split_fractions, config.seed);
  const auto train_idx = manifest.indices(Split::train);
  const auto val_idx = manifest.indices(Split::val);
  if (train_idx.empty()) throw EmptySplitError("empty split: train");
  if (val_idx.empty()) throw EmptySplitError("empty split: val");

  ImageLoader<T> loader(manifest, static_cast<int>(model.image_size()), options.workers, true);
  const bool train_backbone = !config.freeze_backbone;
  RmsProp<T> optimizer(config, model.trainable(train_backbone ? ParamScope::all : ParamScope::head_only));

  FitResult result;
  Checkpoint state;
  state.model_config = model.config();
  state.train_config = config;
  state.provenance = options.provenance;

  if (options.resume) {
    const Checkpoint& r = *options.resume;
    if (nlohmann::json(r.model_config) != nlohmann::json(model.config())) {
      throw CheckpointError("resume checkpoint was written for a different model configuration");
    }
    import_state(model, r.model_state, "", ErrorKind::checkpoint);
    optimizer.import_state(r.optimizer_state, "");
    state.epoch = r.epoch;
    state.best_val_combined_mae = r.best_val_combined_mae;
    state.best_epoch = r.best_epoch;
    state.epochs_since_improvement = r.epochs_since_improvement;
    state.history = r.history;
    state.best_model_state = r.best_model_state.empty() ? r.model_state : r.best_model_state;
  }

  // Snapshot used as the "best" result until validation improves at least once.
  result.best = state;
  result.best.model_state = state.best_model_state.empty() ? export_state(model) : state.best_model_state;
  result.best.best_model_state.clear();
  if (!options.resume) result.best.optimizer_state = optimizer.export_state("");

  if (options.output_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*options.output_dir, ec);
    if (ec) throw FileError("cannot create " + options.output_dir->string() + ": " + ec.message());
  }

  for (int epoch = state.epoch + 1; epoch <= config.max_epochs; ++epoch) {
    if (state.epochs_since_improvement >= config.early_stop_patience) {
      result.stopped_early = true;
      break;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto plan = plan_batches(train_idx, config.batch_size, true, config.seed, static_cast<std::uint64_t>(epoch));
    TaskArray sums{};
    std::size_t seen = 0;
    int step = 0;
    for (const auto& chunk : plan) {
      const Batch<T> batch = loader.load(chunk);
      const Tensor<T> pred = model.forward_train(batch.images);
      const LossBreakdown loss = multitask_loss(batch.targets, pred);
      if (!std::isfinite(loss.total)) {
        throw DivergenceError(epoch, step,
                              "non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      }
      model.zero_grad();
      model.backward(loss_gradient(batch.targets, pred), train_backbone);
      optimizer.step();
      for (std::size_t k = 0; k < kTaskCount; ++k) sums[k] += loss.per_task[k] * static_cast<double>(chunk.size());
      seen += chunk.size();
      ++step;
    }

    EpochRecord record;
    record.epoch = epoch;
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      record.train.per_task[k] = sums[k] / static_cast<double>(seen);
      record.train.total += record.train.per_task[k];
    }
    record.val = evaluate(model, loader, val_idx, config.batch_size, "val");
    if (!std::isfinite(record.val.combined_mae)) {
      throw DivergenceError(epoch, step, "non-finite validation MAE at epoch " + std::to_string(epoch));
    }
    if (options.record_timing) {
      record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    state.history.epochs.push_back(record);
    if (options.log) *options.log << epoch_json(record).dump() << '\n' << std::flush;

    const bool improved = record.val.combined_mae < state.best_val_combined_mae;
    state.epoch = epoch;
    state.model_state = export_state(model);
    state.optimizer_state = optimizer.export_state("");
    if (improved) {
      state.best_val_combined_mae = record.val.combined_mae;
      state.best_epoch = epoch;
      state.epochs_since_improvement = 0;
      state.best_model_state = state.model_state;
      result.best = state;
      result.best.best_model_state.clear();
    } else {
      ++state.epochs_since_improvement;
    }

    if (options.output_dir) {
      save_checkpoint(state, *options.output_dir / "last.ckpt");
      if (improved) save_checkpoint(result.best, *options.output_dir / "best.ckpt");
      const auto log_path = *options.output_dir / "history.jsonl";
      auto tmp = log_path;
      tmp += ".tmp";
      {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << history_jsonl(state.history);
        if (!out) throw FileError("failed writing " + tmp.string());
      }
      std::filesystem::rename(tmp, log_path);
    }
  }
  if (!result.stopped_early && state.epochs_since_improvement >= config.early_stop_patience &&
      state.epoch < config.max_epochs) {
    result.stopped_early = true;
  }

  if (options.output_dir && state.history.empty() && !std::filesystem::exists(*options.output_dir / "best.ckpt")) {
    save_checkpoint(result.best, *options.output_dir / "best.ckpt");
  }
  import_state(model, result.best.model_state, "", ErrorKind::checkpoint);
  result.history = state.history;
  result.last = std::move(state);
  return result;
}

}  // namespace nutripred
