#pragma once

#include <filesystem>
#include <limits>
#include <optional>
#include <vector>

#include <json.hpp>

#include "nutripred/config.hpp"
#include "nutripred/evaluation.hpp"
#include "nutripred/loss.hpp"
#include "nutripred/serialize.hpp"

namespace nutripred {

inline constexpr int kCheckpointVersion = 1;

struct EpochRecord {
  int epoch = 0;
  LossBreakdown train;
  EvalReport val;
  std::optional<double> seconds;  // empty when timing is disabled
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  bool empty() const { return epochs.empty(); }
  std::size_t size() const { return epochs.size(); }
};

/// One JSON object per epoch, as written to history.jsonl.
inline nlohmann::json epoch_json(const EpochRecord& r) {
  nlohmann::json train = nlohmann::json::object();
  nlohmann::json val = nlohmann::json::object();
  for (std::size_t k = 0; k < kTaskCount; ++k) {
    train[std::string(kTaskNames[k])] = r.train.per_task[k];
    val[std::string(kTaskNames[k])] = r.val.per_task_mae[k];
  }
  return {{"epoch", r.epoch},
          {"train_mae", train},
          {"train_combined_mae", r.train.total},
          {"val_mae", val},
          {"val_combined_mae", r.val.combined_mae},
          {"seconds", r.seconds ? nlohmann::json(*r.seconds) : nlohmann::json(nullptr)}};
}

inline EpochRecord epoch_from_json(const nlohmann::json& j) {
  EpochRecord r;
  j.at("epoch").get_to(r.epoch);
  for (std::size_t k = 0; k < kTaskCount; ++k) {
    j.at("train_mae").at(std::string(kTaskNames[k])).get_to(r.train.per_task[k]);
    j.at("val_mae").at(std::string(kTaskNames[k])).get_to(r.val.per_task_mae[k]);
  }
  j.at("train_combined_mae").get_to(r.train.total);
  j.at("val_combined_mae").get_to(r.val.combined_mae);
  r.val.model_label = "val";
  if (!j.at("seconds").is_null()) r.seconds = j.at("seconds").get<double>();
  return r;
}

inline std::string history_jsonl(const TrainHistory& h) {
  std::string out;
  for (const auto& r : h.epochs) out += epoch_json(r).dump() + "\n";
  return out;
}

/// Training state at the end of an epoch. `best_model_state` is only carried by "last"
/// checkpoints, so a resumed run can still return the best model seen before the interruption.
struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  int epoch = 0;
  double best_val_combined_mae = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int epochs_since_improvement = 0;
  TrainHistory history;
  std::vector<StoredArray> model_state;
  std::vector<StoredArray> optimizer_state;
  std::vector<StoredArray> best_model_state;
  nlohmann::json provenance = nlohmann::json::object();
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Container c;
  c.kind = "checkpoint";
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : ckpt.history.epochs) history.push_back(epoch_json(r));
  c.meta = {{"checkpoint_version", kCheckpointVersion},
            {"model_config", ckpt.model_config},
            {"train_config", ckpt.train_config},
            {"epoch", ckpt.epoch},
            {"best_val_combined_mae", std::isfinite(ckpt.best_val_combined_mae)
                                          ? nlohmann::json(ckpt.best_val_combined_mae)
                                          : nlohmann::json(nullptr)},
            {"best_epoch", ckpt.best_epoch},
            {"epochs_since_improvement", ckpt.epochs_since_improvement},
            {"history", history},
            {"provenance", ckpt.provenance}};
  auto add = [&c](const std::vector<StoredArray>& arrays, const std::string& prefix) {
    for (const auto& a : arrays) {
      StoredArray copy = a;
      copy.name = prefix + a.name;
      c.arrays.push_back(std::move(copy));
    }
  };
  add(ckpt.model_state, "model.");
  add(ckpt.optimizer_state, "opt.");
  add(ckpt.best_model_state, "best.");
  write_container(path, c);
}

/// Throws FileError when the file is absent and CheckpointError for anything unreadable.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path, "checkpoint", ErrorKind::checkpoint);
  Checkpoint ckpt;
  try {
    const auto& m = c.meta;
    const int version = m.at("checkpoint_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    ckpt.model_config = m.at("model_config").get<ModelConfig>();
    ckpt.train_config = m.at("train_config").get<TrainConfig>();
    m.at("epoch").get_to(ckpt.epoch);
    if (!m.at("best_val_combined_mae").is_null()) m.at("best_val_combined_mae").get_to(ckpt.best_val_combined_mae);
    m.at("best_epoch").get_to(ckpt.best_epoch);
    m.at("epochs_since_improvement").get_to(ckpt.epochs_since_improvement);
    for (const auto& r : m.at("history")) ckpt.history.epochs.push_back(epoch_from_json(r));
    if (m.contains("provenance")) ckpt.provenance = m.at("provenance");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed checkpoint metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": invalid stored config: " + e.what());
  }
  for (const auto& a : c.arrays) {
    auto strip = [&a](std::string_view prefix, std::vector<StoredArray>& dst) {
      if (!a.name.starts_with(prefix)) return false;
      StoredArray copy = a;
      copy.name = a.name.substr(prefix.size());
      dst.push_back(std::move(copy));
      return true;
    };
    if (!strip("model.", ckpt.model_state) && !strip("opt.", ckpt.optimizer_state) &&
        !strip("best.", ckpt.best_model_state)) {
      throw CheckpointError(path.string() + ": unexpected array " + a.name);
    }
  }
  return ckpt;
}

/// Rebuilds the model stored in a checkpoint. Pretrained-weight paths in the stored config are
/// ignored; the checkpoint already holds every parameter.
template <std::floating_point T = float>
std::unique_ptr<NutritionModel<T>> restore_model(const Checkpoint& ckpt) {
  ModelConfig cfg = ckpt.model_config;
  cfg.backbone.pretrained_weights.reset();
  auto model = build_model<T>(cfg);
  import_state(*model, ckpt.model_state, "", ErrorKind::checkpoint);
  return model;
}

}  // namespace nutripred
