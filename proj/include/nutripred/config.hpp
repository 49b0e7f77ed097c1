#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nutripred/error.hpp"

namespace nutripred {

enum class BackboneKind { vit, mae_encoder, conv_residual, tiny_test };

/// How a transformer backbone turns its token sequence into one feature vector.
enum class TokenPooling { cls, mean };

enum class HeadKind { full, compressed };

NLOHMANN_JSON_SERIALIZE_ENUM(BackboneKind, {{BackboneKind::vit, "vit"},
                                            {BackboneKind::mae_encoder, "mae_encoder"},
                                            {BackboneKind::conv_residual, "conv_residual"},
                                            {BackboneKind::tiny_test, "tiny_test"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TokenPooling, {{TokenPooling::cls, "cls"}, {TokenPooling::mean, "mean"}})
NLOHMANN_JSON_SERIALIZE_ENUM(HeadKind, {{HeadKind::full, "full"}, {HeadKind::compressed, "compressed"}})

inline std::string to_string(BackboneKind kind) { return nlohmann::json(kind).get<std::string>(); }
inline std::string to_string(HeadKind kind) { return nlohmann::json(kind).get<std::string>(); }

/// Feature extractor description. Which fields matter depends on `kind`:
///  - vit / mae_encoder: attention_heads, hidden_layers, feature_dim (= embedding width),
///    patch_size, mlp_dim, pooling; mae_encoder also carries the decoder geometry, which is only
///    used to validate pretrained weight files (the decoder never runs).
///  - conv_residual: stage_widths / stage_blocks of a basic-block residual network;
///    feature_dim must equal the last stage width.
///  - tiny_test: one strided 3x3 conv with tiny_channels filters, global pooling and a linear
///    projection to feature_dim.
struct BackboneConfig {
  BackboneKind kind = BackboneKind::vit;
  int attention_heads = 12;
  int hidden_layers = 12;
  int feature_dim = 768;
  std::optional<std::string> pretrained_weights;
  int image_size = 224;

  int patch_size = 16;
  int mlp_dim = 3072;
  TokenPooling pooling = TokenPooling::cls;
  int decoder_heads = 16;
  int decoder_layers = 8;
  int decoder_dim = 512;

  std::vector<int> stage_widths{64, 128, 256, 512};
  std::vector<int> stage_blocks{2, 2, 2, 2};

  int tiny_channels = 8;

  static BackboneConfig defaults(BackboneKind kind) {
    BackboneConfig c;
    c.kind = kind;
    switch (kind) {
      case BackboneKind::vit:
        break;
      case BackboneKind::mae_encoder:
        c.pooling = TokenPooling::mean;
        break;
      case BackboneKind::conv_residual:
        c.attention_heads = 0;
        c.hidden_layers = 0;
        c.feature_dim = 512;
        break;
      case BackboneKind::tiny_test:
        c.attention_heads = 0;
        c.hidden_layers = 0;
        c.feature_dim = 16;
        c.image_size = 64;
        break;
    }
    return c;
  }

  bool is_transformer() const { return kind == BackboneKind::vit || kind == BackboneKind::mae_encoder; }

  void validate() const {
    auto require = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("backbone: " + what);
    };
    require(feature_dim > 0, "feature_dim must be positive");
    require(image_size > 0, "image_size must be positive");
    switch (kind) {
      case BackboneKind::vit:
      case BackboneKind::mae_encoder:
        require(attention_heads > 0, "attention_heads must be positive");
        require(hidden_layers > 0, "hidden_layers must be positive");
        require(feature_dim % attention_heads == 0, "feature_dim must be divisible by attention_heads");
        require(patch_size > 0 && image_size % patch_size == 0, "image_size must be a multiple of patch_size");
        require(mlp_dim > 0, "mlp_dim must be positive");
        if (kind == BackboneKind::mae_encoder) {
          require(decoder_heads > 0 && decoder_layers > 0 && decoder_dim > 0, "decoder geometry must be positive");
          require(decoder_dim % decoder_heads == 0, "decoder_dim must be divisible by decoder_heads");
        }
        break;
      case BackboneKind::conv_residual:
        require(!stage_widths.empty(), "stage_widths must not be empty");
        require(stage_widths.size() == stage_blocks.size(), "stage_widths and stage_blocks differ in length");
        for (std::size_t i = 0; i < stage_widths.size(); ++i) {
          require(stage_widths[i] > 0 && stage_blocks[i] > 0, "stage widths/blocks must be positive");
        }
        require(feature_dim == stage_widths.back(), "feature_dim must equal the last stage width");
        break;
      case BackboneKind::tiny_test:
        require(tiny_channels > 0, "tiny_channels must be positive");
        require(image_size >= 2, "image_size must be at least 2");
        break;
    }
  }
};

/// Fully connected section between backbone features and the five scalar outputs.
///  full:       2 shared layers, then per task one hidden layer (task_width) and a linear output
///  compressed: 1 shared layer, then per task a linear output
struct HeadTopology {
  HeadKind kind = HeadKind::full;
  std::vector<int> shared_widths{4096, 4096};
  int task_width = 4096;

  static HeadTopology defaults(HeadKind kind) {
    if (kind == HeadKind::full) return {};
    return {HeadKind::compressed, {4096}, 0};
  }

  void validate() const {
    for (int w : shared_widths) {
      if (w <= 0) throw ConfigError("head: shared widths must be positive");
    }
    if (kind == HeadKind::full) {
      if (shared_widths.size() != 2) throw ConfigError("head: full topology needs exactly 2 shared widths");
      if (task_width <= 0) throw ConfigError("head: full topology needs a positive task_width");
    } else {
      if (shared_widths.size() != 1) throw ConfigError("head: compressed topology needs exactly 1 shared width");
      if (task_width != 0) throw ConfigError("head: compressed topology has no task-specific layer");
    }
  }
};

struct ModelConfig {
  BackboneConfig backbone;
  HeadTopology head;
  std::uint64_t seed = 0;

  void validate() const {
    backbone.validate();
    head.validate();
  }
};

/// Optimizer and training-loop settings. Optimizer defaults: learning rate 1e-4, squared-gradient
/// discount 0.9, epsilon 1.0, momentum 0.9, batch size 32. `weight_decay` is a true L2
/// coefficient added to the gradient and is off by default.
struct TrainConfig {
  double learning_rate = 1e-4;
  double rms_discount = 0.9;
  double epsilon = 1.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int batch_size = 32;
  int max_epochs = 100;
  int early_stop_patience = 10;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;
  std::array<double, 3> split_fractions{0.7, 0.15, 0.15};

  void validate_optimizer() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(rms_discount >= 0.0 && rms_discount < 1.0)) throw ConfigError("rms_discount must be in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (!(momentum >= 0.0)) throw ConfigError("momentum must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  }

  void validate() const {
    validate_optimizer();
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
    if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
  }
};

// JSON mapping. Missing fields keep the kind-specific defaults.

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"kind", c.kind},
                     {"attention_heads", c.attention_heads},
                     {"hidden_layers", c.hidden_layers},
                     {"feature_dim", c.feature_dim},
                     {"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"mlp_dim", c.mlp_dim},
                     {"pooling", c.pooling},
                     {"decoder_heads", c.decoder_heads},
                     {"decoder_layers", c.decoder_layers},
                     {"decoder_dim", c.decoder_dim},
                     {"stage_widths", c.stage_widths},
                     {"stage_blocks", c.stage_blocks},
                     {"tiny_channels", c.tiny_channels}};
  j["pretrained_weights"] = c.pretrained_weights ? nlohmann::json(*c.pretrained_weights) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c = BackboneConfig::defaults(j.value("kind", BackboneKind::vit));
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("attention_heads", c.attention_heads);
  get("hidden_layers", c.hidden_layers);
  get("feature_dim", c.feature_dim);
  get("image_size", c.image_size);
  get("patch_size", c.patch_size);
  get("mlp_dim", c.mlp_dim);
  get("pooling", c.pooling);
  get("decoder_heads", c.decoder_heads);
  get("decoder_layers", c.decoder_layers);
  get("decoder_dim", c.decoder_dim);
  get("stage_widths", c.stage_widths);
  get("stage_blocks", c.stage_blocks);
  get("tiny_channels", c.tiny_channels);
  if (j.contains("pretrained_weights") && !j.at("pretrained_weights").is_null()) {
    c.pretrained_weights = j.at("pretrained_weights").get<std::string>();
  }
}

inline void to_json(nlohmann::json& j, const HeadTopology& h) {
  j = nlohmann::json{{"kind", h.kind}, {"shared_widths", h.shared_widths}, {"task_width", h.task_width}};
}

inline void from_json(const nlohmann::json& j, HeadTopology& h) {
  h = HeadTopology::defaults(j.value("kind", HeadKind::full));
  if (j.contains("shared_widths")) j.at("shared_widths").get_to(h.shared_widths);
  if (j.contains("task_width")) j.at("task_width").get_to(h.task_width);
}

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = nlohmann::json{{"learning_rate", t.learning_rate},
                     {"rms_discount", t.rms_discount},
                     {"epsilon", t.epsilon},
                     {"momentum", t.momentum},
                     {"weight_decay", t.weight_decay},
                     {"batch_size", t.batch_size},
                     {"max_epochs", t.max_epochs},
                     {"early_stop_patience", t.early_stop_patience},
                     {"seed", t.seed},
                     {"freeze_backbone", t.freeze_backbone},
                     {"split_fractions", t.split_fractions}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  t = TrainConfig{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("learning_rate", t.learning_rate);
  get("rms_discount", t.rms_discount);
  get("epsilon", t.epsilon);
  get("momentum", t.momentum);
  get("weight_decay", t.weight_decay);
  get("batch_size", t.batch_size);
  get("max_epochs", t.max_epochs);
  get("early_stop_patience", t.early_stop_patience);
  get("seed", t.seed);
  get("freeze_backbone", t.freeze_backbone);
  get("split_fractions", t.split_fractions);
}

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = nlohmann::json{{"backbone", m.backbone}, {"head", m.head}, {"seed", m.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  m = ModelConfig{};
  if (j.contains("backbone")) j.at("backbone").get_to(m.backbone);
  if (j.contains("head")) j.at("head").get_to(m.head);
  if (j.contains("seed")) j.at("seed").get_to(m.seed);
}

}  // namespace nutripred
