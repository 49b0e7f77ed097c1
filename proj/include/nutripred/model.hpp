#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nutripred/backbone.hpp"
#include "nutripred/config.hpp"
#include "nutripred/nutrients.hpp"

namespace nutripred {

/// Shared fully connected layers followed by one regression branch per task.
template <std::floating_point T>
class RegressionHead {
 public:
  RegressionHead(const HeadTopology& topology, std::size_t feature_dim, Rng& rng) : topology_(topology) {
    std::size_t in = feature_dim;
    for (int w : topology.shared_widths) {
      shared_.emplace_back(in, static_cast<std::size_t>(w));
      shared_.back().init(rng);
      in = static_cast<std::size_t>(w);
    }
    shared_relu_.resize(shared_.size());
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      Branch& br = branches_[k];
      if (topology.kind == HeadKind::full) {
        br.hidden = nn::Linear<T>(in, static_cast<std::size_t>(topology.task_width));
        br.hidden->init(rng);
        br.out = nn::Linear<T>(static_cast<std::size_t>(topology.task_width), 1);
      } else {
        br.out = nn::Linear<T>(in, 1);
      }
      br.out.init(rng);
    }
  }

  const HeadTopology& topology() const { return topology_; }

  Tensor<T> infer(const Tensor<T>& features) const {
    Tensor<T> h = features;
    for (const auto& layer : shared_) h = nn::ReLU<T>::infer(layer.infer(h));
    const std::size_t batch = h.dim(0);
    Tensor<T> out({batch, kTaskCount});
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      const Branch& br = branches_[k];
      Tensor<T> y = br.hidden ? br.out.infer(nn::ReLU<T>::infer(br.hidden->infer(h))) : br.out.infer(h);
      for (std::size_t b = 0; b < batch; ++b) out(b, k) = y[b];
    }
    return out;
  }

  Tensor<T> forward(const Tensor<T>& features) {
    Tensor<T> h = features;
    for (std::size_t i = 0; i < shared_.size(); ++i) h = shared_relu_[i].forward(shared_[i].forward(h));
    const std::size_t batch = h.dim(0);
    Tensor<T> out({batch, kTaskCount});
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      Branch& br = branches_[k];
      Tensor<T> y = br.hidden ? br.out.forward(br.relu.forward(br.hidden->forward(h))) : br.out.forward(h);
      for (std::size_t b = 0; b < batch; ++b) out(b, k) = y[b];
    }
    return out;
  }

  /// Returns the gradient with respect to the features.
  Tensor<T> backward(const Tensor<T>& dpred) {
    const std::size_t batch = dpred.dim(0);
    const std::size_t width = static_cast<std::size_t>(topology_.shared_widths.back());
    Tensor<T> dh({batch, width});
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      Branch& br = branches_[k];
      Tensor<T> dy({batch, 1});
      for (std::size_t b = 0; b < batch; ++b) dy[b] = dpred(b, k);
      Tensor<T> g = br.out.backward(dy);
      if (br.hidden) g = br.hidden->backward(br.relu.backward(g));
      dh += g;
    }
    for (std::size_t i = shared_.size(); i-- > 0;) dh = shared_[i].backward(shared_relu_[i].backward(dh));
    return dh;
  }

  void collect(const std::string& prefix, nn::StateList<T>& out) {
    for (std::size_t i = 0; i < shared_.size(); ++i) {
      shared_[i].collect(nn::join_name(prefix, "shared." + std::to_string(i)), out);
    }
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      const std::string base = nn::join_name(prefix, std::string(kTaskNames[k]));
      if (branches_[k].hidden) branches_[k].hidden->collect(nn::join_name(base, "hidden"), out);
      branches_[k].out.collect(nn::join_name(base, "out"), out);
    }
  }

 private:
  struct Branch {
    std::optional<nn::Linear<T>> hidden;
    nn::ReLU<T> relu;
    nn::Linear<T> out;
  };

  HeadTopology topology_;
  std::vector<nn::Linear<T>> shared_;
  std::vector<nn::ReLU<T>> shared_relu_;
  std::array<Branch, kTaskCount> branches_;
};

enum class ParamScope { all, head_only, backbone_only };

/// Backbone + regression head. Forward output is always (B, 5) in task order.
template <std::floating_point T>
class NutritionModel {
 public:
  explicit NutritionModel(const ModelConfig& config) : config_(config) {
    config.validate();
    backbone_ = build_backbone<T>(config.backbone, config.seed);
    Rng rng(derive_seed(config.seed, "head"));
    head_ = std::make_unique<RegressionHead<T>>(config.head, backbone_->feature_dim(), rng);
    for (auto& ref : trainable()) {
      (ref.name.starts_with("head.") ? head_params_ : backbone_params_) += ref.value->size();
    }
  }

  const ModelConfig& config() const { return config_; }
  FeatureExtractor<T>& backbone() { return *backbone_; }
  const FeatureExtractor<T>& backbone() const { return *backbone_; }
  RegressionHead<T>& head() { return *head_; }

  std::size_t image_size() const { return static_cast<std::size_t>(config_.backbone.image_size); }

  /// Evaluation-mode forward pass; does not modify the model.
  Tensor<T> predict(const Tensor<T>& images) const {
    check_images(images);
    return head_->infer(backbone_->infer(images));
  }

  /// Training forward pass; caches activations for backward().
  Tensor<T> forward_train(const Tensor<T>& images) {
    check_images(images);
    return head_->forward(backbone_->forward(images));
  }

  /// Accumulates gradients of the loss given dL/dpredictions. With `train_backbone` false the
  /// backbone receives no gradient.
  void backward(const Tensor<T>& dpred, bool train_backbone = true) {
    Tensor<T> dfeat = head_->backward(dpred);
    if (train_backbone) backbone_->backward(dfeat);
  }

  /// All named state (parameters and buffers) in a fixed order: backbone first, then head.
  nn::StateList<T> state() {
    nn::StateList<T> out;
    backbone_->collect("backbone", out);
    head_->collect("head", out);
    return out;
  }

  nn::StateList<T> trainable(ParamScope scope = ParamScope::all) {
    nn::StateList<T> out;
    for (auto& ref : state()) {
      if (ref.trainable() && in_scope(ref.name, scope)) out.push_back(ref);
    }
    return out;
  }

  void zero_grad() {
    for (auto& ref : state()) {
      if (ref.param) ref.param->zero_grad();
    }
  }

  /// Number of trainable scalars (buffers excluded).
  std::size_t parameter_count(ParamScope scope = ParamScope::all) const {
    switch (scope) {
      case ParamScope::head_only: return head_params_;
      case ParamScope::backbone_only: return backbone_params_;
      case ParamScope::all: break;
    }
    return head_params_ + backbone_params_;
  }

 private:
  static bool in_scope(const std::string& name, ParamScope scope) {
    switch (scope) {
      case ParamScope::all: return true;
      case ParamScope::head_only: return name.starts_with("head.");
      case ParamScope::backbone_only: return name.starts_with("backbone.");
    }
    return false;
  }

  void check_images(const Tensor<T>& images) const {
    const std::size_t r = image_size();
    if (images.rank() != 4 || images.dim(0) == 0 || images.dim(1) != 3 || images.dim(2) != r || images.dim(3) != r) {
      throw ShapeError("expected images (B,3," + std::to_string(r) + "," + std::to_string(r) + ") with B>=1, got " +
                       shape_string(images.shape()));
    }
  }

  ModelConfig config_;
  std::unique_ptr<FeatureExtractor<T>> backbone_;
  std::unique_ptr<RegressionHead<T>> head_;
  std::size_t head_params_ = 0;
  std::size_t backbone_params_ = 0;
};

template <std::floating_point T = float>
std::unique_ptr<NutritionModel<T>> build_model(const ModelConfig& config) {
  return std::make_unique<NutritionModel<T>>(config);
}

template <std::floating_point T>
Tensor<T> forward(const NutritionModel<T>& model, const Tensor<T>& images) {
  return model.predict(images);
}

template <std::floating_point T>
std::size_t parameter_count(const NutritionModel<T>& model, ParamScope scope) {
  return model.parameter_count(scope);
}

// --- state transfer -----------------------------------------------------------

template <std::floating_point T>
std::vector<StoredArray> export_state(NutritionModel<T>& model, const std::string& prefix = "") {
  std::vector<StoredArray> arrays;
  for (auto& ref : model.state()) arrays.push_back(StoredArray::from_tensor(prefix + ref.name, *ref.value));
  return arrays;
}

/// Replaces all model state from `arrays` (names optionally prefixed). All-or-nothing: shapes
/// are checked for every entry before anything is written.
template <std::floating_point T>
void import_state(NutritionModel<T>& model, std::span<const StoredArray> arrays, const std::string& prefix,
                  ErrorKind on_mismatch) {
  auto state = model.state();
  std::vector<std::string> problems;
  for (auto& ref : state) {
    const StoredArray* a = find_array(arrays, prefix + ref.name);
    if (!a) {
      problems.push_back("missing " + prefix + ref.name);
    } else if (a->shape != ref.value->shape()) {
      problems.push_back(ref.name + ": expected " + shape_string(ref.value->shape()) + ", file has " +
                         shape_string(a->shape));
    }
  }
  if (!problems.empty()) {
    std::string msg = "model state does not match the architecture:";
    for (const auto& p : problems) msg += (&p == &problems.front() ? " " : "; ") + p;
    raise(on_mismatch, msg);
  }
  for (auto& ref : state) *ref.value = find_array(arrays, prefix + ref.name)->template to_tensor<T>();
}

/// Weights file: all named model arrays plus the ModelConfig under meta.model_config.
template <std::floating_point T>
void save_weights(NutritionModel<T>& model, const std::filesystem::path& path) {
  Container c;
  c.kind = "weights";
  c.meta["model_config"] = model.config();
  c.arrays = export_state(model);
  write_container(path, c);
}

template <std::floating_point T = float>
std::unique_ptr<NutritionModel<T>> load_weights(const std::filesystem::path& path) {
  const Container c = read_container(path, "weights", ErrorKind::load);
  if (!c.meta.contains("model_config")) throw LoadError(path.string() + ": weights file has no model_config");
  ModelConfig config;
  try {
    config = c.meta.at("model_config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": bad model_config: " + e.what());
  }
  config.backbone.pretrained_weights.reset();
  auto model = build_model<T>(config);
  import_state(*model, c.arrays, "", ErrorKind::load);
  return model;
}

}  // namespace nutripred
