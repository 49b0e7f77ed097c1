#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nutripred/config.hpp"
#include "nutripred/nn.hpp"
#include "nutripred/serialize.hpp"

namespace nutripred {

/// RMSProp with classical momentum, epsilon inside the root:
///
///   g    <- grad + weight_decay * w
///   ms   <- rms_discount * ms + (1 - rms_discount) * g^2
///   mom  <- momentum * mom + learning_rate * g / sqrt(ms + epsilon)
///   w    <- w - mom
///
/// `ms` and `mom` start at zero for every parameter.
template <std::floating_point T>
class RmsProp {
 public:
  RmsProp(const TrainConfig& config, nn::StateList<T> params) : config_(config), params_(std::move(params)) {
    config.validate_optimizer();
    for (const auto& p : params_) {
      if (!p.trainable()) throw ConfigError("optimizer: " + p.name + " is not a trainable parameter");
      mean_square_.emplace_back(p.value->shape());
      momentum_.emplace_back(p.value->shape());
    }
  }

  const nn::StateList<T>& parameters() const { return params_; }

  /// Applies one update using the accumulated gradients. Parameters that never received a
  /// gradient are treated as having a zero gradient.
  void step() {
    const double rho = config_.rms_discount;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& w = *params_[i].value;
      const Tensor<T>& grad = params_[i].param->grad;
      const bool has_grad = !grad.empty();
      Tensor<T>& ms = mean_square_[i];
      Tensor<T>& mom = momentum_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = (has_grad ? static_cast<double>(grad[j]) : 0.0) + config_.weight_decay * w[j];
        const double m2 = rho * ms[j] + (1.0 - rho) * g * g;
        const double m = config_.momentum * mom[j] + config_.learning_rate * g / std::sqrt(m2 + config_.epsilon);
        ms[j] = static_cast<T>(m2);
        mom[j] = static_cast<T>(m);
        w[j] = static_cast<T>(w[j] - m);
      }
    }
  }

  std::vector<StoredArray> export_state(const std::string& prefix) const {
    std::vector<StoredArray> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back(StoredArray::from_tensor(prefix + params_[i].name + ".mean_square", mean_square_[i]));
      out.push_back(StoredArray::from_tensor(prefix + params_[i].name + ".momentum", momentum_[i]));
    }
    return out;
  }

  /// Restores slot state; throws CheckpointError on any missing or mis-shaped slot.
  void import_state(std::span<const StoredArray> arrays, const std::string& prefix) {
    std::vector<Tensor<T>> ms, mom;
    for (const auto& p : params_) {
      for (auto [suffix, dst] : {std::pair{".mean_square", &ms}, std::pair{".momentum", &mom}}) {
        const StoredArray* a = find_array(arrays, prefix + p.name + suffix);
        if (!a || a->shape != p.value->shape()) {
          throw CheckpointError("optimizer state for " + p.name + " is missing or mis-shaped");
        }
        dst->push_back(a->to_tensor<T>());
      }
    }
    mean_square_ = std::move(ms);
    momentum_ = std::move(mom);
  }

 private:
  TrainConfig config_;
  nn::StateList<T> params_;
  std::vector<Tensor<T>> mean_square_;
  std::vector<Tensor<T>> momentum_;
};

template <std::floating_point T>
RmsProp<T> make_optimizer(const TrainConfig& config, nn::StateList<T> params) {
  return RmsProp<T>(config, std::move(params));
}

}  // namespace nutripred
