#pragma once

#include <cmath>
#include <span>

#include "nutripred/nutrients.hpp"
#include "nutripred/tensor.hpp"

namespace nutripred {

/// Per-task mean absolute errors and their unweighted sum.
struct LossBreakdown {
  TaskArray per_task{};
  double total = 0.0;
};

/// Mean absolute error, (1/B) * sum_i |y_i - yhat_i|.
template <std::floating_point T>
double mae(std::span<const T> targets, std::span<const T> predictions) {
  if (targets.size() != predictions.size()) {
    throw ArgumentError("mae: length mismatch " + std::to_string(targets.size()) + " vs " +
                        std::to_string(predictions.size()));
  }
  if (targets.empty()) throw ArgumentError("mae: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!std::isfinite(targets[i]) || !std::isfinite(predictions[i])) throw ArgumentError("mae: non-finite input");
    sum += std::abs(static_cast<double>(targets[i]) - static_cast<double>(predictions[i]));
  }
  return sum / static_cast<double>(targets.size());
}

namespace detail {
template <std::floating_point T>
void check_task_matrices(const Tensor<T>& targets, const Tensor<T>& predictions, const char* what) {
  if (targets.rank() != 2 || targets.dim(1) != kTaskCount || targets.shape() != predictions.shape() ||
      targets.dim(0) == 0) {
    throw ArgumentError(std::string(what) + ": expected matching (B,5) matrices with B>=1, got " +
                        shape_string(targets.shape()) + " and " + shape_string(predictions.shape()));
  }
}
}  // namespace detail

/// Column-wise MAE over a (B, 5) batch; total is the plain sum of the five columns.
/// Non-finite inputs propagate into the result, which is how training detects divergence.
template <std::floating_point T>
LossBreakdown multitask_loss(const Tensor<T>& targets, const Tensor<T>& predictions) {
  detail::check_task_matrices(targets, predictions, "multitask_loss");
  const std::size_t batch = targets.dim(0);
  LossBreakdown out;
  for (std::size_t k = 0; k < kTaskCount; ++k) {
    double sum = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      sum += std::abs(static_cast<double>(targets(i, k)) - static_cast<double>(predictions(i, k)));
    }
    out.per_task[k] = sum / static_cast<double>(batch);
    out.total += out.per_task[k];
  }
  return out;
}

/// Subgradient of multitask_loss.total with respect to the predictions:
/// sign(yhat - y) / B, and 0 where the residual is exactly zero.
template <std::floating_point T>
Tensor<T> loss_gradient(const Tensor<T>& targets, const Tensor<T>& predictions) {
  detail::check_task_matrices(targets, predictions, "loss_gradient");
  const T inv_batch = T(1) / static_cast<T>(targets.dim(0));
  Tensor<T> grad(targets.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const T r = predictions[i] - targets[i];
    grad[i] = r > T(0) ? inv_batch : (r < T(0) ? -inv_batch : T(0));
  }
  return grad;
}

}  // namespace nutripred
