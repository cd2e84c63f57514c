#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kdlab/data.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/models.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

struct DistillConfig {
  double alpha = 0.45;
  double temperature = 11.0;
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.00001;
  int epochs = 15;
  int sched_step = 5;
  double sched_gamma = 0.3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;

  // 50 epochs, x0.1 every 10 epochs.
  static DistillConfig teacher_defaults();
  // 15 epochs, x0.3 every 5 epochs.
  static DistillConfig student_defaults();
};

// base_lr * gamma^floor(epoch / step)
double lr_at(int epoch, double base_lr, int step, double gamma);

// -(1/N) sum_ij T_ij log S_ij, log argument clamped at 1e-12; zero targets add nothing.
// Differentiable with respect to S.
Tensor kd_loss(const Tensor& teacher_probs, const Tensor& student_probs);

// Mean over rows of -log softmax(logits)[label], via a stable log-sum-exp.
Tensor task_loss(std::span<const std::size_t> labels, const Tensor& logits);
Tensor task_loss_onehot(const Tensor& one_hot, const Tensor& logits);

// (1 - alpha) * t^2 * l_kd + alpha * l_task
Tensor total_loss(const Tensor& l_kd, const Tensor& l_task, double alpha, double t);
double total_loss(double l_kd, double l_task, double alpha, double t);

struct OptimizerState {
  std::map<std::string, std::vector<double>, std::less<>> velocity;
  double lr = 0.0;

  static OptimizerState zeros_like(const ParamStore& params, double lr);
};

// v <- momentum * v + (grad + weight_decay * theta); theta <- theta - lr * v; grads cleared.
void sgd_step(ParamStore& params, OptimizerState& state, double lr, double momentum,
              double weight_decay);

// One row per (epoch, split). loss_kd is NaN when no teacher is involved.
struct MetricsReport {
  int epoch = 0;
  std::string split;
  double loss_total = 0.0;
  double loss_kd = 0.0;
  double loss_task = 0.0;
  double acc = 0.0;
  double map = 0.0;
  double lr = 0.0;
};

using EpochCallback = std::function<void(const MetricsReport&)>;

std::vector<MetricsReport> train_regular(Model& model, const Dataset& train, const Dataset& val,
                                         const DistillConfig& cfg, const AugmentConfig& augment,
                                         const EpochCallback& on_epoch = {});

// The teacher stays in eval mode and receives no gradients.
std::vector<MetricsReport> distill_train(Model& teacher, Model& student, const Dataset& train,
                                         const Dataset& val, const DistillConfig& cfg,
                                         const AugmentConfig& augment,
                                         const EpochCallback& on_epoch = {});

struct Evaluation {
  Tensor logits;
  std::vector<std::size_t> labels;
  double accuracy = 0.0;
  MeanApResult ap;
  double loss_task = 0.0;
  double loss_kd = 0.0;  // NaN without a teacher
  double loss_total = 0.0;
};

// Eval-mode pass over `data` (preprocessed, never augmented).
Evaluation evaluate(Model& model, const Dataset& data, const AugmentConfig& preprocessing,
                    std::size_t batch_size = 64, Model* teacher = nullptr, double alpha = 1.0,
                    double temperature = 1.0);

}  // namespace kdlab
