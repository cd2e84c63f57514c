#include "kdlab/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "kdlab/errors.hpp"
#include "kdlab/rng.hpp"

namespace kdlab {

namespace {

constexpr double kLogClamp = 1e-12;
constexpr double kStochasticTol = 1e-6;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

void require_stochastic(const Tensor& p, const char* what) {
  const std::size_t c = p.dim(1);
  for (std::size_t i = 0; i < p.dim(0); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = p[i * c + j];
      if (v < -kStochasticTol || v > 1.0 + kStochasticTol) {
        throw ContractError(std::string("kd_loss: ") + what + " entry outside [0,1] in row " +
                            std::to_string(i));
      }
      row += v;
    }
    if (std::abs(row - 1.0) > kStochasticTol) {
      throw ContractError(std::string("kd_loss: ") + what + " row " + std::to_string(i) +
                          " sums to " + std::to_string(row));
    }
  }
}

}  // namespace

void DistillConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("alpha must lie in [0, 1]");
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  if (!(lr > 0.0)) throw ParameterError("lr must be positive");
  if (!(momentum >= 0.0)) throw ParameterError("momentum must be non-negative");
  if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay must be non-negative");
  if (!(sched_gamma > 0.0 && sched_gamma <= 1.0)) throw ParameterError("sched_gamma must lie in (0, 1]");
  if (sched_step <= 0) throw ParameterError("sched_step must be positive");
  if (epochs < 0) throw ParameterError("epochs must be non-negative");
  if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
}

DistillConfig DistillConfig::teacher_defaults() {
  DistillConfig cfg;
  cfg.epochs = 50;
  cfg.sched_step = 10;
  cfg.sched_gamma = 0.1;
  return cfg;
}

DistillConfig DistillConfig::student_defaults() { return DistillConfig{}; }

double lr_at(int epoch, double base_lr, int step, double gamma) {
  if (epoch < 0) throw ParameterError("lr_at: epoch must be non-negative");
  if (step <= 0) throw ParameterError("lr_at: step must be positive");
  return base_lr * std::pow(gamma, epoch / step);
}

// ---------------------------------------------------------------------------
// losses

Tensor kd_loss(const Tensor& teacher_probs, const Tensor& student_probs) {
  if (teacher_probs.rank() != 2 || teacher_probs.shape() != student_probs.shape()) {
    throw DimensionError("kd_loss: shapes " + shape_str(teacher_probs.shape()) + " and " +
                         shape_str(student_probs.shape()) + " differ or are not [N, C]");
  }
  require_stochastic(teacher_probs, "teacher");
  require_stochastic(student_probs, "student");
  const std::size_t n = teacher_probs.dim(0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double acc = 0.0;
  for (std::size_t k = 0; k < teacher_probs.numel(); ++k) {
    const double t = teacher_probs[k];
    if (t == 0.0) continue;
    acc -= t * std::log(std::max(student_probs[k], kLogClamp));
  }
  const Tensor T = teacher_probs;
  const Tensor S = student_probs;
  return make_op_result({1}, {acc * inv_n}, {T, S},
                        [T, S, inv_n](std::span<const double> g) {
                          if (double* s = grad_sink(S)) {
                            for (std::size_t k = 0; k < S.numel(); ++k) {
                              if (T[k] == 0.0 || S[k] < kLogClamp) continue;
                              s[k] -= g[0] * inv_n * T[k] / S[k];
                            }
                          }
                          if (double* s = grad_sink(T)) {
                            for (std::size_t k = 0; k < T.numel(); ++k) {
                              if (T[k] == 0.0) continue;
                              s[k] -= g[0] * inv_n * std::log(std::max(S[k], kLogClamp));
                            }
                          }
                        },
                        "kd_loss");
}

Tensor task_loss(std::span<const std::size_t> labels, const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("task_loss: logits must be [N, C]");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("task_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  for (auto l : labels) {
    if (l >= c) {
      throw ContractError("task_loss: label " + std::to_string(l) + " >= class count " +
                          std::to_string(c));
    }
  }
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * c;
    const double top = *std::max_element(z, z + c);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(z[j] - top);
    const double lse = top + std::log(denom);
    acc += lse - z[labels[i]];
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(z[j] - lse);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<std::size_t> targets(labels.begin(), labels.end());
  return make_op_result({1}, {acc * inv_n}, {logits},
                        [logits, probs, targets, n, c, inv_n](std::span<const double> g) {
                          if (double* s = grad_sink(logits)) {
                            for (std::size_t i = 0; i < n; ++i) {
                              for (std::size_t j = 0; j < c; ++j) {
                                const double y = targets[i] == j ? 1.0 : 0.0;
                                s[i * c + j] += g[0] * inv_n * ((*probs)[i * c + j] - y);
                              }
                            }
                          }
                        },
                        "task_loss");
}

Tensor task_loss_onehot(const Tensor& one_hot, const Tensor& logits) {
  if (one_hot.shape() != logits.shape() || one_hot.rank() != 2) {
    throw DimensionError("task_loss: one-hot " + shape_str(one_hot.shape()) + " vs logits " +
                         shape_str(logits.shape()));
  }
  const std::size_t n = one_hot.dim(0), c = one_hot.dim(1);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t hot = c;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = one_hot[i * c + j];
      if (v == 1.0 && hot == c) {
        hot = j;
      } else if (v != 0.0) {
        throw ContractError("task_loss: row " + std::to_string(i) + " is not one-hot");
      }
    }
    if (hot == c) throw ContractError("task_loss: row " + std::to_string(i) + " is not one-hot");
    labels[i] = hot;
  }
  return task_loss(labels, logits);
}

Tensor total_loss(const Tensor& l_kd, const Tensor& l_task, double alpha, double t) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("total_loss: alpha must lie in [0, 1]");
  if (!(t > 0.0)) throw ParameterError("total_loss: temperature must be positive");
  return weighted_sum(l_kd, (1.0 - alpha) * t * t, l_task, alpha);
}

double total_loss(double l_kd, double l_task, double alpha, double t) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("total_loss: alpha must lie in [0, 1]");
  if (!(t > 0.0)) throw ParameterError("total_loss: temperature must be positive");
  return (1.0 - alpha) * t * t * l_kd + alpha * l_task;
}

// ---------------------------------------------------------------------------
// optimizer

OptimizerState OptimizerState::zeros_like(const ParamStore& params, double lr) {
  OptimizerState state;
  state.lr = lr;
  for (const auto& [name, p] : params) state.velocity.emplace(name, std::vector<double>(p.numel(), 0.0));
  return state;
}

void sgd_step(ParamStore& params, OptimizerState& state, double lr, double momentum,
              double weight_decay) {
  for (const auto& [name, p] : params) {
    if (p.requires_grad() && !p.has_grad()) {
      throw ContractError("sgd_step: parameter '" + name + "' has no gradient");
    }
  }
  state.lr = lr;
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    auto it = state.velocity.find(name);
    if (it == state.velocity.end()) {
      it = state.velocity.emplace(name, std::vector<double>(p.numel(), 0.0)).first;
    }
    auto& v = it->second;
    auto theta = p.mutable_data();
    auto grad = p.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = momentum * v[i] + (grad[i] + weight_decay * theta[i]);
      theta[i] -= lr * v[i];
    }
    p.clear_grad();
  }
}

// ---------------------------------------------------------------------------
// training

namespace {

struct Accumulator {
  double loss_total = 0.0;
  double loss_kd = 0.0;
  double loss_task = 0.0;
  std::size_t count = 0;
  std::vector<double> logits;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;

  void add(const Tensor& batch_logits, const std::vector<std::size_t>& batch_labels, double total,
           double kd, double task) {
    const auto n = static_cast<double>(batch_labels.size());
    loss_total += total * n;
    loss_kd += kd * n;
    loss_task += task * n;
    count += batch_labels.size();
    classes = batch_logits.dim(1);
    logits.insert(logits.end(), batch_logits.data().begin(), batch_logits.data().end());
    labels.insert(labels.end(), batch_labels.begin(), batch_labels.end());
  }

  MetricsReport report(int epoch, const std::string& split, double lr) const {
    MetricsReport r;
    r.epoch = epoch;
    r.split = split;
    const auto n = static_cast<double>(count);
    r.loss_total = loss_total / n;
    r.loss_kd = loss_kd / n;
    r.loss_task = loss_task / n;
    ScoredPredictions pred{Tensor({count, classes}, logits), labels};
    r.acc = top1_accuracy(pred);
    r.map = mean_ap(pred).map;
    r.lr = lr;
    return r;
  }
};

void check_inputs(const Model& model, const Dataset& train, const Dataset& val) {
  if (train.size() == 0) throw ConfigError("training dataset is empty");
  train.validate();
  const std::size_t classes = model.shape().num_classes;
  if (train.num_classes() != classes || (val.size() && val.num_classes() != classes)) {
    throw ConfigError("dataset has " + std::to_string(train.num_classes()) +
                      " classes but model " + model.preset() + " predicts " +
                      std::to_string(classes));
  }
}

std::vector<MetricsReport> run_training(Model* teacher, Model& student, const Dataset& train,
                                        const Dataset& val, const DistillConfig& cfg,
                                        const AugmentConfig& augment,
                                        const EpochCallback& on_epoch) {
  cfg.validate();
  augment.validate();
  check_inputs(student, train, val);
  if (teacher && teacher->shape().num_classes != student.shape().num_classes) {
    throw ConfigError("teacher predicts " + std::to_string(teacher->shape().num_classes) +
                      " classes but student predicts " +
                      std::to_string(student.shape().num_classes));
  }

  OptimizerState state = OptimizerState::zeros_like(student.params(), cfg.lr);
  std::vector<MetricsReport> reports;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg.lr, cfg.sched_step, cfg.sched_gamma);
    const auto groups = batch_indices(train.size(), cfg.batch_size, true,
                                      mix64(cfg.seed) ^ static_cast<std::uint64_t>(epoch));
    Accumulator acc;
    for (std::size_t b = 0; b < groups.size(); ++b) {
      Rng rng = Rng::fork(cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) | b);
      LabeledBatch batch = make_batch(train, groups[b], augment, &rng);

      Tensor teacher_logits;
      if (teacher) {
        NoGradScope no_grad;
        teacher_logits = teacher->forward(batch.images, Mode::eval);
      }

      Tape tape;
      double kd_value = kNaN;
      Tensor loss;
      Tensor logits;
      {
        Tape::Scope scope(tape);
        logits = student.forward(batch.images, Mode::train);
        Tensor task = task_loss(batch.labels, logits);
        if (teacher) {
          Tensor soft_targets = softmax_t(teacher_logits, cfg.temperature);
          Tensor soft_preds = softmax_t(logits, cfg.temperature);
          Tensor kd = kd_loss(soft_targets, soft_preds);
          kd_value = kd.item();
          loss = total_loss(kd, task, cfg.alpha, cfg.temperature);
        } else {
          loss = task;
        }
        acc.add(logits, batch.labels, loss.item(), kd_value, task.item());
      }
      backward(tape, loss);
      tape.clear();
      sgd_step(student.params(), state, lr, cfg.momentum, cfg.weight_decay);
    }
    MetricsReport train_report = acc.report(epoch, "train", lr);
    reports.push_back(train_report);
    if (on_epoch) on_epoch(train_report);

    if (val.size()) {
      Evaluation ev = evaluate(student, val, augment, std::max<std::size_t>(cfg.batch_size, 64),
                               teacher, teacher ? cfg.alpha : 1.0, teacher ? cfg.temperature : 1.0);
      MetricsReport r;
      r.epoch = epoch;
      r.split = "test";
      r.loss_total = ev.loss_total;
      r.loss_kd = ev.loss_kd;
      r.loss_task = ev.loss_task;
      r.acc = ev.accuracy;
      r.map = ev.ap.map;
      r.lr = lr;
      reports.push_back(r);
      if (on_epoch) on_epoch(r);
    }
  }
  return reports;
}

}  // namespace

std::vector<MetricsReport> train_regular(Model& model, const Dataset& train, const Dataset& val,
                                         const DistillConfig& cfg, const AugmentConfig& augment,
                                         const EpochCallback& on_epoch) {
  return run_training(nullptr, model, train, val, cfg, augment, on_epoch);
}

std::vector<MetricsReport> distill_train(Model& teacher, Model& student, const Dataset& train,
                                         const Dataset& val, const DistillConfig& cfg,
                                         const AugmentConfig& augment,
                                         const EpochCallback& on_epoch) {
  return run_training(&teacher, student, train, val, cfg, augment, on_epoch);
}

Evaluation evaluate(Model& model, const Dataset& data, const AugmentConfig& preprocessing,
                    std::size_t batch_size, Model* teacher, double alpha, double temperature) {
  if (data.size() == 0) throw ContractError("evaluate on an empty dataset");
  NoGradScope no_grad;
  Evaluation ev;
  std::vector<double> logits;
  double task_sum = 0.0, kd_sum = 0.0;
  for (const auto& idx : batch_indices(data.size(), batch_size, false, 0)) {
    LabeledBatch batch = make_batch(data, idx, preprocessing, nullptr);
    Tensor z = model.forward(batch.images, Mode::eval);
    const auto n = static_cast<double>(idx.size());
    task_sum += task_loss(batch.labels, z).item() * n;
    if (teacher) {
      Tensor zt = teacher->forward(batch.images, Mode::eval);
      kd_sum += kd_loss(softmax_t(zt, temperature), softmax_t(z, temperature)).item() * n;
    }
    logits.insert(logits.end(), z.data().begin(), z.data().end());
    ev.labels.insert(ev.labels.end(), batch.labels.begin(), batch.labels.end());
  }
  const auto n = static_cast<double>(data.size());
  ev.logits = Tensor({data.size(), model.shape().num_classes}, std::move(logits));
  ScoredPredictions pred{ev.logits, ev.labels};
  ev.accuracy = top1_accuracy(pred);
  ev.ap = mean_ap(pred);
  ev.loss_task = task_sum / n;
  if (teacher) {
    ev.loss_kd = kd_sum / n;
    ev.loss_total = total_loss(ev.loss_kd, ev.loss_task, alpha, temperature);
  } else {
    ev.loss_kd = kNaN;
    ev.loss_total = ev.loss_task;
  }
  return ev;
}

}  // namespace kdlab
