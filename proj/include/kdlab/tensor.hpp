#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kdlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;     // accumulated gradient; empty when absent
  std::vector<double> pending;  // per-backward scratch
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

// Dense row-major array of doubles with optional gradient tracking.
//
// A Tensor is a shared handle: copies alias the same storage. Forward ops never
// mutate their inputs; only optimizers, initializers and checkpoint loading
// write through mutable_data().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl().data.size(); }

  std::span<const double> data() const { return impl().data; }
  std::span<double> mutable_data() { return impl().data; }
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  // Fresh leaf with a copy of the data and no gradient tracking.
  Tensor detach() const;

  const detail::TensorImpl* id() const noexcept { return impl_.get(); }
  detail::TensorImpl& impl() const {
    if (!impl_) undefined_tensor();
    return *impl_;
  }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  [[noreturn]] static void undefined_tensor();
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Tape;
  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(std::span<const double>)>, const char*);
};

// Records differentiable operations while active on the current thread.
//
// Ops append a node whenever at least one input requires a gradient and a tape
// is active. Nodes are stored in creation order, so the sequence is already
// topologically sorted.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void(std::span<const double>)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  void clear() { nodes_.clear(); }

  static Tape* active() noexcept;

  // RAII activation; restores the previously active tape on exit.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  friend void backward(Tape& tape, const Tensor& loss);
  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(std::span<const double>)>, const char*);
  std::vector<Node> nodes_;
};

// Disables recording on the current thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Reverse sweep from a scalar loss. Leaf gradients are accumulated: calling it
// twice without clearing doubles every leaf gradient exactly.
void backward(Tape& tape, const Tensor& loss);

// Builds an op output and records its backward rule if any input is tracked.
// The rule receives dLoss/dOutput and accumulates into inputs via grad_sink().
Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      std::function<void(std::span<const double>)> rule, const char* op);

// Gradient accumulation target of `t` during a backward sweep, or nullptr if
// `t` is not tracked.
double* grad_sink(const Tensor& t);

// Max over elements of |analytic - central difference| / max(1, |analytic|, |numeric|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

}  // namespace kdlab
