#include "kdlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "kdlab/errors.hpp"

namespace kdlab {

namespace {

thread_local Tape* g_active_tape = nullptr;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

void Tensor::undefined_tensor() { throw ContractError("use of an undefined tensor"); }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}


double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl().requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl().is_leaf; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const double> Tensor::grad() const { return impl().grad; }

void Tensor::zero_grad() {
  auto& g = impl().grad;
  if (!g.empty()) std::fill(g.begin(), g.end(), 0.0);
}

void Tensor::clear_grad() {
  impl().grad.clear();
  impl().grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return Tensor(shape(), impl().data, false); }

Tape* Tape::active() noexcept { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

Tape::Scope::~Scope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      std::function<void(std::span<const double>)> rule, const char* op) {
  Tensor out(std::move(shape), std::move(data), false);
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  const bool tracked =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!tracked) return out;
  out.impl_->requires_grad = true;
  out.impl_->is_leaf = false;
  tape->nodes_.push_back(Tape::Node{op, std::move(inputs), out, std::move(rule)});
  return out;
}

double* grad_sink(const Tensor& t) {
  auto& impl = t.impl();
  if (!impl.requires_grad) return nullptr;
  if (impl.pending.empty()) impl.pending.assign(impl.data.size(), 0.0);
  return impl.pending.data();
}

void backward(Tape& tape, const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss is not reachable from any tracked tensor");
  }

  std::vector<detail::TensorImpl*> touched;
  std::unordered_set<detail::TensorImpl*> seen;
  auto touch = [&](const Tensor& t) {
    auto* p = &t.impl();
    if (seen.insert(p).second) touched.push_back(p);
  };

  grad_sink(loss)[0] += 1.0;
  touch(loss);

  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
    auto& out = it->output.impl();
    if (out.pending.empty()) continue;  // not on a path to the loss
    for (const auto& in : it->inputs) {
      if (in.requires_grad()) touch(in);
    }
    it->backward(out.pending);
  }

  // Leaves receive the sweep's total in one addition so repeated sweeps add
  // bit-identical contributions.
  for (auto* impl : touched) {
    if (impl->is_leaf) {
      if (impl->grad.empty()) {
        impl->grad = impl->pending;
      } else {
        for (std::size_t i = 0; i < impl->grad.size(); ++i) impl->grad[i] += impl->pending[i];
      }
    }
    impl->pending.clear();
    impl->pending.shrink_to_fit();
  }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor var(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  std::vector<double> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = f(var);
    if (y.numel() != 1) throw ContractError("grad_check requires a scalar-valued function");
    if (y.requires_grad()) {
      backward(tape, y);
      analytic.assign(var.grad().begin(), var.grad().end());
    }
  }
  if (analytic.empty()) analytic.assign(var.numel(), 0.0);

  NoGradScope no_grad;
  double worst = 0.0;
  auto values = var.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = f(var).item();
    values[i] = saved - eps;
    const double down = f(var).item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace kdlab
