#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "conmat/tensor.hpp"

namespace conmat {

// A learnable tensor that outlives individual tapes. Backward accumulates
// into `grad`; the optimizer reads and clears it.
template <Real T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    else grad.fill(T{0});
  }
  std::size_t numel() const { return value.numel(); }
};

template <Real T>
class Tape;

// Handle to a node recorded on a tape.
template <Real T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

// Ordered record of operations. Nodes are appended in creation order, which
// is a topological order; backward walks it in reverse, once.
template <Real T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  // With defer_params, backward leaves parameter adjoints on the tape until
  // flush_param_grads(); lets per-sample tapes run on worker threads while
  // the reduction into Parameter::grad happens in a fixed order.
  explicit Tape(bool grad_enabled = true, bool defer_params = false)
      : grad_enabled_(grad_enabled), defer_params_(defer_params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, nullptr, nullptr, "constant"); }

  Var<T> leaf(Tensor<T> v, bool requires_grad = true) {
    return push(std::move(v), requires_grad && grad_enabled_, nullptr, nullptr, "leaf");
  }

  // Parameters are copied onto the tape; their gradient flows back into
  // Parameter::grad when backward() finishes.
  Var<T> param(Parameter<T>& p) {
    if (!grad_enabled_) return push(p.value, false, nullptr, nullptr, "param");
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    return push(p.value, true, nullptr, &p, "param");
  }

  // Records an op output. `backward` is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward, const char* op) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(backward), op);
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward, const char* op) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || requires_grad(v.id);
    rg = rg && grad_enabled_;
    if (!value.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
    return push(std::move(value), rg, rg ? std::move(backward) : nullptr, nullptr, op);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  // Gradient of the loss with respect to node `id` (zeros if unreached).
  Tensor<T> grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  // Mutable gradient buffer for an input; allocated on first use.
  // Returns an empty span when the node does not need a gradient.
  std::span<T> grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad.data();
  }
  std::span<const T> out_grad(std::size_t id) const { return nodes_[id].grad.data(); }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw ValueError("backward: loss is not on this tape");
    if (nodes_.empty()) throw ValueError("backward: empty tape");
    if (done_) throw ValueError("backward: already run on this tape");
    if (value(loss.id).numel() != 1) throw ShapeError("backward: loss must be a scalar");
    done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty()) continue;
      ++visits_;
      if (n.backward) n.backward(*this, i);
      if (n.param && !defer_params_) add_param_grad(n);
    }
  }

  void flush_param_grads() {
    if (!defer_params_) return;
    for (auto& n : nodes_)
      if (n.param && !n.grad.empty()) add_param_grad(n);
    defer_params_ = false;
  }

  bool backward_done() const noexcept { return done_; }
  std::size_t visits() const noexcept { return visits_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    const char* op = "";
  };

  static void add_param_grad(const auto& n) {
    auto& pg = n.param->grad;
    for (std::size_t k = 0; k < pg.numel(); ++k) pg[k] += n.grad[k];
  }

  Var<T> push(Tensor<T> v, bool rg, BackwardFn fn, Parameter<T>* p, const char* op) {
    nodes_.push_back(Node{std::move(v), {}, rg, std::move(fn), p, op});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
  bool grad_enabled_ = true;
  bool defer_params_ = false;
  bool done_ = false;
  std::size_t visits_ = 0;
};

// ---------------------------------------------------------------------------
// Finite-difference verification.

inline constexpr double kGradCheckEps = 1e-6;

inline double relative_error(double analytic, double numeric, double eps = kGradCheckEps) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + eps);
}

// f maps a leaf variable to a scalar. Returns the largest relative error
// between the tape gradient and the central difference over every element
// of x (or over `indices` when non-empty).
template <Real T, typename F>
double grad_check(F&& f, const Tensor<T>& x, double h = 1e-5, const std::vector<std::size_t>& indices = {}) {
  if (h <= 0) throw ValueError("grad_check: h must be positive");
  Tensor<T> analytic;
  {
    Tape<T> tape;
    auto xv = tape.leaf(x);
    auto y = f(tape, xv);
    if (y.numel() != 1) throw ShapeError("grad_check: f must return a scalar");
    tape.backward(y);
    analytic = tape.grad(xv);
  }
  auto eval = [&](const Tensor<T>& at) {
    Tape<T> tape(false);
    auto y = f(tape, tape.leaf(at, false));
    return static_cast<double>(y.value()[0]);
  };
  double worst = 0.0;
  auto check = [&](std::size_t i) {
    Tensor<T> xp = x, xm = x;
    xp[i] += static_cast<T>(h);
    xm[i] -= static_cast<T>(h);
    const double numeric = (eval(xp) - eval(xm)) / (2.0 * h);
    worst = std::max(worst, relative_error(analytic[i], numeric));
  };
  if (indices.empty())
    for (std::size_t i = 0; i < x.numel(); ++i) check(i);
  else
    for (auto i : indices) check(i);
  return worst;
}

// Same check against a parameter's accumulated gradient. `loss` builds a
// fresh tape each call and returns the scalar loss.
template <Real T, typename F>
double grad_check_param(F&& loss, Parameter<T>& p, double h, const std::vector<std::size_t>& indices) {
  p.zero_grad();
  {
    Tape<T> tape;
    auto y = loss(tape);
    tape.backward(y);
  }
  const Tensor<T> analytic = p.grad;
  auto eval = [&]() {
    Tape<T> tape(false);
    return static_cast<double>(loss(tape).value()[0]);
  };
  double worst = 0.0;
  for (auto i : indices) {
    const T saved = p.value[i];
    p.value[i] = saved + static_cast<T>(h);
    const double fp = eval();
    p.value[i] = saved - static_cast<T>(h);
    const double fm = eval();
    p.value[i] = saved;
    worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * h)));
  }
  p.zero_grad();
  return worst;
}

}  // namespace conmat
