#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dmsc {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until an adjoint reaches this node
  bool requires_grad = false;
  std::uint64_t id = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

/// Dense row-major float64 array with shared ownership of its storage.
/// Copies are shallow; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    if (numel(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(int axis) const { return node_->shape[normalize_axis(axis, rank())]; }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> data() { return node_->data; }
  const double* ptr() const { return node_->data.data(); }
  double* ptr() { return node_->data.data(); }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double& operator[](std::size_t i) { return node_->data[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

  Tensor clone() const {
    Tensor t(shape(), node_->data);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  // Same values, no gradient participation.
  Tensor detach() const { return Tensor(shape(), node_->data); }

 private:
  std::shared_ptr<TensorNode> node_;
};

class Tape;

namespace detail {
inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

/// Ordered record of differentiable operations. Constructing a Tape makes it
/// the active tape for the current thread; operations whose inputs require a
/// gradient append their adjoint to it. Without an active tape nothing is
/// recorded, which is the inference path.
class Tape {
 public:
  using Adjoint = std::function<void()>;

  Tape() : previous_(current()) { current() = this; }
  ~Tape() { current() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current(); }

  void record(const std::shared_ptr<TensorNode>& out, Adjoint adjoint) {
    out->id = entries_.size() + 1;
    entries_.push_back({out, std::move(adjoint)});
  }

  std::size_t size() const { return entries_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse record order.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->out->grad.empty()) continue;
      it->adjoint();
    }
  }

  // Releases recorded closures (and the activations they keep alive).
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode> out;
    Adjoint adjoint;
  };

  static Tape*& current() { return detail::active_tape(); }

  std::vector<Entry> entries_;
  Tape* previous_;
};

/// Suspends recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::active_tape()) { detail::active_tape() = nullptr; }
  ~NoGradGuard() { detail::active_tape() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

}  // namespace dmsc
