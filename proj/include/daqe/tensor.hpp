#pragma once

// Dense tensors with a reverse-mode tape.
//
// Everything is templated on the scalar type: networks run in float, and the
// gradient checker re-evaluates the same graph in double.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "daqe/error.hpp"

namespace daqe {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches it
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel_of(shape), fill) {
    check_shape();
  }
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_shape();
    if (data.size() != numel_of(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t dim() const { return shape.size(); }
  std::size_t size(std::size_t axis) const { return shape.at(axis); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  void zero_grad() { grad.assign(data.size(), T(0)); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }

 private:
  void check_shape() const {
    for (auto e : shape)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
};

/// Multiply-add accounting. One FLOP is one multiply or one add, so a conv
/// costs 2*K*K*Cin*Cout*H*W and a matmul 2*m*k*n.
class FlopCounter {
 public:
  void add(const std::string& op_class, std::uint64_t flops) {
    by_op_[op_class] += flops;
    total_ += flops;
    for (const auto& stage : stages_) by_stage_[stage] += flops;
    if (!stages_.empty()) exclusive_[stages_.back()] += flops;
  }
  void push_stage(const std::string& name) {
    stages_.push_back(stages_.empty() ? name : stages_.back() + "/" + name);
  }
  void pop_stage() { stages_.pop_back(); }
  const std::string& current_stage() const {
    static const std::string none;
    return stages_.empty() ? none : stages_.back();
  }

  std::uint64_t total() const { return total_; }
  /// Inclusive totals: a stage includes its nested stages.
  std::uint64_t stage(const std::string& name) const {
    auto it = by_stage_.find(name);
    return it == by_stage_.end() ? 0 : it->second;
  }
  std::uint64_t op(const std::string& op_class) const {
    auto it = by_op_.find(op_class);
    return it == by_op_.end() ? 0 : it->second;
  }
  const std::map<std::string, std::uint64_t>& by_op() const { return by_op_; }
  const std::map<std::string, std::uint64_t>& by_stage() const { return by_stage_; }
  const std::map<std::string, std::uint64_t>& exclusive_by_stage() const { return exclusive_; }

  void reset() {
    if (!stages_.empty()) throw Error("FlopCounter::reset inside an open stage");
    by_op_.clear();
    by_stage_.clear();
    exclusive_.clear();
    total_ = 0;
  }

 private:
  std::map<std::string, std::uint64_t> by_op_;
  std::map<std::string, std::uint64_t> by_stage_;
  std::map<std::string, std::uint64_t> exclusive_;
  std::vector<std::string> stages_;
  std::uint64_t total_ = 0;
};

template <typename T>
class Tape;

/// Handle to a node recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
  bool valid() const { return tape != nullptr; }
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool record_grad = true) : record_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  /// A trainable parameter owned elsewhere; backward accumulates into its grad.
  Var<T> param(Tensor<T>& p) {
    Node n;
    n.external = &p;
    n.needs_grad = record_ && p.requires_grad;
    return push(std::move(n));
  }

  Var<T> constant(Tensor<T> v) {
    Node n;
    n.owned = std::move(v);
    return push(std::move(n));
  }

  /// An owned leaf whose gradient is kept on the tape (see grad()).
  Var<T> input(Tensor<T> v, bool requires_grad = true) {
    Node n;
    n.owned = std::move(v);
    n.needs_grad = record_ && requires_grad;
    return push(std::move(n));
  }

  const Tensor<T>& value(Var<T> v) const { return node(v).val(); }
  bool needs_grad(Var<T> v) const { return node(v).needs_grad; }

  /// Gradient buffer of a node, allocated lazily (parameters use their own).
  std::vector<T>& grad(Var<T> v) {
    Node& n = node(v);
    if (n.external) {
      n.external->ensure_grad();
      return n.external->grad;
    }
    if (n.grad.size() != n.owned.numel()) n.grad.assign(n.owned.numel(), T(0));
    return n.grad;
  }

  /// Records the output of an op. The backward closure reads grad(out) and
  /// accumulates into the grads of its inputs.
  Var<T> record(Tensor<T> out, bool needs_grad, std::function<void(Tape&, Var<T>)> backward) {
    check_finite(out);
    Node n;
    n.owned = std::move(out);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  /// Runs backward from a scalar loss in exact reverse recording order.
  void backward(Var<T> loss) {
    if (backward_done_) throw Error("backward called twice on the same tape");
    if (nodes_.empty()) throw Error("backward on an empty tape");
    if (value(loss).numel() != 1)
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(value(loss).shape));
    backward_done_ = true;
    if (!node(loss).needs_grad) return;
    grad(loss)[0] += T(1);
    for (std::uint32_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, Var<T>{this, i});
    }
  }

  /// Allows another backward pass after clearing tape-held gradients.
  void reset_backward() {
    backward_done_ = false;
    for (auto& n : nodes_) n.grad.clear();
  }

  FlopCounter& flops() { return flops_; }
  const FlopCounter& flops() const { return flops_; }
  std::size_t size() const { return nodes_.size(); }

  /// Stage name recorded for every op (used by routing audits).
  const std::vector<std::string>& stage_trace() const { return trace_; }
  void trace_stage(const std::string& s) { trace_.push_back(s); }

 private:
  struct Node {
    Tensor<T> owned;
    Tensor<T>* external = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    std::function<void(Tape&, Var<T>)> backward;
    const Tensor<T>& val() const { return external ? *external : owned; }
  };

  Node& node(Var<T> v) { return nodes_.at(v.id); }
  const Node& node(Var<T> v) const { return nodes_.at(v.id); }

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  static void check_finite(const Tensor<T>& t) {
    for (const T& x : t.data)
      if (!std::isfinite(x)) throw NumericError("non-finite value produced by op");
  }

  std::deque<Node> nodes_;  // stable references across push_back
  FlopCounter flops_;
  std::vector<std::string> trace_;
  bool record_;
  bool backward_done_ = false;
};

/// Scoped stage label for FLOP attribution.
template <typename T>
class StageScope {
 public:
  StageScope(Tape<T>& tape, const std::string& name) : tape_(tape) {
    tape_.flops().push_stage(name);
    tape_.trace_stage(tape_.flops().current_stage());
  }
  ~StageScope() { tape_.flops().pop_stage(); }
  StageScope(const StageScope&) = delete;
  StageScope& operator=(const StageScope&) = delete;

 private:
  Tape<T>& tape_;
};

}  // namespace daqe
