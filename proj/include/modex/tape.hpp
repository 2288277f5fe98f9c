#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "modex/errors.hpp"
#include "modex/tensor.hpp"

namespace modex {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Ordered record of a forward pass. Backward replays the entries in reverse,
/// accumulating gradients additively into every node that requires them.
///
/// Parameters are registered by reference: their values are read in place and,
/// after backward, each parameter's accumulated gradient is added into the
/// tensor's own grad buffer. A tape built with `track_params = false` treats
/// parameters as constants, which is what Jacobian extraction on a frozen
/// model wants.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool track_params = true)
      : track_params_(track_params) {
#ifndef NDEBUG
    check_finite_ = true;
#endif
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool track_params() const { return track_params_; }
  void set_check_finite(bool on) { check_finite_ = on; }

  Var<T> input(Tensor<T> value, bool requires_grad = false) {
    Node node;
    node.owned = std::move(value);
    node.requires_grad = requires_grad;
    node.name = "input";
    return push(std::move(node));
  }

  Var<T> param(Tensor<T>& tensor) {
    if (auto it = param_index_.find(&tensor); it != param_index_.end()) {
      return {this, it->second};
    }
    Node node;
    node.external = &tensor;
    if (track_params_) node.grad_sink = &tensor;
    node.requires_grad = track_params_;
    node.name = "param";
    Var<T> v = push(std::move(node));
    param_index_.emplace(&tensor, v.id);
    return v;
  }

  // Reads `tensor` in place as a constant. The tensor must outlive the tape.
  Var<T> constant_ref(const Tensor<T>& tensor) {
    if (auto it = param_index_.find(&tensor); it != param_index_.end()) {
      return {this, it->second};
    }
    Node node;
    node.external = &tensor;
    node.name = "constant";
    Var<T> v = push(std::move(node));
    param_index_.emplace(&tensor, v.id);
    return v;
  }

  // Registers the result of a primitive. `fn` runs during backward and may
  // only touch gradient buffers of `inputs`.
  Var<T> record(const char* name, Tensor<T> value,
                std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericalError(std::string("non-finite value produced by ") + name);
    }
    Node node;
    node.owned = std::move(value);
    node.name = name;
    for (const Var<T>& in : inputs) {
      if (in.tape != this) throw UsageError("operand belongs to a different tape");
      node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(fn);
    return push(std::move(node));
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
  }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient buffer of a node, allocated (zeroed) on demand. Backward rules
  // call this for inputs whose requires_grad flag is set.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  const Tensor<T>& grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (!n.requires_grad) {
      throw UsageError("gradient requested for untracked value");
    }
    if (n.grad.empty()) throw UsageError("no gradient reached this value");
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (loss.value().size() != 1) {
      throw UsageError("backward without a seed needs a scalar loss, got shape " +
                       shape_string(loss.shape()));
    }
    backward(loss, Tensor<T>(loss.shape(), T(1)));
  }

  // Reverse sweep from `out` seeded with `seed` (same shape as out). Seeds
  // add onto any gradient already present at `out`.
  void backward(Var<T> out, const Tensor<T>& seed, bool accumulate_params = true) {
    if (out.tape != this) throw UsageError("value belongs to a different tape");
    if (!nodes_[out.id].requires_grad) {
      throw UsageError("backward called on a value that is not tracked");
    }
    if (seed.shape() != out.shape()) {
      throw DimensionError("seed shape " + shape_string(seed.shape()) +
                           " does not match output " + shape_string(out.shape()));
    }
    Tensor<T>& g = grad_buffer(out.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

    for (std::size_t id = out.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
    if (!accumulate_params) return;
    for (Node& n : nodes_) {
      if (!n.grad_sink || n.grad.empty()) continue;
      auto dst = n.grad_sink->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }

  // Clears node gradients so the recorded pass can be replayed with a new seed.
  void zero_grad() {
    for (Node& n : nodes_) n.grad = Tensor<T>();
  }

  void clear() {
    nodes_.clear();
    param_index_.clear();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T>* grad_sink = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    const char* name = "";
    BackwardFn backward;
  };

  Var<T> push(Node node) {
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> param_index_;
  bool track_params_ = true;
  bool check_finite_ = false;
};

}  // namespace modex
