#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sgdc/errors.hpp"
#include "sgdc/tensor.hpp"

namespace sgdc {

template <typename T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; only valid while the
// tape that produced it is alive.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  int dim(int axis) const { return value().dim(axis); }
  bool requires_grad() const { return tape_->requires_grad(*this); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

// Access handed to a node's backward rule: the incoming gradient, the saved
// forward values, and lazily zero-initialised gradient slots for each input.
template <typename T>
class BackwardCtx {
 public:
  BackwardCtx(Tape<T>& tape, int node, std::vector<std::optional<Tensor<T>>>& grads)
      : tape_(tape), node_(node), grads_(grads) {}

  const Tensor<T>& grad_out() const { return *grads_[static_cast<std::size_t>(node_)]; }
  const Tensor<T>& output() const;
  std::size_t num_inputs() const;
  const Tensor<T>& input(std::size_t i) const;
  bool needs(std::size_t i) const;
  Tensor<T>& grad_in(std::size_t i);

 private:
  Tape<T>& tape_;
  int node_;
  std::vector<std::optional<Tensor<T>>>& grads_;
};

template <typename T>
using BackwardFn = std::function<void(BackwardCtx<T>&)>;

// Gradients returned by Tape::backward, keyed by leaf (and retained) node id.
template <typename T>
class Gradients {
 public:
  void set(int id, Tensor<T> g) {
    if (static_cast<std::size_t>(id) >= slots_.size()) slots_.resize(static_cast<std::size_t>(id) + 1);
    slots_[static_cast<std::size_t>(id)] = std::move(g);
  }
  bool has(const Var<T>& v) const {
    return static_cast<std::size_t>(v.id()) < slots_.size() && slots_[static_cast<std::size_t>(v.id())].has_value();
  }
  const Tensor<T>& operator[](const Var<T>& v) const {
    if (!has(v)) throw ContractError("no gradient recorded for node " + std::to_string(v.id()));
    return *slots_[static_cast<std::size_t>(v.id())];
  }

 private:
  std::vector<std::optional<Tensor<T>>> slots_;
};

// Dynamic (record-on-execute) tape. Nodes are appended in execution order, so
// every input id is smaller than the id of the node that consumes it and a
// single reverse sweep visits each node exactly once.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) { return push(std::move(value), {}, {}, true, true); }
  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, {}, false, false); }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn<T> fn) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn<T> fn) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    bool rg = false;
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw ContractError("operands recorded on different tapes");
      ids.push_back(in.id());
      rg = rg || nodes_[static_cast<std::size_t>(in.id())].requires_grad;
    }
    if (!rg) fn = nullptr;
    return push(std::move(value), std::move(ids), std::move(fn), rg, false);
  }

  const Tensor<T>& value(const Var<T>& v) const { return node(v.id()).value; }
  bool requires_grad(const Var<T>& v) const { return node(v.id()).requires_grad; }
  bool is_leaf(const Var<T>& v) const { return node(v.id()).leaf; }
  std::size_t size() const { return nodes_.size(); }
  std::vector<Var<T>> leaves() {
    std::vector<Var<T>> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].leaf) out.emplace_back(this, static_cast<int>(i));
    }
    return out;
  }

  // Reverse sweep from a scalar loss. Every leaf gets an entry (zeros when the
  // loss does not reach it); `retain` lists interior nodes whose gradient
  // should be reported as well.
  Gradients<T> backward(const Var<T>& loss, std::span<const Var<T>> retain = {}) {
    if (&loss.tape() != this) throw ContractError("loss was recorded on a different tape");
    if (loss.value().numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    std::vector<bool> keep(nodes_.size(), false);
    for (const auto& r : retain) keep[static_cast<std::size_t>(r.id())] = true;

    std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.id())] = Tensor<T>(loss.shape(), T{1});
    Gradients<T> out;
    for (int id = loss.id(); id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      auto& g = grads[static_cast<std::size_t>(id)];
      if (!g) continue;
      if (n.backward) {
        BackwardCtx<T> ctx(*this, id, grads);
        n.backward(ctx);
      }
      if (n.leaf || keep[static_cast<std::size_t>(id)]) {
        out.set(id, std::move(*g));
      }
      g.reset();
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].leaf && !out.has(Var<T>(this, static_cast<int>(i)))) {
        out.set(static_cast<int>(i), Tensor<T>(nodes_[i].value.shape(), T{0}));
      }
    }
    return out;
  }

 private:
  friend class BackwardCtx<T>;

  struct Node {
    Tensor<T> value;
    std::vector<int> inputs;
    BackwardFn<T> backward;
    bool requires_grad = false;
    bool leaf = false;
  };

  const Node& node(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
      throw ContractError("invalid tape node id " + std::to_string(id));
    }
    return nodes_[static_cast<std::size_t>(id)];
  }

  Var<T> push(Tensor<T> value, std::vector<int> inputs, BackwardFn<T> fn, bool rg, bool leaf) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(fn), rg, leaf});
    return Var<T>(this, static_cast<int>(nodes_.size() - 1));
  }

  // deque: references to node values stay valid while new nodes are appended.
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& BackwardCtx<T>::output() const {
  return tape_.nodes_[static_cast<std::size_t>(node_)].value;
}

template <typename T>
std::size_t BackwardCtx<T>::num_inputs() const {
  return tape_.nodes_[static_cast<std::size_t>(node_)].inputs.size();
}

template <typename T>
const Tensor<T>& BackwardCtx<T>::input(std::size_t i) const {
  return tape_.nodes_[static_cast<std::size_t>(tape_.nodes_[static_cast<std::size_t>(node_)].inputs[i])].value;
}

template <typename T>
bool BackwardCtx<T>::needs(std::size_t i) const {
  const int id = tape_.nodes_[static_cast<std::size_t>(node_)].inputs[i];
  return tape_.nodes_[static_cast<std::size_t>(id)].requires_grad;
}

template <typename T>
Tensor<T>& BackwardCtx<T>::grad_in(std::size_t i) {
  const int id = tape_.nodes_[static_cast<std::size_t>(node_)].inputs[i];
  auto& slot = grads_[static_cast<std::size_t>(id)];
  if (!slot) slot = Tensor<T>(tape_.nodes_[static_cast<std::size_t>(id)].value.shape(), T{0});
  return *slot;
}

}  // namespace sgdc
