#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sgdc/nn.hpp"
#include "sgdc/rng.hpp"
#include "sgdc/tape.hpp"
#include "sgdc/tensor.hpp"

namespace sgdc {

// Index of a tensor inside a ParamStore.
struct ParamRef {
  int index = -1;
  bool valid() const { return index >= 0; }
};

// Ordered, named parameter tensors. Names are dotted paths ("sgdc.0.ffn_a.weight")
// and double as checkpoint file names.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };

  ParamRef add(std::string name, Tensor<T> value, bool trainable = true) {
    if (by_name_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    by_name_.emplace(name, static_cast<int>(entries_.size()));
    entries_.push_back(Entry{std::move(name), std::move(value), trainable});
    return ParamRef{static_cast<int>(entries_.size() - 1)};
  }

  std::size_t size() const { return entries_.size(); }
  Entry& entry(ParamRef r) { return entries_.at(static_cast<std::size_t>(r.index)); }
  const Entry& entry(ParamRef r) const { return entries_.at(static_cast<std::size_t>(r.index)); }
  Entry& entry(std::size_t i) { return entries_.at(i); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  Tensor<T>& value(ParamRef r) { return entry(r).value; }
  const Tensor<T>& value(ParamRef r) const { return entry(r).value; }

  std::optional<ParamRef> find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return ParamRef{it->second};
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.trainable ? 1 : 0;
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> by_name_;
};

// Binds a store to a tape for one forward pass. A parameter becomes a leaf the
// first time it is used (trainable) or a constant (frozen).
template <typename T>
class Binder {
 public:
  // no_grad binds every parameter as a constant (inference).
  Binder(Tape<T>& tape, const ParamStore<T>& store, bool no_grad = false)
      : tape_(tape), store_(store), vars_(store.size()), no_grad_(no_grad) {}

  Var<T> operator()(ParamRef r) {
    if (!r.valid()) throw ContractError("use of an unset parameter reference");
    auto& slot = vars_.at(static_cast<std::size_t>(r.index));
    if (!slot.valid()) {
      const auto& e = store_.entry(r);
      slot = e.trainable && !no_grad_ ? tape_.leaf(e.value) : tape_.constant(e.value);
    }
    return slot;
  }

  // Routes parameter r through an existing variable (gradient checks).
  void bind(ParamRef r, const Var<T>& v) { vars_.at(static_cast<std::size_t>(r.index)) = v; }

  // Leaf for parameter i, or an invalid Var when the forward pass never used it.
  const Var<T>& bound(std::size_t i) const { return vars_.at(i); }
  Tape<T>& tape() { return tape_; }
  const ParamStore<T>& store() const { return store_; }

 private:
  Tape<T>& tape_;
  const ParamStore<T>& store_;
  std::vector<Var<T>> vars_;
  bool no_grad_ = false;
};

struct ConvParams {
  ParamRef weight;
  std::optional<ParamRef> bias;
  int stride = 1;
  int padding = 0;
  int groups = 1;

  int out_channels(const auto& store) const { return store.value(weight).dim(0); }
};

struct ConvSpec {
  int in_ch = 1;
  int out_ch = 1;
  int kernel = 1;
  int stride = 1;
  int groups = 1;
  bool bias = true;
};

std::uint64_t param_seed(std::uint64_t seed, const std::string& name);

// Fan-in scaled normal weights (std = sqrt(2 / fan_in)) and zero bias. Each
// tensor draws from a stream derived from (seed, name), so adding or removing
// unrelated parameters never changes its values. Padding is kernel/2.
template <typename T>
ConvParams make_conv(ParamStore<T>& store, std::uint64_t seed, const std::string& name, const ConvSpec& spec);

template <typename T>
Tensor<T> he_normal(std::uint64_t seed, const std::string& name, const Shape& shape, int fan_in);

template <typename T>
Var<T> apply_conv(Binder<T>& b, const Var<T>& x, const ConvParams& p) {
  std::optional<Var<T>> bias;
  if (p.bias) bias = b(*p.bias);
  return nn::conv2d<T>(x, b(p.weight), bias, nn::Conv2dOpts{p.stride, p.padding, p.groups});
}

}  // namespace sgdc
