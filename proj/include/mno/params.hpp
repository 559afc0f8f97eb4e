#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mno/autodiff.hpp"
#include "mno/tensor.hpp"

namespace mno {

enum class Precision { kFloat32, kFloat64 };

std::string precision_name(Precision p);
Precision parse_precision(const std::string& s);

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;  // empty-shaped until gradients are collected
  bool trainable = true;
  bool has_grad = false;
};

/// Named parameter store. Paths are dotted ("block.2.local.w_k.w") and unique;
/// iteration order is lexicographic, which keeps optimizer updates and
/// checkpoints deterministic.
template <typename T>
class ParamSet {
 public:
  void add(const std::string& path, Tensor<T> value, bool trainable = true);
  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  Param<T>& at(const std::string& path);
  const Param<T>& at(const std::string& path) const;
  const Tensor<T>& value(const std::string& path) const { return at(path).value; }
  Tensor<T>& value(const std::string& path) { return at(path).value; }

  std::size_t size() const { return params_.size(); }
  /// Total scalar count over trainable parameters.
  std::size_t numel() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [k, p] : params_) out.add(k, p.value.template cast<U>(), p.trainable);
    return out;
  }

 private:
  std::map<std::string, Param<T>> params_;
};

/// Lazily mirrors a ParamSet onto a tape: a parameter becomes a leaf the first
/// time it is requested, so parameters never touched by a forward pass stay off
/// the tape and end up with zero gradients.
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Tape<T>& tape, const ParamSet<T>& params) : tape_(&tape), params_(&params) {}

  Var<T> get(const std::string& path);
  Tape<T>& tape() { return *tape_; }
  const ParamSet<T>& params() const { return *params_; }
  const std::map<std::string, Var<T>>& bound() const { return bound_; }

  /// Writes tape gradients into `out` (same paths as the bound ParamSet).
  /// Unbound trainable parameters receive zeros.
  void collect_grads(ParamSet<T>& out) const;

 private:
  Tape<T>* tape_;
  const ParamSet<T>* params_;
  std::map<std::string, Var<T>> bound_;
};

using Rng = std::mt19937_64;

/// Uniform initialization in +-sqrt(1/fan_in).
template <typename T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng& rng);

}  // namespace mno
