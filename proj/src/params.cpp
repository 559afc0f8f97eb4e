#include "mno/params.hpp"

#include <cmath>
#include <stdexcept>

namespace mno {

std::string precision_name(Precision p) {
  return p == Precision::kFloat32 ? "float32" : "float64";
}

Precision parse_precision(const std::string& s) {
  if (s == "float32" || s == "f32") return Precision::kFloat32;
  if (s == "float64" || s == "f64") return Precision::kFloat64;
  throw std::invalid_argument("unknown precision '" + s + "' (expected float32|float64)");
}

template <typename T>
void ParamSet<T>::add(const std::string& path, Tensor<T> value, bool trainable) {
  if (path.empty()) throw std::invalid_argument("parameter path must be non-empty");
  auto [it, inserted] = params_.try_emplace(path);
  if (!inserted) throw std::invalid_argument("duplicate parameter path '" + path + "'");
  it->second.value = std::move(value);
  it->second.trainable = trainable;
}

template <typename T>
Param<T>& ParamSet<T>::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw std::invalid_argument("unknown parameter '" + path + "'");
  return it->second;
}

template <typename T>
const Param<T>& ParamSet<T>::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw std::invalid_argument("unknown parameter '" + path + "'");
  return it->second;
}

template <typename T>
std::size_t ParamSet<T>::numel() const {
  std::size_t n = 0;
  for (const auto& [k, p] : params_)
    if (p.trainable) n += p.value.numel();
  return n;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& [k, p] : params_) {
    p.grad = Tensor<T>(p.value.shape(), T{0});
    p.has_grad = true;
  }
}

template <typename T>
Var<T> ParamBinding<T>::get(const std::string& path) {
  auto it = bound_.find(path);
  if (it != bound_.end()) return it->second;
  const Param<T>& p = params_->at(path);
  Var<T> v = tape_->leaf(p.value, p.trainable);
  bound_.emplace(path, v);
  return v;
}

template <typename T>
void ParamBinding<T>::collect_grads(ParamSet<T>& out) const {
  for (auto& [path, p] : out) {
    auto it = bound_.find(path);
    if (it != bound_.end() && p.trainable) {
      p.grad = tape_->grad_tensor(it->second.id);
    } else {
      p.grad = Tensor<T>(p.value.shape(), T{0});
    }
    p.has_grad = true;
  }
}

template <typename T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template class ParamSet<float>;
template class ParamSet<double>;
template class ParamBinding<float>;
template class ParamBinding<double>;
template Tensor<float> uniform_init<float>(Shape, std::size_t, Rng&);
template Tensor<double> uniform_init<double>(Shape, std::size_t, Rng&);

}  // namespace mno
