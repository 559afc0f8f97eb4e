#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mno/tensor.hpp"

namespace mno {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode tape. Each recorded node owns its forward value; nodes that
/// depend on a differentiable leaf also own a backward closure that pushes the
/// node's gradient into its parents. Recording order is a topological order,
/// so backward() simply walks the tape in reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> leaf(Tensor<T> value, bool requires_grad = true);

  /// Appends an op result. `parents` decide whether the node is
  /// differentiable; when none is, `backward` is dropped. Throws NumericError
  /// when the value is not finite.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> parents,
                BackwardFn backward);
  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& parents,
                BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be a scalar.
  void backward(Var<T> loss);

  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

  /// Gradient buffer of node `id`, allocated as zeros on first access.
  std::span<T> grad(int id);
  /// Gradient as a tensor; zeros when nothing flowed into the node.
  Tensor<T> grad_tensor(int id) const;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// Differentiable ops. Unless stated, "rows" means the tensor viewed as
// [numel / last_dim, last_dim].

/// a[R x K] * b[K x C]; optional transposes apply to the 2D views.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false);
/// x[..., In] * w[In, Out] + bias[Out], leading dims preserved.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
template <typename T>
Var<T> gelu(Var<T> x);
/// Numerically stable softmax along `axis`.
template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis);
template <typename T>
Var<T> reshape(Var<T> x, Shape shape);
/// Sums out `axis`, dropping it from the shape.
template <typename T>
Var<T> sum_axis(Var<T> x, std::size_t axis);
template <typename T>
Var<T> sum_all(Var<T> x);
/// out[i, :] = x[index[i], :]
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<int> index);
/// x[N, D] scaled per row by s[N, 1].
template <typename T>
Var<T> scale_rows(Var<T> x, Var<T> s);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end);
/// Per-column affine map with constant coefficients: x * mul[c] + add[c].
template <typename T>
Var<T> affine_cols(Var<T> x, std::vector<T> mul, std::vector<T> add);
/// ||pred - truth||_2 / ||truth||_2 over all entries. Throws NumericError on a
/// zero-norm truth.
template <typename T>
Var<T> relative_l2(Var<T> pred, const Tensor<T>& truth);
/// Sum of scalar vars.
template <typename T>
Var<T> add_scalars(const std::vector<Var<T>>& terms);

}  // namespace mno
