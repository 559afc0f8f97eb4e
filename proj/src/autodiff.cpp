#include "mno/autodiff.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>

#include "mno/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mno {
namespace {

// A tape allocates and frees the same few hundred-kilobyte buffers every
// step. glibc's defaults hand those straight back to the kernel (mmap or heap
// trim) and every step then pays for fresh zeroed pages, which dominated
// training time. Keep freed memory in the process instead.
#if defined(__GLIBC__)
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;
template <typename T>
using MMap = Eigen::Map<MatR<T>>;

template <typename T>
CMap<T> as_mat(const Tensor<T>& t) {
  return CMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MMap<T> as_mat(std::span<T> buf, std::size_t rows, std::size_t cols) {
  return MMap<T>(buf.data(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}

template <typename T>
CMap<T> as_mat(std::span<const T> buf, std::size_t rows, std::size_t cols) {
  return CMap<T>(buf.data(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
void check_same_shape(const char* op, Var<T> a, Var<T> b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

// NaN/Inf propagate through x * 0, so the vectorized sum is NaN exactly when
// some entry is not finite.
template <typename T>
bool finite_values(const Tensor<T>& t) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const T probe = (Eigen::Map<const Arr>(t.data(), static_cast<Eigen::Index>(t.numel())) * T(0)).sum();
  return probe == T(0);
}

template <typename T>
std::span<const T> grad_view(Tape<T>& tape, int id) {
  return tape.grad(id);
}

struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("non-finite leaf value");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value,
                       std::initializer_list<Var<T>> parents, BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var<T>>(parents), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value,
                       const std::vector<Var<T>>& parents, BackwardFn backward) {
  if (!finite_values(value)) {
    throw NumericError(std::string("non-finite output from ") + op + " " +
                       shape_str(value.shape()));
  }
  Node n;
  n.value = std::move(value);
  for (const auto& p : parents) {
    if (p.tape != this) throw std::invalid_argument(std::string(op) + ": var from another tape");
    n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
std::span<T> Tape<T>::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.numel(), T{0});
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad_tensor(int id) const {
  const Node& n = nodes_[id];
  if (n.grad.empty()) return Tensor<T>(n.value.shape(), T{0});
  return Tensor<T>(n.value.shape(), n.grad);
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  require(loss.tape == this, "backward: loss from another tape");
  require(nodes_[loss.id].value.numel() == 1 && nodes_[loss.id].value.rank() == 0,
          "backward: loss must be a scalar, got " + shape_str(nodes_[loss.id].value.shape()));
  for (auto& n : nodes_) n.grad.clear();
  grad(loss.id)[0] = T{1};
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a, bool trans_b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const std::size_t ar = trans_a ? av.cols() : av.rows();
  const std::size_t ak = trans_a ? av.rows() : av.cols();
  const std::size_t bk = trans_b ? bv.cols() : bv.rows();
  const std::size_t bc = trans_b ? bv.rows() : bv.cols();
  require(ak == bk, "matmul: inner dimensions differ (" + std::to_string(ak) + " vs " +
                        std::to_string(bk) + ")");
  Tensor<T> out(Shape{ar, bc});
  auto o = as_mat(out.span(), ar, bc);
  auto A = as_mat(av);
  auto B = as_mat(bv);
  if (!trans_a && !trans_b) o.noalias() = A * B;
  else if (trans_a && !trans_b) o.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b) o.noalias() = A * B.transpose();
  else o.noalias() = A.transpose() * B.transpose();

  const int ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), {a, b}, [=](Tape<T>& t, int self) {
    auto go = as_mat(grad_view(t, self), ar, bc);
    const auto& avv = t.value(ia);
    const auto& bvv = t.value(ib);
    auto A = as_mat(avv);
    auto B = as_mat(bvv);
    if (t.requires_grad(ia)) {
      auto ga = as_mat(t.grad(ia), avv.rows(), avv.cols());
      // d(op(A)) = G op(B)^T
      if (!trans_a && !trans_b) ga.noalias() += go * B.transpose();
      else if (!trans_a && trans_b) ga.noalias() += go * B;
      else if (trans_a && !trans_b) ga.noalias() += B * go.transpose();
      else ga.noalias() += B.transpose() * go.transpose();
    }
    if (t.requires_grad(ib)) {
      auto gb = as_mat(t.grad(ib), bvv.rows(), bvv.cols());
      if (!trans_a && !trans_b) gb.noalias() += A.transpose() * go;
      else if (trans_a && !trans_b) gb.noalias() += A * go;
      else if (!trans_a && trans_b) gb.noalias() += go.transpose() * A;
      else gb.noalias() += go.transpose() * A.transpose();
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = bias.value();
  require(wv.rank() == 2, "linear: weight must be 2D");
  require(xv.cols() == wv.dim(0), "linear: input width " + std::to_string(xv.cols()) +
                                      " does not match weight " + shape_str(wv.shape()));
  require(bv.numel() == wv.dim(1), "linear: bias length mismatch");
  const std::size_t rows = xv.rows(), in = wv.dim(0), outw = wv.dim(1);
  Shape oshape = xv.shape();
  if (oshape.empty()) oshape = {1};
  oshape.back() = outw;
  Tensor<T> out(oshape);
  auto o = as_mat(out.span(), rows, outw);
  o.noalias() = as_mat(xv) * as_mat(wv);
  o.rowwise() += as_mat(bv.span(), 1, outw).row(0);

  const int ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->record("linear", std::move(out), {x, w, bias}, [=](Tape<T>& t, int self) {
    auto go = as_mat(grad_view(t, self), rows, outw);
    if (t.requires_grad(ix)) {
      as_mat(t.grad(ix), rows, in).noalias() += go * as_mat(t.value(iw)).transpose();
    }
    if (t.requires_grad(iw)) {
      as_mat(t.grad(iw), in, outw).noalias() += as_mat(t.value(ix)).transpose() * go;
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      const T* gr = grad_view(t, self).data();
      for (std::size_t r = 0; r < rows; ++r, gr += outw)
        for (std::size_t c = 0; c < outw; ++c) gb[c] += gr[c];
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_shape("add", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const int ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), {a, b}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    for (int p : {ia, ib}) {
      if (!t.requires_grad(p)) continue;
      auto gp = t.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  check_same_shape("sub", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  const int ia = a.id, ib = b.id;
  return a.tape->record("sub", std::move(out), {a, b}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    if (t.requires_grad(ia)) {
      auto gp = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto gp = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const int ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), {a, b}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    if (t.requires_grad(ia)) {
      auto gp = t.grad(ia);
      const auto& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto gp = t.grad(ib);
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  const int ia = a.id;
  return a.tape->record("scale", std::move(out), {a}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    auto gp = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Tensor<T>& xv = x.value();
  const auto n = static_cast<Eigen::Index>(xv.numel());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  Eigen::Map<const Arr> in(xv.data(), n);
  Tensor<T> out(xv.shape());
  Eigen::Map<Arr>(out.data(), n) = in * (T(0.5) * (T(1) + (in * inv_sqrt2).erf()));
  const int ix = x.id;
  return x.tape->record("gelu", std::move(out), {x}, [=](Tape<T>& t, int self) {
    // d/dx [x * Phi(x)] = Phi(x) + x * phi(x), recomputed from the input.
    Eigen::Map<const Arr> xin(t.value(ix).data(), n);
    auto g = grad_view(t, self);
    auto gp = t.grad(ix);
    Eigen::Map<Arr>(gp.data(), n) += Eigen::Map<const Arr>(g.data(), n) *
        (T(0.5) * (T(1) + (xin * inv_sqrt2).erf()) + xin * inv_sqrt2pi * (T(-0.5) * xin.square()).exp());
  });
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Tensor<T>& xv = x.value();
  require(axis < xv.rank(), "softmax: axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(xv.shape()));
  const AxisSplit s = split_axis(xv.shape(), axis);
  const std::size_t block = s.len * s.inner;
  const auto total = static_cast<Eigen::Index>(xv.numel());
  // Element (o, j, in) lives at o * block + j * inner + in; reductions run
  // over j with the inner index contiguous.
  Buffer<T> red(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    T* m = red.data() + o * s.inner;
    const T* src = xv.data() + o * block;
    std::copy_n(src, s.inner, m);
    for (std::size_t j = 1; j < s.len; ++j)
      for (std::size_t in = 0; in < s.inner; ++in) m[in] = std::max(m[in], src[j * s.inner + in]);
  }
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    const T* m = red.data() + o * s.inner;
    const T* src = xv.data() + o * block;
    T* dst = out.data() + o * block;
    for (std::size_t j = 0; j < s.len; ++j)
      for (std::size_t in = 0; in < s.inner; ++in) dst[j * s.inner + in] = src[j * s.inner + in] - m[in];
  }
  Eigen::Map<Arr> ov(out.data(), total);
  ov = ov.exp();
  std::fill(red.begin(), red.end(), T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    T* sum = red.data() + o * s.inner;
    const T* e = out.data() + o * block;
    for (std::size_t j = 0; j < s.len; ++j)
      for (std::size_t in = 0; in < s.inner; ++in) sum[in] += e[j * s.inner + in];
  }
  for (auto& v : red) v = T(1) / v;
  for (std::size_t o = 0; o < s.outer; ++o) {
    const T* inv = red.data() + o * s.inner;
    T* e = out.data() + o * block;
    for (std::size_t j = 0; j < s.len; ++j)
      for (std::size_t in = 0; in < s.inner; ++in) e[j * s.inner + in] *= inv[in];
  }
  const int ix = x.id;
  return x.tape->record("softmax", std::move(out), {x}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    auto gp = t.grad(ix);
    const auto& yv = t.value(self);
    Buffer<T> dot(s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const T* y = yv.data() + o * block;
      const T* go = g.data() + o * block;
      T* gi = gp.data() + o * block;
      std::fill(dot.begin(), dot.end(), T(0));
      for (std::size_t j = 0; j < s.len; ++j)
        for (std::size_t in = 0; in < s.inner; ++in) dot[in] += y[j * s.inner + in] * go[j * s.inner + in];
      for (std::size_t j = 0; j < s.len; ++j)
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t k = j * s.inner + in;
          gi[k] += y[k] * (go[k] - dot[in]);
        }
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value();
  out.reshape(std::move(shape));
  const int ix = x.id;
  return x.tape->record("reshape", std::move(out), {x}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    auto gp = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
  });
}

template <typename T>
Var<T> sum_axis(Var<T> x, std::size_t axis) {
  const Tensor<T>& xv = x.value();
  require(axis < xv.rank(), "sum_axis: axis out of range");
  const AxisSplit s = split_axis(xv.shape(), axis);
  Shape oshape = xv.shape();
  oshape.erase(oshape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(oshape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.len; ++j) {
      const T* src = xv.data() + (o * s.len + j) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in];
    }
  }
  const int ix = x.id;
  return x.tape->record("sum_axis", std::move(out), {x}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    auto gp = t.grad(ix);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < s.len; ++j) {
        T* dst = gp.data() + (o * s.len + j) * s.inner;
        const T* src = g.data() + o * s.inner;
        for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in];
      }
    }
  });
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  T total = 0;
  for (T v : x.value().values()) total += v;
  const int ix = x.id;
  return x.tape->record("sum_all", Tensor<T>::scalar(total), {x}, [=](Tape<T>& t, int self) {
    const T g = grad_view(t, self)[0];
    for (auto& v : t.grad(ix)) v += g;
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<int> index) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  require(!index.empty(), "gather_rows: empty index");
  Tensor<T> out(Shape{index.size(), d});
  for (std::size_t r = 0; r < index.size(); ++r) {
    const int src = index[r];
    if (src < 0 || static_cast<std::size_t>(src) >= n) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(src) +
                                  " out of range [0, " + std::to_string(n) + ")");
    }
    std::copy_n(xv.data() + static_cast<std::size_t>(src) * d, d, out.data() + r * d);
  }
  const int ix = x.id;
  auto idx = std::make_shared<const std::vector<int>>(std::move(index));
  return x.tape->record("gather_rows", std::move(out), {x}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    auto gp = t.grad(ix);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      T* dst = gp.data() + static_cast<std::size_t>((*idx)[r]) * d;
      const T* src = g.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var<T> scale_rows(Var<T> x, Var<T> s) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& sv = s.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  require(sv.numel() == n, "scale_rows: need one scale per row");
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= sv[r];
  const int ix = x.id, is = s.id;
  return x.tape->record("scale_rows", std::move(out), {x, s}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    const auto& xv = t.value(ix);
    const auto& sv = t.value(is);
    if (t.requires_grad(ix)) {
      auto gx = t.grad(ix);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] * sv[r];
    }
    if (t.requires_grad(is)) {
      auto gs = t.grad(is);
      for (std::size_t r = 0; r < n; ++r) {
        T acc = 0;
        for (std::size_t c = 0; c < d; ++c) acc += g[r * d + c] * xv[r * d + c];
        gs[r] += acc;
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  require(gamma.value().numel() == d && beta.value().numel() == d,
          "layer_norm: affine parameters must match the last dimension");
  auto xhat = std::make_shared<Buffer<T>>(n * d);
  auto inv_std = std::make_shared<Buffer<T>>(n);
  Tensor<T> out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = xv.data() + r * d;
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mean) * is;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record("layer_norm", std::move(out), {x, gamma, beta},
                        [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    const auto& gv = t.value(ig);
    if (t.requires_grad(ig) || t.requires_grad(ib)) {
      auto gg = t.requires_grad(ig) ? t.grad(ig) : std::span<T>{};
      auto gb = t.requires_grad(ib) ? t.grad(ib) : std::span<T>{};
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          if (!gg.empty()) gg[c] += g[r * d + c] * (*xhat)[r * d + c];
          if (!gb.empty()) gb[c] += g[r * d + c];
        }
      }
    }
    if (t.requires_grad(ix)) {
      auto gx = t.grad(ix);
      for (std::size_t r = 0; r < n; ++r) {
        T mean_dh = 0, mean_dh_h = 0;
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = g[r * d + c] * gv[c];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + c];
        }
        mean_dh /= T(d);
        mean_dh_h /= T(d);
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = g[r * d + c] * gv[c];
          gx[r * d + c] +=
              (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * d + c] * mean_dh_h);
        }
      }
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t n = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.value().rows() == n, "concat_cols: row counts differ");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor<T> out(Shape{n, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + off);
    off += widths[k];
  }
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].tape->record("concat_cols", std::move(out), parts,
                               [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        auto gp = t.grad(ids[k]);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c)
            gp[r * widths[k] + c] += g[r * total + off + c];
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  require(begin < end && end <= d, "slice_cols: range [" + std::to_string(begin) + ", " +
                                       std::to_string(end) + ") invalid for width " +
                                       std::to_string(d));
  const std::size_t w = end - begin;
  Tensor<T> out(Shape{n, w});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(xv.data() + r * d + begin, w, out.data() + r * w);
  const int ix = x.id;
  return x.tape->record("slice_cols", std::move(out), {x}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    auto gp = t.grad(ix);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) gp[r * d + begin + c] += g[r * w + c];
  });
}

template <typename T>
Var<T> affine_cols(Var<T> x, std::vector<T> mulv, std::vector<T> addv) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  require(mulv.size() == d && addv.size() == d, "affine_cols: coefficient length mismatch");
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = out[r * d + c] * mulv[c] + addv[c];
  const int ix = x.id;
  return x.tape->record("affine_cols", std::move(out), {x}, [=](Tape<T>& t, int self) {
    auto g = grad_view(t, self);
    auto gp = t.grad(ix);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) gp[r * d + c] += g[r * d + c] * mulv[c];
  });
}

template <typename T>
Var<T> relative_l2(Var<T> pred, const Tensor<T>& truth) {
  const Tensor<T>& pv = pred.value();
  require(pv.numel() == truth.numel(), "relative_l2: shape mismatch " +
                                           shape_str(pv.shape()) + " vs " +
                                           shape_str(truth.shape()));
  T num2 = 0, den2 = 0;
  for (std::size_t i = 0; i < pv.numel(); ++i) {
    const T e = pv[i] - truth[i];
    num2 += e * e;
    den2 += truth[i] * truth[i];
  }
  if (!(den2 > T(0))) throw NumericError("relative_l2: reference field has zero norm");
  const T num = std::sqrt(num2), den = std::sqrt(den2);
  const int ip = pred.id;
  auto tv = std::make_shared<const Tensor<T>>(truth);
  return pred.tape->record("relative_l2", Tensor<T>::scalar(num / den), {pred},
                           [=](Tape<T>& t, int self) {
    if (num == T(0)) return;
    const T g = grad_view(t, self)[0];
    auto gp = t.grad(ip);
    const auto& pv = t.value(ip);
    const T c = g / (num * den);
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += c * (pv[i] - (*tv)[i]);
  });
}

template <typename T>
Var<T> add_scalars(const std::vector<Var<T>>& terms) {
  require(!terms.empty(), "add_scalars: no terms");
  T total = 0;
  std::vector<int> ids;
  for (const auto& v : terms) {
    require(v.value().numel() == 1, "add_scalars: non-scalar term");
    total += v.value()[0];
    ids.push_back(v.id);
  }
  return terms[0].tape->record("add_scalars", Tensor<T>::scalar(total), terms,
                               [=](Tape<T>& t, int self) {
    const T g = grad_view(t, self)[0];
    for (int id : ids)
      if (t.requires_grad(id)) t.grad(id)[0] += g;
  });
}

#define MNO_INSTANTIATE(T)                                                         \
  template class Tape<T>;                                                          \
  template Var<T> matmul(Var<T>, Var<T>, bool, bool);                              \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                  \
  template Var<T> add(Var<T>, Var<T>);                                             \
  template Var<T> sub(Var<T>, Var<T>);                                             \
  template Var<T> mul(Var<T>, Var<T>);                                             \
  template Var<T> scale(Var<T>, T);                                                \
  template Var<T> gelu(Var<T>);                                                    \
  template Var<T> softmax(Var<T>, std::size_t);                                    \
  template Var<T> reshape(Var<T>, Shape);                                          \
  template Var<T> sum_axis(Var<T>, std::size_t);                                   \
  template Var<T> sum_all(Var<T>);                                                 \
  template Var<T> gather_rows(Var<T>, std::vector<int>);                           \
  template Var<T> scale_rows(Var<T>, Var<T>);                                      \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                           \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                         \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                    \
  template Var<T> affine_cols(Var<T>, std::vector<T>, std::vector<T>);             \
  template Var<T> relative_l2(Var<T>, const Tensor<T>&);                           \
  template Var<T> add_scalars(const std::vector<Var<T>>&);

MNO_INSTANTIATE(float)
MNO_INSTANTIATE(double)

}  // namespace mno
