#pragma once

// Straight-line reference implementations used as test oracles. Everything
// here is plain loops over row-major std::vector<double>; nothing goes
// through the tape, Eigen or the model code, only parameter values are read.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "mno/model.hpp"

namespace oracle {

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0) : r(rows), c(cols), v(rows * cols, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

template <typename T>
inline Mat from_tensor(const mno::Tensor<T>& t) {
  Mat m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.numel(); ++i) m.v[i] = static_cast<double>(t[i]);
  return m;
}

template <typename T>
inline Mat param(const mno::ParamSet<T>& ps, const std::string& path) {
  return from_tensor(ps.value(path));
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.r, b.c);
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < b.c; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.c; ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline Mat transpose(const Mat& a) {
  Mat out(a.c, a.r);
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < a.c; ++j) out(j, i) = a(i, j);
  return out;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// x W + b, with b broadcast over rows.
template <typename T>
Mat affine(const mno::ParamSet<T>& ps, const std::string& prefix, const Mat& x) {
  Mat w = param(ps, prefix + ".w");
  Mat b = param(ps, prefix + ".b");
  Mat y = matmul(x, w);
  for (std::size_t i = 0; i < y.r; ++i)
    for (std::size_t j = 0; j < y.c; ++j) y(i, j) += b.v[j];
  return y;
}

/// Two (or more) affine layers with gelu between them.
template <typename T>
Mat mlp(const mno::ParamSet<T>& ps, const std::string& prefix, const Mat& x, std::size_t layers = 2) {
  Mat h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    h = affine(ps, prefix + ".l" + std::to_string(l), h);
    if (l + 1 < layers)
      for (auto& e : h.v) e = gelu(e);
  }
  return h;
}

/// Softmax over rows (axis 0: each column sums to 1) or columns (axis 1).
inline Mat softmax(const Mat& x, int axis) {
  Mat out = x;
  if (axis == 1) {
    for (std::size_t i = 0; i < x.r; ++i) {
      double mx = -INFINITY, s = 0;
      for (std::size_t j = 0; j < x.c; ++j) mx = std::max(mx, x(i, j));
      for (std::size_t j = 0; j < x.c; ++j) s += std::exp(x(i, j) - mx);
      for (std::size_t j = 0; j < x.c; ++j) out(i, j) = std::exp(x(i, j) - mx) / s;
    }
  } else {
    for (std::size_t j = 0; j < x.c; ++j) {
      double mx = -INFINITY, s = 0;
      for (std::size_t i = 0; i < x.r; ++i) mx = std::max(mx, x(i, j));
      for (std::size_t i = 0; i < x.r; ++i) s += std::exp(x(i, j) - mx);
      for (std::size_t i = 0; i < x.r; ++i) out(i, j) = std::exp(x(i, j) - mx) / s;
    }
  }
  return out;
}

inline Mat layer_norm(const Mat& x, const Mat& gamma, const Mat& beta, double eps = 1e-5) {
  Mat out = x;
  for (std::size_t i = 0; i < x.r; ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < x.c; ++j) mean += x(i, j);
    mean /= static_cast<double>(x.c);
    for (std::size_t j = 0; j < x.c; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(x.c);
    for (std::size_t j = 0; j < x.c; ++j)
      out(i, j) = (x(i, j) - mean) / std::sqrt(var + eps) * gamma.v[j] + beta.v[j];
  }
  return out;
}

/// Multi-head attention over token rows, q k^T / sqrt(d_head), output projection.
template <typename T>
Mat msa(const mno::ParamSet<T>& ps, const std::string& prefix, const Mat& x, std::size_t heads) {
  const Mat q = affine(ps, prefix + ".w_q", x), k = affine(ps, prefix + ".w_k", x),
            v = affine(ps, prefix + ".w_v", x);
  const std::size_t m = x.r, d = x.c, hd = d / heads;
  Mat cat(m, d);
  for (std::size_t h = 0; h < heads; ++h) {
    Mat logits(m, m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += q(i, h * hd + c) * k(j, h * hd + c);
        logits(i, j) = s / std::sqrt(static_cast<double>(hd));
      }
    const Mat w = softmax(logits, 1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < hd; ++c) {
        double s = 0;
        for (std::size_t j = 0; j < m; ++j) s += w(i, j) * v(j, h * hd + c);
        cat(i, h * hd + c) = s;
      }
  }
  return affine(ps, prefix + ".w_o", cat);
}

template <typename T>
Mat global_attention(const mno::ParamSet<T>& ps, const std::string& pre, const Mat& x,
                     std::size_t heads) {
  const Mat p = softmax(mlp(ps, pre + ".p_mlp", x), 0);
  const Mat q = softmax(mlp(ps, pre + ".q_mlp", x), 1);
  const Mat modes = matmul(transpose(p), x);
  return matmul(q, msa(ps, pre + ".msa", modes, heads));
}

/// Vector attention over each point's neighbor list; `nbr` holds N*k indices
/// and `offsets` N*k rows of (neighbor - center).
template <typename T>
Mat local_attention(const mno::ParamSet<T>& ps, const std::string& pre, const Mat& x,
                    const std::vector<int>& nbr, const Mat& offsets, std::size_t k) {
  const std::size_t n = x.r, d = x.c;
  const Mat q = affine(ps, pre + ".w_q", x), kk = affine(ps, pre + ".w_k", x),
            v = affine(ps, pre + ".w_v", x);
  const Mat pos = mlp(ps, pre + ".pos_mlp", offsets);
  Mat out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    Mat arg(k, d);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t nb = static_cast<std::size_t>(nbr[i * k + j]);
      for (std::size_t c = 0; c < d; ++c) arg(j, c) = q(i, c) - kk(nb, c) + pos(i * k + j, c);
    }
    const Mat w = softmax(mlp(ps, pre + ".kernel_mlp", arg), 0);  // over neighbors, per channel
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t nb = static_cast<std::size_t>(nbr[i * k + j]);
      for (std::size_t c = 0; c < d; ++c) out(i, c) += w(j, c) * (v(nb, c) + pos(i * k + j, c));
    }
  }
  return out;
}

template <typename T>
Mat micro_attention(const mno::ParamSet<T>& ps, const std::string& pre, const Mat& x) {
  const Mat score = softmax(mlp(ps, pre + ".score_mlp", x), 0);
  Mat out = x;
  for (std::size_t i = 0; i < x.r; ++i)
    for (std::size_t c = 0; c < x.c; ++c) out(i, c) += score.v[i] * x(i, c);
  return out;
}

template <typename T>
Mat block(const mno::ParamSet<T>& ps, const mno::MnoConfig& cfg, std::size_t b, const Mat& x,
          const std::vector<int>& nbr, const Mat& offsets) {
  const std::string pre = "block." + std::to_string(b);
  const Mat h = layer_norm(x, param(ps, pre + ".norm1.gamma"), param(ps, pre + ".norm1.beta"));
  Mat y = x;
  if (cfg.mask.global) y = add(y, global_attention(ps, pre + ".global", h, cfg.heads));
  if (cfg.mask.local) y = add(y, local_attention(ps, pre + ".local", h, nbr, offsets, cfg.k));
  if (cfg.mask.micro) y = add(y, micro_attention(ps, pre + ".micro", h));
  const Mat h2 = layer_norm(y, param(ps, pre + ".norm2.gamma"), param(ps, pre + ".norm2.beta"));
  return add(y, mlp(ps, pre + ".ffn", h2));
}

/// O(N^2) k-NN: full sort of every row by (squared distance, index), self first.
inline std::vector<int> knn(const std::vector<float>& pos, std::size_t k) {
  const std::size_t n = pos.size() / 3;
  std::vector<int> out;
  out.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> all;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d2 = 0;
      for (int c = 0; c < 3; ++c) {
        const double t = static_cast<double>(pos[j * 3 + c]) - static_cast<double>(pos[i * 3 + c]);
        d2 += t * t;
      }
      all.emplace_back(d2, static_cast<int>(j));
    }
    std::sort(all.begin(), all.end());
    out.push_back(static_cast<int>(i));
    for (std::size_t j = 0; j + 1 < k; ++j) out.push_back(all[j].second);
  }
  return out;
}

inline Mat offsets_of(const std::vector<float>& pos, const std::vector<int>& nbr, std::size_t k) {
  const std::size_t n = pos.size() / 3;
  Mat off(n * k, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < 3; ++c)
        off(i * k + j, c) = static_cast<double>(pos[static_cast<std::size_t>(nbr[i * k + j]) * 3 + c]) -
                            static_cast<double>(pos[i * 3 + c]);
  return off;
}

/// Full pipeline on an already-normalized sample.
template <typename T>
Mat forward(const mno::MnoModel<T>& model, const mno::PointSample& s) {
  const auto& cfg = model.config;
  Mat in(s.n, 3 + s.f);
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) in(i, c) = s.positions[i * 3 + c];
    for (std::size_t c = 0; c < s.f; ++c) in(i, 3 + c) = s.features[i * s.f + c];
  }
  Mat x = mlp(model.params, "encoder", in);
  const auto nbr = knn(s.positions, cfg.k);
  const Mat off = offsets_of(s.positions, nbr, cfg.k);
  for (std::size_t b = 0; b < cfg.blocks; ++b) x = block(model.params, cfg, b, x, nbr, off);
  return mlp(model.params, "decoder", x);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
double max_abs_diff(const mno::Tensor<T>& a, const Mat& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b.v[i]));
  return m;
}

}  // namespace oracle
