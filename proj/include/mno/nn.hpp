#pragma once

#include <string>
#include <vector>

#include "mno/autodiff.hpp"
#include "mno/params.hpp"

namespace mno {

enum class Activation { kGelu, kIdentity };

struct MlpSpec {
  std::vector<std::size_t> widths;  // input, hidden..., output
  Activation activation = Activation::kGelu;
  bool bias = true;

  /// Default two-layer map: in -> hidden -> out with one gelu.
  static MlpSpec two_layer(std::size_t in, std::size_t hidden, std::size_t out) {
    return MlpSpec{{in, hidden, out}, Activation::kGelu, true};
  }
  std::size_t in() const { return widths.front(); }
  std::size_t out() const { return widths.back(); }
  void validate() const;
};

/// Registers `<prefix>.l<i>.w` [in x out] and, with bias, `<prefix>.l<i>.b`.
template <typename T>
void init_mlp(ParamSet<T>& params, const std::string& prefix, const MlpSpec& spec, Rng& rng);

/// Affine layers with the activation between them (none after the last).
template <typename T>
Var<T> mlp_forward(const MlpSpec& spec, ParamBinding<T>& params, const std::string& prefix,
                   Var<T> x);

/// Registers a single affine map `<prefix>.w`, `<prefix>.b`.
template <typename T>
void init_affine(ParamSet<T>& params, const std::string& prefix, std::size_t in,
                 std::size_t out, Rng& rng);
template <typename T>
Var<T> affine_forward(ParamBinding<T>& params, const std::string& prefix, Var<T> x);

/// Multi-head self-attention: projections w_q, w_k, w_v and output w_o.
template <typename T>
void init_msa(ParamSet<T>& params, const std::string& prefix, std::size_t dim, Rng& rng);

/// Per-head attention weights, recorded when a trace is passed to msa_forward.
template <typename T>
struct MsaTrace {
  std::vector<Tensor<T>> weights;  // heads x [M x M]
};

template <typename T>
Var<T> msa_forward(ParamBinding<T>& params, const std::string& prefix, Var<T> tokens,
                   std::size_t heads, MsaTrace<T>* trace = nullptr);

}  // namespace mno
