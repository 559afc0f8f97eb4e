#include "mno/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mno {

void MlpSpec::validate() const {
  if (widths.size() < 2) throw std::invalid_argument("MLP needs at least input and output widths");
  for (auto w : widths)
    if (w == 0) throw std::invalid_argument("MLP widths must be positive");
}

template <typename T>
void init_mlp(ParamSet<T>& params, const std::string& prefix, const MlpSpec& spec, Rng& rng) {
  spec.validate();
  for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i) {
    const std::size_t in = spec.widths[i], out = spec.widths[i + 1];
    const std::string l = prefix + ".l" + std::to_string(i);
    params.add(l + ".w", uniform_init<T>({in, out}, in, rng));
    if (spec.bias) params.add(l + ".b", uniform_init<T>({out}, in, rng));
  }
}

template <typename T>
Var<T> mlp_forward(const MlpSpec& spec, ParamBinding<T>& params, const std::string& prefix,
                   Var<T> x) {
  spec.validate();
  if (x.value().cols() != spec.in()) {
    throw std::invalid_argument("mlp '" + prefix + "': input width " +
                                std::to_string(x.value().cols()) + " != " +
                                std::to_string(spec.in()));
  }
  Var<T> h = x;
  const std::size_t layers = spec.widths.size() - 1;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string l = prefix + ".l" + std::to_string(i);
    Var<T> b = spec.bias ? params.get(l + ".b")
                         : params.tape().constant(Tensor<T>({spec.widths[i + 1]}));
    h = linear(h, params.get(l + ".w"), b);
    if (i + 1 < layers && spec.activation == Activation::kGelu) h = gelu(h);
  }
  return h;
}

template <typename T>
void init_affine(ParamSet<T>& params, const std::string& prefix, std::size_t in,
                 std::size_t out, Rng& rng) {
  params.add(prefix + ".w", uniform_init<T>({in, out}, in, rng));
  params.add(prefix + ".b", uniform_init<T>({out}, in, rng));
}

template <typename T>
Var<T> affine_forward(ParamBinding<T>& params, const std::string& prefix, Var<T> x) {
  return linear(x, params.get(prefix + ".w"), params.get(prefix + ".b"));
}

template <typename T>
void init_msa(ParamSet<T>& params, const std::string& prefix, std::size_t dim, Rng& rng) {
  for (const char* name : {"w_q", "w_k", "w_v", "w_o"})
    init_affine(params, prefix + "." + name, dim, dim, rng);
}

template <typename T>
Var<T> msa_forward(ParamBinding<T>& params, const std::string& prefix, Var<T> tokens,
                   std::size_t heads, MsaTrace<T>* trace) {
  const auto& tv = tokens.value();
  if (tv.rank() != 2) throw std::invalid_argument("msa: tokens must be [M x D]");
  const std::size_t dim = tv.dim(1);
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("msa: dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const std::size_t hd = dim / heads;
  Var<T> q = affine_forward(params, prefix + ".w_q", tokens);
  Var<T> k = affine_forward(params, prefix + ".w_k", tokens);
  Var<T> v = affine_forward(params, prefix + ".w_v", tokens);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  if (trace) trace->weights.clear();
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = heads == 1 ? q : slice_cols(q, h * hd, (h + 1) * hd);
    Var<T> kh = heads == 1 ? k : slice_cols(k, h * hd, (h + 1) * hd);
    Var<T> vh = heads == 1 ? v : slice_cols(v, h * hd, (h + 1) * hd);
    Var<T> scores = scale(matmul(qh, kh, false, true), inv_sqrt);
    Var<T> w = softmax(scores, 1);
    if (trace) trace->weights.push_back(w.value());
    outs.push_back(matmul(w, vh));
  }
  Var<T> merged = heads == 1 ? outs[0] : concat_cols(outs);
  return affine_forward(params, prefix + ".w_o", merged);
}

#define MNO_NN_INSTANTIATE(T)                                                              \
  template void init_mlp(ParamSet<T>&, const std::string&, const MlpSpec&, Rng&);          \
  template Var<T> mlp_forward(const MlpSpec&, ParamBinding<T>&, const std::string&,        \
                              Var<T>);                                                     \
  template void init_affine(ParamSet<T>&, const std::string&, std::size_t, std::size_t,    \
                            Rng&);                                                         \
  template Var<T> affine_forward(ParamBinding<T>&, const std::string&, Var<T>);            \
  template void init_msa(ParamSet<T>&, const std::string&, std::size_t, Rng&);             \
  template Var<T> msa_forward(ParamBinding<T>&, const std::string&, Var<T>, std::size_t,   \
                              MsaTrace<T>*);

MNO_NN_INSTANTIATE(float)
MNO_NN_INSTANTIATE(double)

}  // namespace mno
