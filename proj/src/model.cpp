#include "mno/model.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

#include "mno/errors.hpp"

namespace mno {

std::string ModuleMask::label() const {
  std::string s;
  if (global) s += 'G';
  if (local) s += 'L';
  if (micro) s += 'M';
  return s;
}

ModuleMask ModuleMask::parse(const std::string& label) {
  ModuleMask m{false, false, false};
  for (char c : label) {
    bool* slot = nullptr;
    switch (std::toupper(static_cast<unsigned char>(c))) {
      case 'G': slot = &m.global; break;
      case 'L': slot = &m.local; break;
      case 'M': slot = &m.micro; break;
      default:
        throw std::invalid_argument("module mask '" + label + "': unknown module '" +
                                    std::string(1, c) + "' (use G, L, M)");
    }
    if (*slot) throw std::invalid_argument("module mask '" + label + "' repeats a module");
    *slot = true;
  }
  if (!m.any()) throw std::invalid_argument("module mask must enable at least one module");
  return m;
}

void MnoConfig::validate() const {
  const auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("config: ") + name + " must be positive");
  };
  positive(blocks, "blocks");
  positive(dim, "dim");
  positive(modes, "modes");
  positive(heads, "heads");
  positive(k, "k");
  positive(out_dim, "out_dim");
  if (dim % heads != 0) {
    throw std::invalid_argument("config: dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (!mask.any()) throw std::invalid_argument("config: module mask is empty");
}

void MnoConfig::to_manifest(Manifest& m) const {
  m.set_num("model.blocks", static_cast<unsigned long long>(blocks));
  m.set_num("model.dim", static_cast<unsigned long long>(dim));
  m.set_num("model.modes", static_cast<unsigned long long>(modes));
  m.set_num("model.heads", static_cast<unsigned long long>(heads));
  m.set_num("model.k", static_cast<unsigned long long>(k));
  m.set("model.mask", mask.label());
  m.set_num("model.in_features", static_cast<unsigned long long>(in_features));
  m.set_num("model.out_dim", static_cast<unsigned long long>(out_dim));
}

MnoConfig MnoConfig::from_manifest(const Manifest& m) {
  const auto num = [&](const char* key) {
    try {
      return static_cast<std::size_t>(std::stoull(m.get(key)));
    } catch (const std::logic_error&) {
      throw DataError(std::string("manifest key '") + key + "' is not an integer");
    }
  };
  MnoConfig c;
  c.blocks = num("model.blocks");
  c.dim = num("model.dim");
  c.modes = num("model.modes");
  c.heads = num("model.heads");
  c.k = num("model.k");
  c.mask = ModuleMask::parse(m.get("model.mask"));
  c.in_features = num("model.in_features");
  c.out_dim = num("model.out_dim");
  c.validate();
  return c;
}

std::string block_prefix(std::size_t b) { return "block." + std::to_string(b); }

bool param_in_module(const std::string& path, const std::string& name) {
  return path.find("." + name + ".") != std::string::npos;
}

namespace {

MlpSpec encoder_spec(const MnoConfig& c) { return MlpSpec::two_layer(3 + c.in_features, c.dim, c.dim); }
MlpSpec decoder_spec(const MnoConfig& c) { return MlpSpec::two_layer(c.dim, c.dim, c.out_dim); }
MlpSpec proj_spec(const MnoConfig& c) { return MlpSpec::two_layer(c.dim, c.dim, c.modes); }
MlpSpec pos_spec(const MnoConfig& c) { return MlpSpec::two_layer(3, c.dim, c.dim); }
MlpSpec kernel_spec(const MnoConfig& c) { return MlpSpec::two_layer(c.dim, c.dim, c.dim); }
MlpSpec score_spec(const MnoConfig& c) { return MlpSpec::two_layer(c.dim, c.dim, 1); }
MlpSpec ffn_spec(const MnoConfig& c) { return MlpSpec::two_layer(c.dim, c.dim, c.dim); }

template <typename T>
std::vector<double> to_double(const Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

}  // namespace

template <typename T>
MnoModel<T> MnoModel<T>::init(const MnoConfig& config, std::uint64_t seed) {
  config.validate();
  MnoModel<T> m;
  m.config = config;
  Rng rng(seed);
  auto& p = m.params;
  init_mlp(p, "encoder", encoder_spec(config), rng);
  for (std::size_t b = 0; b < config.blocks; ++b) {
    const std::string pre = block_prefix(b);
    for (const char* norm : {".norm1", ".norm2"}) {
      p.add(pre + norm + ".gamma", Tensor<T>({config.dim}, T(1)));
      p.add(pre + norm + ".beta", Tensor<T>({config.dim}, T(0)));
    }
    init_mlp(p, pre + ".global.p_mlp", proj_spec(config), rng);
    init_mlp(p, pre + ".global.q_mlp", proj_spec(config), rng);
    init_msa(p, pre + ".global.msa", config.dim, rng);
    for (const char* w : {".local.w_q", ".local.w_k", ".local.w_v"})
      init_affine(p, pre + w, config.dim, config.dim, rng);
    init_mlp(p, pre + ".local.pos_mlp", pos_spec(config), rng);
    init_mlp(p, pre + ".local.kernel_mlp", kernel_spec(config), rng);
    init_mlp(p, pre + ".micro.score_mlp", score_spec(config), rng);
    init_mlp(p, pre + ".ffn", ffn_spec(config), rng);
  }
  init_mlp(p, "decoder", decoder_spec(config), rng);
  return m;
}

template <typename T>
Var<T> encode(const MnoConfig& cfg, ParamBinding<T>& params, Var<T> pos, Var<T> features) {
  if (pos.value().rank() != 2 || pos.value().dim(1) != 3) {
    throw std::invalid_argument("encode: positions must be [N x 3]");
  }
  Var<T> in = pos;
  if (cfg.in_features > 0) {
    if (!features.valid() || features.value().cols() != cfg.in_features ||
        features.value().rows() != pos.value().rows()) {
      throw std::invalid_argument("encode: expected [N x " + std::to_string(cfg.in_features) +
                                  "] features");
    }
    in = concat_cols<T>({pos, features});
  } else if (features.valid()) {
    throw std::invalid_argument("encode: model takes no features");
  }
  return mlp_forward(encoder_spec(cfg), params, "encoder", in);
}

template <typename T>
Var<T> global_attention(const MnoConfig& cfg, ParamBinding<T>& params,
                        const std::string& prefix, Var<T> x, GlobalTrace* trace) {
  Var<T> p = softmax(mlp_forward(proj_spec(cfg), params, prefix + ".p_mlp", x), 0);
  Var<T> q = softmax(mlp_forward(proj_spec(cfg), params, prefix + ".q_mlp", x), 1);
  if (trace) {
    trace->p = to_double(p.value());
    trace->q = to_double(q.value());
    trace->n = p.value().dim(0);
    trace->m = p.value().dim(1);
  }
  Var<T> modes = matmul(p, x, /*trans_a=*/true);
  Var<T> mixed = msa_forward(params, prefix + ".msa", modes, cfg.heads);
  return matmul(q, mixed);
}

template <typename T>
Var<T> local_attention(const MnoConfig& cfg, ParamBinding<T>& params,
                       const std::string& prefix, Var<T> x, const NeighborGraph& graph,
                       Var<T> offsets) {
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (graph.n != n || graph.k != cfg.k || graph.indices.size() != n * graph.k) {
    throw std::invalid_argument("local_attention: graph (N=" + std::to_string(graph.n) +
                                ", k=" + std::to_string(graph.k) + ") does not match input (N=" +
                                std::to_string(n) + ", k=" + std::to_string(cfg.k) + ")");
  }
  const std::size_t k = graph.k;
  Var<T> q = affine_forward(params, prefix + ".w_q", x);
  Var<T> kk = affine_forward(params, prefix + ".w_k", x);
  Var<T> v = affine_forward(params, prefix + ".w_v", x);
  std::vector<int> centers(n * k);
  for (std::size_t i = 0; i < n; ++i)
    std::fill_n(centers.begin() + static_cast<std::ptrdiff_t>(i * k), k, static_cast<int>(i));
  Var<T> q_rep = gather_rows(q, std::move(centers));
  Var<T> k_nbr = gather_rows(kk, graph.indices);
  Var<T> v_nbr = gather_rows(v, graph.indices);
  Var<T> pos_rel = mlp_forward(pos_spec(cfg), params, prefix + ".pos_mlp", offsets);
  Var<T> logits =
      mlp_forward(kernel_spec(cfg), params, prefix + ".kernel_mlp", add(sub(q_rep, k_nbr), pos_rel));
  Var<T> weights = softmax(reshape(logits, {n, k, d}), 1);
  Var<T> values = reshape(add(v_nbr, pos_rel), {n, k, d});
  return sum_axis(mul(weights, values), 1);
}

template <typename T>
Var<T> micro_attention(const MnoConfig& cfg, ParamBinding<T>& params,
                       const std::string& prefix, Var<T> x, MicroTrace* trace) {
  Var<T> score = softmax(mlp_forward(score_spec(cfg), params, prefix + ".score_mlp", x), 0);
  if (trace) trace->score = to_double(score.value());
  return add(x, scale_rows(x, score));
}

template <typename T>
Var<T> mno_block(const MnoConfig& cfg, ParamBinding<T>& params, std::size_t block, Var<T> x,
                 const NeighborGraph& graph, Var<T> offsets, const ModuleMask& mask,
                 BlockTrace* trace) {
  if (!mask.any()) throw std::invalid_argument("mno_block: module mask is empty");
  const std::string pre = block_prefix(block);
  Var<T> h = layer_norm(x, params.get(pre + ".norm1.gamma"), params.get(pre + ".norm1.beta"));
  Var<T> y = x;
  if (mask.global)
    y = add(y, global_attention(cfg, params, pre + ".global", h, trace ? &trace->global : nullptr));
  if (mask.local) y = add(y, local_attention(cfg, params, pre + ".local", h, graph, offsets));
  if (mask.micro)
    y = add(y, micro_attention(cfg, params, pre + ".micro", h, trace ? &trace->micro : nullptr));
  Var<T> h2 = layer_norm(y, params.get(pre + ".norm2.gamma"), params.get(pre + ".norm2.beta"));
  return add(y, mlp_forward(ffn_spec(cfg), params, pre + ".ffn", h2));
}

template <typename T>
Var<T> decode(const MnoConfig& cfg, ParamBinding<T>& params, Var<T> latent) {
  if (latent.value().cols() != cfg.dim) {
    throw std::invalid_argument("decode: latent width " + std::to_string(latent.value().cols()) +
                                " != " + std::to_string(cfg.dim));
  }
  return mlp_forward(decoder_spec(cfg), params, "decoder", latent);
}

template <typename T>
Var<T> offsets_constant(Tape<T>& tape, const NeighborGraph& graph) {
  Tensor<T> t({graph.n * graph.k, 3});
  for (std::size_t i = 0; i < graph.offsets.size(); ++i) t[i] = static_cast<T>(graph.offsets[i]);
  return tape.constant(std::move(t));
}

template <typename T>
Tensor<T> sample_positions(const PointSample& s) {
  return Tensor<T>({s.n, 3}, std::vector<T>(s.positions.begin(), s.positions.end()));
}
template <typename T>
Tensor<T> sample_features(const PointSample& s) {
  return Tensor<T>({s.n, s.f}, std::vector<T>(s.features.begin(), s.features.end()));
}
template <typename T>
Tensor<T> sample_targets(const PointSample& s) {
  return Tensor<T>({s.n, s.o}, std::vector<T>(s.targets.begin(), s.targets.end()));
}

template <typename T>
Var<T> forward(const MnoModel<T>& model, ParamBinding<T>& params, const PointSample& sample,
               const NeighborGraph& graph, std::vector<BlockTrace>* traces) {
  const MnoConfig& cfg = model.config;
  cfg.validate();
  if (sample.f != cfg.in_features || sample.o != cfg.out_dim) {
    throw std::invalid_argument("forward: sample '" + sample.name + "' has F=" +
                                std::to_string(sample.f) + " O=" + std::to_string(sample.o) +
                                ", model expects F=" + std::to_string(cfg.in_features) +
                                " O=" + std::to_string(cfg.out_dim));
  }
  if (graph.n != sample.n) throw std::invalid_argument("forward: graph built for another sample");
  Tape<T>& tape = params.tape();
  Var<T> pos = tape.constant(sample_positions<T>(sample));
  Var<T> feats = sample.f > 0 ? tape.constant(sample_features<T>(sample)) : Var<T>{};
  Var<T> x = encode(cfg, params, pos, feats);
  Var<T> offsets = offsets_constant(tape, graph);
  if (traces) traces->assign(cfg.blocks, BlockTrace{});
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    x = mno_block(cfg, params, b, x, graph, offsets, cfg.mask, traces ? &(*traces)[b] : nullptr);
  }
  return decode(cfg, params, x);
}

template <typename T>
Tensor<T> predict(const MnoModel<T>& model, const PointSample& sample,
                  const NeighborGraph& graph) {
  Tape<T> tape;
  ParamBinding<T> binding(tape, model.params);
  return forward(model, binding, sample, graph).value();
}

template <typename T>
Tensor<T> predict_batch(const MnoModel<T>& model, const Batch& batch) {
  Tensor<T> out({batch.total_points, model.config.out_dim});
  for (std::size_t s = 0; s < batch.samples.size(); ++s) {
    NeighborGraph local = batch.graphs[s];
    const int start = static_cast<int>(batch.starts[s]);
    for (auto& idx : local.indices) idx -= start;
    Tensor<T> pred = predict(model, batch.samples[s], local);
    std::copy(pred.values().begin(), pred.values().end(),
              out.data() + batch.starts[s] * model.config.out_dim);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[] = "MNOCKPT1";

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += Manifest::format_number(v[i]);
  }
  return s;
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::logic_error&) {
      throw DataError("checkpoint: bad number '" + item + "' in normalization stats");
    }
  }
  return out;
}

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> bytes) : b_(std::move(bytes)) {}
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw DataError(std::string("checkpoint truncated reading ") + what + " at byte offset " +
                      std::to_string(pos_));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  unsigned char u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::vector<unsigned char> b_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Manifest m = ckpt.manifest;
  ckpt.config.to_manifest(m);
  m.set("norm.feature_mean", join_doubles(ckpt.stats.feature_mean));
  m.set("norm.feature_std", join_doubles(ckpt.stats.feature_std));
  m.set("norm.target_mean", join_doubles(ckpt.stats.target_mean));
  m.set("norm.target_std", join_doubles(ckpt.stats.target_std));
  const std::string text = m.serialize();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
  out.write(kCkptMagic, 8);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, p] : ckpt.params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(p.trainable ? 1 : 0);
    put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.value.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  ByteReader r(std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                          std::istreambuf_iterator<char>()));
  if (r.str(8, "magic") != std::string(kCkptMagic, 8)) {
    throw DataError("'" + path.string() + "' is not an MNO checkpoint");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.manifest = Manifest::parse(r.str(r.u32("manifest length"), "manifest"));
  c.config = MnoConfig::from_manifest(c.manifest);
  c.stats.feature_mean = split_doubles(c.manifest.get("norm.feature_mean"));
  c.stats.feature_std = split_doubles(c.manifest.get("norm.feature_std"));
  c.stats.target_mean = split_doubles(c.manifest.get("norm.target_mean"));
  c.stats.target_std = split_doubles(c.manifest.get("norm.target_std"));
  c.stats.validate(c.config.in_features, c.config.out_dim);
  const std::uint32_t count = r.u32("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32("path length"), "path");
    const bool trainable = r.u8("trainable flag") != 0;
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("dim"));
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = std::bit_cast<float>(r.u32("payload"));
    c.params.add(name, Tensor<float>(std::move(shape), std::move(data)), trainable);
  }
  if (!r.done()) throw DataError("checkpoint has trailing bytes");
  // Shapes must agree with a freshly initialized model of the same config.
  const auto ref = MnoModel<float>::init(c.config, 0);
  if (ref.params.size() != c.params.size()) throw DataError("checkpoint parameter set mismatch");
  for (const auto& [name, p] : ref.params) {
    if (!c.params.contains(name) || c.params.value(name).shape() != p.value.shape()) {
      throw DataError("checkpoint parameter '" + name + "' missing or misshapen");
    }
  }
  return c;
}

#define MNO_MODEL_INSTANTIATE(T)                                                              \
  template struct MnoModel<T>;                                                                \
  template Var<T> encode(const MnoConfig&, ParamBinding<T>&, Var<T>, Var<T>);                 \
  template Var<T> global_attention(const MnoConfig&, ParamBinding<T>&, const std::string&,    \
                                   Var<T>, GlobalTrace*);                                     \
  template Var<T> local_attention(const MnoConfig&, ParamBinding<T>&, const std::string&,     \
                                  Var<T>, const NeighborGraph&, Var<T>);                      \
  template Var<T> micro_attention(const MnoConfig&, ParamBinding<T>&, const std::string&,     \
                                  Var<T>, MicroTrace*);                                       \
  template Var<T> mno_block(const MnoConfig&, ParamBinding<T>&, std::size_t, Var<T>,          \
                            const NeighborGraph&, Var<T>, const ModuleMask&, BlockTrace*);    \
  template Var<T> decode(const MnoConfig&, ParamBinding<T>&, Var<T>);                         \
  template Var<T> offsets_constant(Tape<T>&, const NeighborGraph&);                           \
  template Var<T> forward(const MnoModel<T>&, ParamBinding<T>&, const PointSample&,           \
                          const NeighborGraph&, std::vector<BlockTrace>*);                    \
  template Tensor<T> predict(const MnoModel<T>&, const PointSample&, const NeighborGraph&);   \
  template Tensor<T> predict_batch(const MnoModel<T>&, const Batch&);                         \
  template Tensor<T> sample_positions<T>(const PointSample&);                                 \
  template Tensor<T> sample_features<T>(const PointSample&);                                  \
  template Tensor<T> sample_targets<T>(const PointSample&);

MNO_MODEL_INSTANTIATE(float)
MNO_MODEL_INSTANTIATE(double)

}  // namespace mno
