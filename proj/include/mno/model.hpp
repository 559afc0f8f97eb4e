#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mno/autodiff.hpp"
#include "mno/geometry.hpp"
#include "mno/manifest.hpp"
#include "mno/nn.hpp"
#include "mno/params.hpp"

namespace mno {

/// Which of the three attention modules run inside every block.
struct ModuleMask {
  bool global = true;
  bool local = true;
  bool micro = true;

  bool any() const { return global || local || micro; }
  /// "G", "L", "M", "GL", ... "GLM" in canonical order.
  std::string label() const;
  /// Accepts any ordering of the letters G, L, M (case-insensitive).
  static ModuleMask parse(const std::string& label);
  friend bool operator==(const ModuleMask&, const ModuleMask&) = default;
};

struct MnoConfig {
  std::size_t blocks = 4;
  std::size_t dim = 128;
  std::size_t modes = 256;
  std::size_t heads = 8;
  std::size_t k = 16;
  ModuleMask mask;
  std::size_t in_features = 0;
  std::size_t out_dim = 1;

  void validate() const;
  void to_manifest(Manifest& m) const;
  static MnoConfig from_manifest(const Manifest& m);
  friend bool operator==(const MnoConfig&, const MnoConfig&) = default;
};

/// Parameter layout:
///   encoder.l{0,1}                     (3+F) -> D -> D
///   block.<b>.norm1 / norm2            layer-norm gamma, beta
///   block.<b>.global.{p_mlp,q_mlp}     D -> D -> M
///   block.<b>.global.msa.w_{q,k,v,o}
///   block.<b>.local.w_{q,k,v}          D -> D
///   block.<b>.local.pos_mlp            3 -> D -> D
///   block.<b>.local.kernel_mlp         D -> D -> D
///   block.<b>.micro.score_mlp          D -> D -> 1
///   block.<b>.ffn                      D -> D -> D
///   decoder.l{0,1}                     D -> D -> O
/// Every block owns all three module parameter groups regardless of the mask,
/// so the parameter count depends only on sizes.
template <typename T>
struct MnoModel {
  MnoConfig config;
  ParamSet<T> params;

  static MnoModel init(const MnoConfig& config, std::uint64_t seed);

  template <typename U>
  MnoModel<U> cast() const {
    return MnoModel<U>{config, params.template cast<U>()};
  }
};

std::string block_prefix(std::size_t b);
/// Parameter paths belonging to module `name` ("global", "local", "micro").
bool param_in_module(const std::string& path, const std::string& name);

struct GlobalTrace {
  std::vector<double> p;  // N x M, softmax over points
  std::vector<double> q;  // N x M, softmax over modes
  std::size_t n = 0, m = 0;
};

struct MicroTrace {
  std::vector<double> score;  // N
};

template <typename T>
Var<T> encode(const MnoConfig& cfg, ParamBinding<T>& params, Var<T> pos, Var<T> features);

template <typename T>
Var<T> global_attention(const MnoConfig& cfg, ParamBinding<T>& params,
                        const std::string& prefix, Var<T> x, GlobalTrace* trace = nullptr);

/// `offsets` is the graph's [N*k x 3] offset table already on the tape.
template <typename T>
Var<T> local_attention(const MnoConfig& cfg, ParamBinding<T>& params,
                       const std::string& prefix, Var<T> x, const NeighborGraph& graph,
                       Var<T> offsets);

template <typename T>
Var<T> micro_attention(const MnoConfig& cfg, ParamBinding<T>& params,
                       const std::string& prefix, Var<T> x, MicroTrace* trace = nullptr);

struct BlockTrace {
  GlobalTrace global;
  MicroTrace micro;
};

/// Pre-norm residual fusion: Y = X + sum of enabled modules on LN1(X), then
/// Z = Y + FFN(LN2(Y)).
template <typename T>
Var<T> mno_block(const MnoConfig& cfg, ParamBinding<T>& params, std::size_t block, Var<T> x,
                 const NeighborGraph& graph, Var<T> offsets, const ModuleMask& mask,
                 BlockTrace* trace = nullptr);

template <typename T>
Var<T> decode(const MnoConfig& cfg, ParamBinding<T>& params, Var<T> latent);

/// Offsets of `graph` as a constant on the tape, [N*k x 3].
template <typename T>
Var<T> offsets_constant(Tape<T>& tape, const NeighborGraph& graph);

/// Full pipeline on one (already normalized) sample. Traces, when given,
/// receive one entry per block.
template <typename T>
Var<T> forward(const MnoModel<T>& model, ParamBinding<T>& params, const PointSample& sample,
               const NeighborGraph& graph, std::vector<BlockTrace>* traces = nullptr);

/// Evaluates without gradients and returns the [N x O] prediction.
template <typename T>
Tensor<T> predict(const MnoModel<T>& model, const PointSample& sample,
                  const NeighborGraph& graph);

/// Per-sample forwards over a packed batch, concatenated along the points.
template <typename T>
Tensor<T> predict_batch(const MnoModel<T>& model, const Batch& batch);

template <typename T>
Tensor<T> sample_positions(const PointSample& s);
template <typename T>
Tensor<T> sample_features(const PointSample& s);
template <typename T>
Tensor<T> sample_targets(const PointSample& s);

/// Binary checkpoint: magic "MNOCKPT1", u32 version, u32 manifest length +
/// manifest text (config and run metadata), u32 record count, then per record
/// u32 path length + path, u8 trainable, u32 rank, u32 dims..., float32 data.
struct Checkpoint {
  MnoConfig config;
  ParamSet<float> params;
  NormStats stats;
  Manifest manifest;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mno
