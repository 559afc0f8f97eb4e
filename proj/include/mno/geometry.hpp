#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace mno {

/// One point cloud: positions [N x 3], features [N x F], targets [N x O],
/// stored row-major in float32. F may be zero.
struct PointSample {
  std::size_t n = 0;
  std::size_t f = 0;
  std::size_t o = 0;
  std::vector<float> positions;
  std::vector<float> features;
  std::vector<float> targets;
  std::string name;

  /// Set by normalize_sample: the bounding-box centroid and half-extent that
  /// were removed from the positions.
  std::array<double, 3> position_center{0.0, 0.0, 0.0};
  double position_scale = 1.0;

  std::array<float, 3> position(std::size_t i) const {
    return {positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]};
  }

  /// Throws DataError when sizes disagree, N or O is zero, or any value is
  /// not finite.
  void validate() const;
};

/// k-NN table. Row i lists i itself, then its k-1 nearest other points by
/// Euclidean distance with ties resolved by smaller index.
struct NeighborGraph {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<int> indices;     // n * k
  std::vector<double> offsets;  // n * k * 3, neighbor minus center

  int index(std::size_t i, std::size_t j) const { return indices[i * k + j]; }
  std::array<double, 3> offset(std::size_t i, std::size_t j) const {
    const std::size_t b = (i * k + j) * 3;
    return {offsets[b], offsets[b + 1], offsets[b + 2]};
  }
};

/// Exact brute-force construction; O(N^2 log k). Throws std::invalid_argument
/// when k is 0 or exceeds N, DataError on non-finite positions.
NeighborGraph knn_graph(const std::vector<float>& positions, std::size_t k);
inline NeighborGraph knn_graph(const PointSample& s, std::size_t k) {
  return knn_graph(s.positions, k);
}

/// positions[neighbor] - positions[center], evaluated in double so that
/// adding the center back reproduces the neighbor exactly.
std::vector<double> relative_offsets(const std::vector<float>& positions,
                                     const std::vector<int>& indices, std::size_t k);

/// Per-channel z-score statistics for features and targets.
struct NormStats {
  std::vector<double> feature_mean, feature_std;
  std::vector<double> target_mean, target_std;

  static NormStats identity(std::size_t f, std::size_t o);
  /// Means and population standard deviations over every point of every
  /// sample. Channels with zero variance get std = 1.
  static NormStats fit(const std::vector<PointSample>& samples);
  void validate(std::size_t f, std::size_t o) const;
};

/// Z-scores features and targets, centers positions on the bounding-box
/// centroid and divides by the largest half-extent (1 when the extent is 0).
PointSample normalize_sample(const PointSample& sample, const NormStats& stats);
/// Inverse of normalize_sample, using the stored position center/scale.
PointSample denormalize_sample(const PointSample& sample, const NormStats& stats);

/// Several samples concatenated along the point axis. Graph indices are
/// global (already shifted by the sample's start offset) and never point
/// outside their own sample.
struct Batch {
  std::vector<PointSample> samples;
  std::vector<std::size_t> starts;
  std::vector<NeighborGraph> graphs;
  std::size_t total_points = 0;
  std::size_t f = 0;
  std::size_t o = 0;

  std::vector<float> positions() const;
  std::vector<float> features() const;
  std::vector<float> targets() const;
};

/// Throws DataError when the samples disagree on F or O.
Batch batch_pack(std::vector<PointSample> samples, std::size_t k);

// "MNO1" point-set files: little-endian magic "MNO1", u32 N, u32 F, u32 O,
// float32 positions[N*3], features[N*F], targets[N*O], u32 name length,
// UTF-8 name bytes.
std::vector<unsigned char> encode_pointset(const PointSample& sample);
PointSample decode_pointset(const std::vector<unsigned char>& bytes);
void write_pointset(const PointSample& sample, const std::filesystem::path& path);
PointSample read_pointset(const std::filesystem::path& path);

}  // namespace mno
