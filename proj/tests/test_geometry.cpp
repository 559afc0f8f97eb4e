#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "mno/errors.hpp"
#include "mno/geometry.hpp"
#include "oracle.hpp"

using namespace mno;

namespace {

std::vector<float> random_cloud(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> p(n * 3);
  for (auto& v : p) v = u(rng);
  return p;
}

PointSample random_sample(std::size_t n, std::size_t f, std::size_t o, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> g(0.5f, 2.0f);
  PointSample s;
  s.n = n;
  s.f = f;
  s.o = o;
  s.positions = random_cloud(n, seed + 1);
  for (auto& v : s.positions) v = v * 3.0f + 1.5f;
  s.features.resize(n * f);
  s.targets.resize(n * o);
  for (auto& v : s.features) v = g(rng);
  for (auto& v : s.targets) v = g(rng);
  s.name = "rand-" + std::to_string(seed);
  return s;
}

}  // namespace

TEST(Knn, Singleton) {
  auto g = knn_graph(std::vector<float>{0.5f, -1.0f, 2.0f}, 1);
  EXPECT_EQ(g.indices, std::vector<int>{0});
  EXPECT_EQ(g.offsets, (std::vector<double>{0, 0, 0}));
}

TEST(Knn, Collinear) {
  auto g = knn_graph(std::vector<float>{0, 0, 0, 1, 0, 0, 3, 0, 0}, 2);
  EXPECT_EQ(g.indices, (std::vector<int>{0, 1, 1, 0, 2, 1}));
}

TEST(Knn, TiesBrokenBySmallerIndex) {
  // Points 1 and 2 are equidistant from point 0.
  auto g = knn_graph(std::vector<float>{0, 0, 0, 1, 0, 0, -1, 0, 0, 0, 5, 0}, 2);
  EXPECT_EQ(g.indices[1], 1);
}

TEST(Knn, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = random_cloud(64, seed);
    EXPECT_EQ(knn_graph(p, 8).indices, oracle::knn(p, 8)) << "seed " << seed;
  }
}

TEST(Knn, KLargerThanNRejected) {
  EXPECT_THROW(knn_graph(random_cloud(3, 0), 4), std::invalid_argument);
  EXPECT_THROW(knn_graph(random_cloud(3, 0), 0), std::invalid_argument);
}

TEST(Knn, PermutationConsistent) {
  const std::size_t n = 50, k = 6;
  auto p = random_cloud(n, 7);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), Rng(1));
  std::vector<int> inv(n);
  for (std::size_t i = 0; i < n; ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  std::vector<float> q(n * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) q[i * 3 + c] = p[static_cast<std::size_t>(perm[i]) * 3 + c];
  auto g = knn_graph(p, k), h = knn_graph(q, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j)
      EXPECT_EQ(h.indices[i * k + j], inv[static_cast<std::size_t>(g.indices[static_cast<std::size_t>(perm[i]) * k + j])]);
}

TEST(Knn, DistancesMonotoneAndSelfFirst) {
  const std::size_t k = 10;
  auto p = random_cloud(80, 11);
  auto g = knn_graph(p, k);
  for (std::size_t i = 0; i < 80; ++i) {
    EXPECT_EQ(g.indices[i * k], static_cast<int>(i));
    double prev = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d += g.offsets[(i * k + j) * 3 + c] * g.offsets[(i * k + j) * 3 + c];
      EXPECT_GE(d, prev);
      prev = d;
    }
  }
}

TEST(Offsets, SelfZeroAntisymmetricAndExact) {
  auto g = knn_graph(std::vector<float>{0, 0, 0, 1, 0, 0}, 2);
  EXPECT_EQ(g.offsets, (std::vector<double>{0, 0, 0, 1, 0, 0, 0, 0, 0, -1, 0, 0}));

  const std::size_t k = 5;
  auto p = random_cloud(40, 3);
  for (auto& v : p) v = v * 123.456f + 7.0f;
  auto r = knn_graph(p, k);
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t j = 0; j < k; ++j)
      for (int c = 0; c < 3; ++c) {
        const float back = static_cast<float>(r.offsets[(i * k + j) * 3 + c] + p[i * 3 + c]);
        EXPECT_EQ(back, p[static_cast<std::size_t>(r.indices[i * k + j]) * 3 + c]);
      }
}

TEST(Normalize, ConstantChannelGoesToZero) {
  PointSample s = random_sample(10, 2, 1, 1);
  for (std::size_t i = 0; i < s.n; ++i) s.features[i * 2 + 1] = 4.0f;
  const auto st = NormStats::fit({s});
  EXPECT_EQ(st.feature_std[1], 1.0);
  const auto z = normalize_sample(s, st);
  for (std::size_t i = 0; i < s.n; ++i) EXPECT_EQ(z.features[i * 2 + 1], 0.0f);
}

TEST(Normalize, IdentityStatsKeepNormalizedData) {
  PointSample s = random_sample(10, 2, 3, 2);
  // Positions already centered in the unit box with half-extent 1.
  s.positions = {-1, -1, -1, 1, 1, 1, 0.25f, 0.5f, -0.5f, 0, 0, 0, 0.1f, 0.2f, 0.3f,
                 0.9f, -0.9f, 0.0f, 0.3f, 0.3f, 0.3f, -0.2f, 0.7f, 0.1f, 0.5f, 0.5f, 0.5f, -0.5f, -0.5f, -0.5f};
  const auto z = normalize_sample(s, NormStats::identity(2, 3));
  EXPECT_EQ(z.positions, s.positions);
  EXPECT_EQ(z.features, s.features);
  EXPECT_EQ(z.targets, s.targets);
}

TEST(Normalize, RoundTrip) {
  std::vector<PointSample> set{random_sample(30, 3, 2, 3), random_sample(20, 3, 2, 4)};
  const auto st = NormStats::fit(set);
  for (const auto& s : set) {
    const auto back = denormalize_sample(normalize_sample(s, st), st);
    for (std::size_t i = 0; i < s.positions.size(); ++i) EXPECT_NEAR(back.positions[i], s.positions[i], 1e-6 * std::max(1.0f, std::abs(s.positions[i])));
    for (std::size_t i = 0; i < s.features.size(); ++i) EXPECT_NEAR(back.features[i], s.features[i], 1e-6 * std::max(1.0f, std::abs(s.features[i])));
    for (std::size_t i = 0; i < s.targets.size(); ++i) EXPECT_NEAR(back.targets[i], s.targets[i], 1e-6 * std::max(1.0f, std::abs(s.targets[i])));
  }
}

TEST(Normalize, PositionsFitUnitBox) {
  const auto s = random_sample(50, 0, 1, 5);
  const auto z = normalize_sample(s, NormStats::identity(0, 1));
  float lo = 1e9f, hi = -1e9f;
  for (float v : z.positions) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_GE(lo, -1.0f - 1e-6f);
  EXPECT_LE(hi, 1.0f + 1e-6f);
  EXPECT_NEAR(std::max(-lo, hi), 1.0f, 1e-6f);
}

TEST(Batch, OneSampleMatchesUnbatched) {
  const auto s = random_sample(12, 1, 1, 6);
  const auto b = batch_pack({s}, 4);
  EXPECT_EQ(b.starts, std::vector<std::size_t>{0});
  EXPECT_EQ(b.graphs[0].indices, knn_graph(s, 4).indices);
}

TEST(Batch, OffsetsAndIndexRanges) {
  const auto b = batch_pack({random_sample(3, 1, 2, 7), random_sample(5, 1, 2, 8)}, 2);
  EXPECT_EQ(b.starts, (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(b.total_points, 8u);
  for (int idx : b.graphs[0].indices) EXPECT_TRUE(idx >= 0 && idx < 3);
  for (int idx : b.graphs[1].indices) EXPECT_TRUE(idx >= 3 && idx < 8);
  EXPECT_EQ(b.positions().size(), 24u);
}

TEST(Batch, InconsistentChannelsRejected) {
  EXPECT_THROW(batch_pack({random_sample(3, 1, 2, 7), random_sample(5, 2, 2, 8)}, 2), DataError);
}

// --- MNO1 -------------------------------------------------------------------

TEST(PointSet, RoundTripIsBitExact) {
  auto s = random_sample(33, 2, 3, 9);
  s.positions[4] = -0.0f;
  s.targets[0] = 1e-40f;  // subnormal survives
  s.name = "sphère/ünïcode";
  const auto tmp = std::filesystem::temp_directory_path() / "mno_roundtrip.mno";
  write_pointset(s, tmp);
  const auto r = read_pointset(tmp);
  EXPECT_EQ(r.n, s.n);
  EXPECT_EQ(r.f, s.f);
  EXPECT_EQ(r.o, s.o);
  EXPECT_EQ(r.name, s.name);
  EXPECT_EQ(std::memcmp(r.positions.data(), s.positions.data(), s.positions.size() * 4), 0);
  EXPECT_EQ(std::memcmp(r.features.data(), s.features.data(), s.features.size() * 4), 0);
  EXPECT_EQ(std::memcmp(r.targets.data(), s.targets.data(), s.targets.size() * 4), 0);
  EXPECT_EQ(encode_pointset(r), encode_pointset(s));
  std::filesystem::remove(tmp);
}

TEST(PointSet, LayoutIsLittleEndian) {
  PointSample s;
  s.n = 1;
  s.f = 0;
  s.o = 1;
  s.positions = {1.0f, 2.0f, 3.0f};
  s.targets = {-2.0f};
  s.name = "ab";
  const auto bytes = encode_pointset(s);
  ASSERT_EQ(bytes.size(), 4u + 12 + 12 + 4 + 4 + 2);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MNO1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  // 1.0f = 0x3F800000 little-endian.
  EXPECT_EQ(bytes[16], 0x00);
  EXPECT_EQ(bytes[19], 0x3F);
  EXPECT_EQ(bytes[bytes.size() - 6], 2);  // name length
}

TEST(PointSet, CorruptionDiagnostics) {
  const auto good = encode_pointset(random_sample(4, 1, 1, 10));
  auto expect_error = [](std::vector<unsigned char> bytes, const std::string& needle) {
    try {
      decode_pointset(bytes);
      ADD_FAILURE() << "accepted corrupt input, expected '" << needle << "'";
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  auto bad_magic = good;
  bad_magic[0] = 'X';
  expect_error(bad_magic, "magic");
  auto truncated = good;
  truncated.resize(good.size() - 7);
  expect_error(truncated, "expected");
  expect_error(std::vector<unsigned char>(good.begin(), good.begin() + 10), "truncated");
  auto trailing = good;
  trailing.push_back(0);
  expect_error(trailing, "trailing");
  auto nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(&nan[16], &q, 4);
  expect_error(nan, "offset 16");
  expect_error({}, "truncated");
}

TEST(PointSet, MissingFileRaises) {
  EXPECT_THROW(read_pointset("/nonexistent/file.mno"), std::runtime_error);
}
