#include "mno/geometry.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <stdexcept>

#include "mno/errors.hpp"

namespace mno {

void PointSample::validate() const {
  if (n == 0) throw DataError("point sample '" + name + "' has no points");
  if (o == 0) throw DataError("point sample '" + name + "' has no target channels");
  if (positions.size() != n * 3 || features.size() != n * f || targets.size() != n * o) {
    throw DataError("point sample '" + name + "' arrays disagree with N=" +
                    std::to_string(n) + " F=" + std::to_string(f) + " O=" + std::to_string(o));
  }
  const auto finite = [](const std::vector<float>& v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
  };
  if (!finite(positions) || !finite(features) || !finite(targets)) {
    throw DataError("point sample '" + name + "' contains non-finite values");
  }
}

NeighborGraph knn_graph(const std::vector<float>& positions, std::size_t k) {
  if (positions.size() % 3 != 0 || positions.empty()) {
    throw std::invalid_argument("knn_graph: positions must be a non-empty [N x 3] array");
  }
  const std::size_t n = positions.size() / 3;
  if (k == 0 || k > n) {
    throw std::invalid_argument("knn_graph: k=" + std::to_string(k) + " must lie in [1, N=" +
                                std::to_string(n) + "]");
  }
  if (!std::all_of(positions.begin(), positions.end(), [](float v) { return std::isfinite(v); })) {
    throw DataError("knn_graph: non-finite position");
  }
  NeighborGraph g;
  g.n = n;
  g.k = k;
  g.indices.resize(n * k);
  using Cand = std::pair<double, int>;
  std::vector<Cand> heap;  // max-heap of the k-1 best others
  heap.reserve(k);
  const std::size_t keep = k - 1;
  for (std::size_t i = 0; i < n; ++i) {
    heap.clear();
    const double xi = positions[3 * i], yi = positions[3 * i + 1], zi = positions[3 * i + 2];
    if (keep > 0) {
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double dx = positions[3 * j] - xi;
        const double dy = positions[3 * j + 1] - yi;
        const double dz = positions[3 * j + 2] - zi;
        const Cand c{dx * dx + dy * dy + dz * dz, static_cast<int>(j)};
        if (heap.size() < keep) {
          heap.push_back(c);
          std::push_heap(heap.begin(), heap.end());
        } else if (c < heap.front()) {
          std::pop_heap(heap.begin(), heap.end());
          heap.back() = c;
          std::push_heap(heap.begin(), heap.end());
        }
      }
      std::sort_heap(heap.begin(), heap.end());
    }
    g.indices[i * k] = static_cast<int>(i);
    for (std::size_t j = 0; j < keep; ++j) g.indices[i * k + 1 + j] = heap[j].second;
  }
  g.offsets = relative_offsets(positions, g.indices, k);
  return g;
}

std::vector<double> relative_offsets(const std::vector<float>& positions,
                                     const std::vector<int>& indices, std::size_t k) {
  const std::size_t n = positions.size() / 3;
  if (k == 0 || indices.size() != n * k) {
    throw std::invalid_argument("relative_offsets: index table does not match N x k");
  }
  std::vector<double> out(n * k * 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const int nb = indices[i * k + j];
      if (nb < 0 || static_cast<std::size_t>(nb) >= n) {
        throw std::invalid_argument("relative_offsets: neighbor index " + std::to_string(nb) +
                                    " out of range");
      }
      for (std::size_t c = 0; c < 3; ++c) {
        out[(i * k + j) * 3 + c] = static_cast<double>(positions[3 * nb + c]) -
                                   static_cast<double>(positions[3 * i + c]);
      }
    }
  }
  return out;
}

NormStats NormStats::identity(std::size_t f, std::size_t o) {
  return NormStats{std::vector<double>(f, 0.0), std::vector<double>(f, 1.0),
                   std::vector<double>(o, 0.0), std::vector<double>(o, 1.0)};
}

namespace {

void channel_stats(const std::vector<PointSample>& samples, std::size_t width,
                   const std::vector<float> PointSample::*field, std::vector<double>& mean,
                   std::vector<double>& stdev) {
  mean.assign(width, 0.0);
  stdev.assign(width, 1.0);
  if (width == 0) return;
  std::vector<double> sum(width, 0.0), sq(width, 0.0);
  double count = 0;
  for (const auto& s : samples) {
    const auto& v = s.*field;
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t c = 0; c < width; ++c) sum[c] += v[i * width + c];
    count += static_cast<double>(s.n);
  }
  for (std::size_t c = 0; c < width; ++c) mean[c] = sum[c] / count;
  for (const auto& s : samples) {
    const auto& v = s.*field;
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t c = 0; c < width; ++c) {
        const double d = v[i * width + c] - mean[c];
        sq[c] += d * d;
      }
  }
  for (std::size_t c = 0; c < width; ++c) {
    const double sd = std::sqrt(sq[c] / count);
    stdev[c] = sd > 0.0 ? sd : 1.0;
  }
}

}  // namespace

NormStats NormStats::fit(const std::vector<PointSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("NormStats::fit: no samples");
  const std::size_t f = samples[0].f, o = samples[0].o;
  for (const auto& s : samples) {
    if (s.f != f || s.o != o) throw DataError("NormStats::fit: inconsistent channel counts");
  }
  NormStats st;
  channel_stats(samples, f, &PointSample::features, st.feature_mean, st.feature_std);
  channel_stats(samples, o, &PointSample::targets, st.target_mean, st.target_std);
  return st;
}

void NormStats::validate(std::size_t f, std::size_t o) const {
  if (feature_mean.size() != f || feature_std.size() != f || target_mean.size() != o ||
      target_std.size() != o) {
    throw DataError("normalization stats do not match channel counts F=" + std::to_string(f) +
                    " O=" + std::to_string(o));
  }
  const auto ok_mean = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  const auto ok_std = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x) && x > 0; });
  };
  if (!ok_mean(feature_mean) || !ok_mean(target_mean) || !ok_std(feature_std) ||
      !ok_std(target_std)) {
    throw DataError("normalization stats must be finite with positive std");
  }
}

PointSample normalize_sample(const PointSample& sample, const NormStats& stats) {
  sample.validate();
  stats.validate(sample.f, sample.o);
  PointSample out = sample;
  std::array<double, 3> lo, hi;
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < sample.n; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], static_cast<double>(sample.positions[3 * i + c]));
      hi[c] = std::max(hi[c], static_cast<double>(sample.positions[3 * i + c]));
    }
  double half = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    out.position_center[c] = 0.5 * (lo[c] + hi[c]);
    half = std::max(half, 0.5 * (hi[c] - lo[c]));
  }
  out.position_scale = half > 0.0 ? half : 1.0;
  for (std::size_t i = 0; i < sample.n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      out.positions[3 * i + c] = static_cast<float>(
          (sample.positions[3 * i + c] - out.position_center[c]) / out.position_scale);
  for (std::size_t i = 0; i < sample.n; ++i) {
    for (std::size_t c = 0; c < sample.f; ++c)
      out.features[i * sample.f + c] = static_cast<float>(
          (sample.features[i * sample.f + c] - stats.feature_mean[c]) / stats.feature_std[c]);
    for (std::size_t c = 0; c < sample.o; ++c)
      out.targets[i * sample.o + c] = static_cast<float>(
          (sample.targets[i * sample.o + c] - stats.target_mean[c]) / stats.target_std[c]);
  }
  return out;
}

PointSample denormalize_sample(const PointSample& sample, const NormStats& stats) {
  stats.validate(sample.f, sample.o);
  PointSample out = sample;
  for (std::size_t i = 0; i < sample.n; ++i) {
    for (std::size_t c = 0; c < 3; ++c)
      out.positions[3 * i + c] = static_cast<float>(
          sample.positions[3 * i + c] * sample.position_scale + sample.position_center[c]);
    for (std::size_t c = 0; c < sample.f; ++c)
      out.features[i * sample.f + c] = static_cast<float>(
          sample.features[i * sample.f + c] * stats.feature_std[c] + stats.feature_mean[c]);
    for (std::size_t c = 0; c < sample.o; ++c)
      out.targets[i * sample.o + c] = static_cast<float>(
          sample.targets[i * sample.o + c] * stats.target_std[c] + stats.target_mean[c]);
  }
  out.position_center = {0.0, 0.0, 0.0};
  out.position_scale = 1.0;
  return out;
}

Batch batch_pack(std::vector<PointSample> samples, std::size_t k) {
  if (samples.empty()) throw std::invalid_argument("batch_pack: no samples");
  Batch b;
  b.f = samples[0].f;
  b.o = samples[0].o;
  for (const auto& s : samples) {
    s.validate();
    if (s.f != b.f || s.o != b.o) {
      throw DataError("batch_pack: sample '" + s.name + "' has F=" + std::to_string(s.f) +
                      " O=" + std::to_string(s.o) + ", expected F=" + std::to_string(b.f) +
                      " O=" + std::to_string(b.o));
    }
  }
  for (const auto& s : samples) {
    b.starts.push_back(b.total_points);
    NeighborGraph g = knn_graph(s.positions, k);
    for (auto& idx : g.indices) idx += static_cast<int>(b.total_points);
    b.graphs.push_back(std::move(g));
    b.total_points += s.n;
  }
  b.samples = std::move(samples);
  return b;
}

namespace {

std::vector<float> concat_field(const Batch& b, const std::vector<float> PointSample::*field) {
  std::vector<float> out;
  for (const auto& s : b.samples) out.insert(out.end(), (s.*field).begin(), (s.*field).end());
  return out;
}

// Little-endian primitives for the MNO1 format.
void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::vector<unsigned char>& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  void need(std::size_t count, const char* what) const {
    if (bytes_.size() - pos_ < count) {
      throw DataError(std::string("MNO1: truncated while reading ") + what + " at byte offset " +
                      std::to_string(pos_) + ": expected " + std::to_string(count) +
                      " bytes, found " + std::to_string(bytes_.size() - pos_) +
                      " (file length " + std::to_string(bytes_.size()) + ")");
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::vector<float> f32_array(std::size_t count, const char* what) {
    if (count > (bytes_.size() - pos_) / 4) need(count * 4, what);
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t at = pos_;
      const float v = std::bit_cast<float>(u32(what));
      if (!std::isfinite(v)) {
        throw DataError(std::string("MNO1: non-finite value in ") + what + " at byte offset " +
                        std::to_string(at));
      }
      out[i] = v;
    }
    return out;
  }
  std::string str(std::size_t len) {
    need(len, "name");
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + len));
    pos_ += len;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<float> Batch::positions() const { return concat_field(*this, &PointSample::positions); }
std::vector<float> Batch::features() const { return concat_field(*this, &PointSample::features); }
std::vector<float> Batch::targets() const { return concat_field(*this, &PointSample::targets); }

std::vector<unsigned char> encode_pointset(const PointSample& sample) {
  sample.validate();
  std::vector<unsigned char> out;
  out.reserve(16 + 4 * (sample.positions.size() + sample.features.size() +
                        sample.targets.size()) + 4 + sample.name.size());
  for (char c : std::string("MNO1")) out.push_back(static_cast<unsigned char>(c));
  put_u32(out, static_cast<std::uint32_t>(sample.n));
  put_u32(out, static_cast<std::uint32_t>(sample.f));
  put_u32(out, static_cast<std::uint32_t>(sample.o));
  for (float v : sample.positions) put_f32(out, v);
  for (float v : sample.features) put_f32(out, v);
  for (float v : sample.targets) put_f32(out, v);
  put_u32(out, static_cast<std::uint32_t>(sample.name.size()));
  out.insert(out.end(), sample.name.begin(), sample.name.end());
  return out;
}

PointSample decode_pointset(const std::vector<unsigned char>& bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (!(bytes[0] == 'M' && bytes[1] == 'N' && bytes[2] == 'O' && bytes[3] == '1')) {
    throw DataError("MNO1: bad magic at byte offset 0");
  }
  r.str(4);
  PointSample s;
  s.n = r.u32("N");
  s.f = r.u32("F");
  s.o = r.u32("O");
  if (s.n == 0 || s.o == 0) throw DataError("MNO1: N and O must be positive (header at byte offset 4)");
  s.positions = r.f32_array(s.n * 3, "positions");
  s.features = r.f32_array(s.n * s.f, "features");
  s.targets = r.f32_array(s.n * s.o, "targets");
  const std::uint32_t len = r.u32("name length");
  s.name = r.str(len);
  if (r.pos() != bytes.size()) {
    throw DataError("MNO1: " + std::to_string(bytes.size() - r.pos()) +
                    " trailing bytes after byte offset " + std::to_string(r.pos()));
  }
  return s;
}

void write_pointset(const PointSample& sample, const std::filesystem::path& path) {
  const auto bytes = encode_pointset(sample);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

PointSample read_pointset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  try {
    return decode_pointset(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace mno
