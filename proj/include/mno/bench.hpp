#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mno {

struct BenchRow {
  std::string module;
  std::size_t n = 0;
  std::size_t modes = 0;
  std::size_t k = 0;
  std::size_t dim = 0;
  double ms = 0;
  double ratio = 0;  // ms relative to the previous row of the same sweep; 0 for the first
};

struct BenchSpec {
  std::string module = "global";  // global | local | micro
  std::vector<std::size_t> n_values{1000, 2000, 4000, 8000};
  std::vector<std::size_t> modes_values{64};
  std::size_t k = 8;
  std::size_t dim = 64;
  std::size_t heads = 8;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
};

/// Times one attention module's float32 forward pass on random latents over
/// every (N, M) pair; the reported time is the minimum over at least `repeats`
/// runs (more for short kernels, so that the runs span ~250 ms).
/// Ratios compare consecutive entries of the swept axis (N when several N
/// values are given, otherwise M).
std::vector<BenchRow> bench_module(const BenchSpec& spec);

std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace mno
