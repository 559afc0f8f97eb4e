#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "mno/params.hpp"

namespace mno {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename T>
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> first_moment;
  std::map<std::string, Tensor<T>> second_moment;
};

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// Gradients are read from `params` (ParamSet::at(path).grad). Non-trainable
/// entries are skipped. Throws std::invalid_argument when a trainable
/// parameter has no gradient or lr is negative (lr = 0 leaves moments
/// advancing but values unchanged).
template <typename T>
void adamw_step(OptimizerState<T>& state, ParamSet<T>& params, double lr);

struct OneCycleConfig {
  double pct_start = 0.3;
  double div_start = 25.0;
  double div_final = 1e4;
};

/// Single-cycle cosine schedule. Warm-up runs from max_lr / div_start at step
/// 0 to max_lr at step round(pct_start * total); the anneal phase then follows
/// a half cosine that would reach max_lr / div_final at step == total.
double onecycle_lr(std::int64_t step, std::int64_t total_steps, double max_lr,
                   const OneCycleConfig& cfg = {});

}  // namespace mno
