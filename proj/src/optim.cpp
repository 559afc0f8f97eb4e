#include "mno/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mno {

template <typename T>
void adamw_step(OptimizerState<T>& state, ParamSet<T>& params, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw std::invalid_argument("adamw_step: learning rate must be finite and non-negative");
  }
  for (const auto& [path, p] : params) {
    if (p.trainable && (!p.has_grad || p.grad.shape() != p.value.shape())) {
      throw std::invalid_argument("adamw_step: missing gradient for '" + path + "'");
    }
  }
  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (auto& [path, p] : params) {
    if (!p.trainable) continue;
    auto& m = state.first_moment.try_emplace(path, p.value.shape(), T{0}).first->second;
    auto& v = state.second_moment.try_emplace(path, p.value.shape(), T{0}).first->second;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      double w = p.value[i];
      w -= lr * c.weight_decay * w;
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      w -= lr * mhat / (std::sqrt(vhat) + c.eps);
      p.value[i] = static_cast<T>(w);
    }
  }
}

double onecycle_lr(std::int64_t step, std::int64_t total_steps, double max_lr,
                   const OneCycleConfig& cfg) {
  if (total_steps <= 0 || step < 0 || step >= total_steps) {
    throw std::invalid_argument("onecycle_lr: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) + ")");
  }
  if (!(max_lr > 0.0)) throw std::invalid_argument("onecycle_lr: max_lr must be positive");
  const double initial = max_lr / cfg.div_start;
  const double final_lr = max_lr / cfg.div_final;
  const auto peak = static_cast<std::int64_t>(
      std::llround(cfg.pct_start * static_cast<double>(total_steps)));
  const auto cos_interp = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (step <= peak) {
    if (peak == 0) return max_lr;
    return cos_interp(initial, max_lr, static_cast<double>(step) / static_cast<double>(peak));
  }
  const double frac =
      static_cast<double>(step - peak) / static_cast<double>(total_steps - peak);
  return cos_interp(max_lr, final_lr, frac);
}

template void adamw_step(OptimizerState<float>&, ParamSet<float>&, double);
template void adamw_step(OptimizerState<double>&, ParamSet<double>&, double);

}  // namespace mno
