#include "hmt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hmt/error.hpp"

namespace hmt {

void adam_step(std::vector<Tensor>& params, const GradientMap& grads, AdamState& state,
               double lr) {
  HMT_CHECK(lr > 0.0, "adam_step: learning rate must be positive");
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.u.emplace_back(p.numel(), 0.0);
    }
  }
  HMT_CHECK(state.m.size() == params.size(), "adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    HMT_CHECK(state.m[i].size() == params[i].numel(),
              "adam_step: moment shape mismatch for parameter " + std::to_string(i));
    if (!grads.contains(params[i].id())) {
      throw ContractViolation("adam_step: missing gradient for parameter " + std::to_string(i) +
                              " of shape " + shape_str(params[i].shape()));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = grads.at(params[i].id()).data();
    auto w = params[i].mutable_data();
    auto& m = state.m[i];
    auto& u = state.u[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      u[j] = state.beta2 * u[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double uhat = u[j] / c2;
      const double denom = std::sqrt(uhat) + state.eps;
      // 0/0 only arises with zero gradients and eps = 0; treat as no move.
      if (denom > 0.0) w[j] -= lr * mhat / denom;
    }
  }
}

double lr_at(std::int64_t step, const LrSchedule& schedule) {
  HMT_CHECK(step >= 1, "lr_at: step must be >= 1");
  HMT_CHECK(schedule.base_lr > 0.0 && schedule.warmup >= 1, "lr_at: invalid schedule");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(schedule.warmup);
  if (step <= schedule.warmup) return schedule.base_lr * (s / w);
  return schedule.base_lr * std::sqrt(w / s);
}

}  // namespace hmt
