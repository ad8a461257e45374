#pragma once

#include <cstdint>
#include <vector>

#include "hmt/tensor.hpp"

namespace hmt {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;  // first moments, one per parameter
  std::vector<std::vector<double>> u;  // second moments
};

// One bias-corrected Adam update, in place on the parameter storage.
// Every parameter must have an entry in grads.
void adam_step(std::vector<Tensor>& params, const GradientMap& grads, AdamState& state,
               double lr);

struct LrSchedule {
  double base_lr = 1e-3;
  std::int64_t warmup = 1;
};

// base_lr * min(step / warmup, sqrt(warmup / step)); peak at step == warmup.
double lr_at(std::int64_t step, const LrSchedule& schedule);

}  // namespace hmt
