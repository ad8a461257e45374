#pragma once

#include <functional>
#include <vector>

#include "hmt/tensor.hpp"

namespace hmt {

// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over all
// elements, with central differences of step eps. f must be deterministic.
// Throws NumericError naming the element if a non-finite value shows up.
double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

// Same check against every element of a set of parameter tensors; the loss
// closure reads the parameters, which are perturbed in place and restored.
double gradcheck_params(const std::function<Tensor()>& loss, std::vector<Tensor>& params,
                        double eps);

// Analytic gradient of loss against central differences of surrogate. For a
// loss with stop-gradient terms, the surrogate holds the stopped values fixed
// at the current parameters.
double gradcheck_params(const std::function<Tensor()>& loss, const std::function<Tensor()>& surrogate,
                        std::vector<Tensor>& params, double eps);

}  // namespace hmt
