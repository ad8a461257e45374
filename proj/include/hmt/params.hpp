#pragma once

#include <string>
#include <vector>

#include "hmt/rng.hpp"
#include "hmt/tensor.hpp"

namespace hmt {

struct NamedParam {
  std::string name;
  Tensor value;
};
using ParamList = std::vector<NamedParam>;

std::vector<Tensor> tensors_of(const ParamList& params);

// Prefixes every name with "<prefix>." and appends to out.
void append_params(ParamList& out, const std::string& prefix, const ParamList& params);

Tensor normal_param(Shape shape, double stddev, Rng& rng);
Tensor zero_param(Shape shape);
Tensor const_param(Shape shape, double value);

// Copies values from src into dst by name; shapes must match and every dst
// name must be present.
void assign_params(const ParamList& dst, const ParamList& src);

}  // namespace hmt
