#include "hmt/params.hpp"

#include <algorithm>
#include <unordered_map>

#include "hmt/error.hpp"

namespace hmt {

std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

void append_params(ParamList& out, const std::string& prefix, const ParamList& params) {
  for (const auto& p : params) out.push_back({prefix + "." + p.name, p.value});
}

Tensor normal_param(Shape shape, double stddev, Rng& rng) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.normal() * stddev;
  return Tensor::parameter(std::move(shape), std::move(data));
}

Tensor zero_param(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor const_param(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

void assign_params(const ParamList& dst, const ParamList& src) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& p : src) by_name[p.name] = &p.value;
  for (const auto& p : dst) {
    auto it = by_name.find(p.name);
    HMT_CHECK(it != by_name.end(), "missing parameter '" + p.name + "'");
    HMT_CHECK(it->second->shape() == p.value.shape(),
              "parameter '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                  ", expected " + shape_str(p.value.shape()));
    auto d = p.value.node()->data.data();
    const auto s = it->second->data();
    std::copy(s.begin(), s.end(), d);
  }
}

}  // namespace hmt
