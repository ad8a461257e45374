#include "hmt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hmt/error.hpp"

namespace hmt {

namespace {

double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericError("gradcheck: non-finite value at " + what);
}

double untracked_value(const std::function<Tensor()>& loss) {
  NoTapeScope no_tape;
  return loss().item();
}

}  // namespace

double gradcheck_params(const std::function<Tensor()>& loss, std::vector<Tensor>& params,
                        double eps) {
  return gradcheck_params(loss, loss, params, eps);
}

double gradcheck_params(const std::function<Tensor()>& loss, const std::function<Tensor()>& surrogate,
                        std::vector<Tensor>& params, double eps) {
  HMT_CHECK(eps > 0.0 && eps <= 1e-2, "gradcheck: eps must lie in (0, 1e-2]");
  Tape tape;
  GradientMap grads;
  {
    TapeScope scope(tape);
    Tensor l = loss();
    require_finite(l.item(), "loss");
    grads = backward(l, tape);
  }
  tape.clear();
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto w = params[pi].mutable_data();
    const auto it = grads.find(params[pi].id());
    for (std::size_t j = 0; j < w.size(); ++j) {
      const std::string where = "parameter " + std::to_string(pi) + " element " + std::to_string(j);
      const double analytic = it == grads.end() ? 0.0 : it->second.data()[j];
      require_finite(analytic, where + " (analytic)");
      const double saved = w[j];
      w[j] = saved + eps;
      const double up = untracked_value(surrogate);
      w[j] = saved - eps;
      const double down = untracked_value(surrogate);
      w[j] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      require_finite(numeric, where + " (numeric)");
      worst = std::max(worst, rel_error(analytic, numeric));
    }
  }
  return worst;
}

double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  std::vector<Tensor> params{
      Tensor::parameter(x.shape(), std::vector<double>(x.data().begin(), x.data().end()))};
  Tensor& leaf = params[0];
  return gradcheck_params([&] { return f(leaf); }, params, eps);
}

}  // namespace hmt
