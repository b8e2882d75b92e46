#include "adam.hpp"

#include <cmath>

#include "errors.hpp"

namespace ssvep::nn {

void adam_step(AdamState& state, const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, double lr) {
  require_data(params.size() == grads.size(), "adam: parameter/gradient count mismatch");
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Tensor* p : params) {
      state.m.push_back(Tensor::zeros(p->shape));
      state.v.push_back(Tensor::zeros(p->shape));
    }
  }
  require_data(state.m.size() == params.size(), "adam: state bound to a different parameter set");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    require_data(p.shape == g.shape && p.shape == state.m[i].shape,
                 "adam: shape mismatch at parameter " + std::to_string(i));
    double* mp = state.m[i].ptr();
    double* vp = state.v[i].ptr();
    double* pp = p.ptr();
    const double* gp = g.ptr();
    const std::int64_t n = p.size();
    for (std::int64_t j = 0; j < n; ++j) {
      mp[j] = state.beta1 * mp[j] + (1.0 - state.beta1) * gp[j];
      vp[j] = state.beta2 * vp[j] + (1.0 - state.beta2) * gp[j] * gp[j];
      const double mhat = mp[j] / bc1;
      const double vhat = vp[j] / bc2;
      pp[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace ssvep::nn
