#pragma once

#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace ssvep::nn {

// Adam with bias correction. Moment buffers are zero-initialized on first
// use; the step counter increments by exactly one per update. L2 is handled
// in the loss, not here.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Tensor> m, v;
};

void adam_step(AdamState& state, const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, double lr);

}  // namespace ssvep::nn
