#pragma once

#include <cstddef>

#include "hiedit/params.hpp"

namespace hiedit {

// Global L2 norm over every entry of a gradient store.
double grad_norm(const ParamStore& grads);
// Rescales `grads` in place so its global norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(ParamStore& grads, double max_norm);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a ParamStore. `descend` subtracts the step, `ascend` adds it.
class Adam {
 public:
  Adam(const ParamStore& like, AdamOptions opts);

  void descend(ParamStore& params, const ParamStore& grads) { step(params, grads, -1.0); }
  void ascend(ParamStore& params, const ParamStore& grads) { step(params, grads, +1.0); }
  std::size_t steps() const { return t_; }

 private:
  void step(ParamStore& params, const ParamStore& grads, double sign);

  AdamOptions opts_;
  ParamStore m_, v_;
  std::size_t t_ = 0;
};

}  // namespace hiedit
