#include "hiedit/optim.hpp"

#include <cmath>

namespace hiedit {

double grad_norm(const ParamStore& grads) {
  double s = 0.0;
  for (const auto& name : grads.names())
    for (double g : grads.at(name).value) s += g * g;
  return std::sqrt(s);
}

double clip_grad_norm(ParamStore& grads, double max_norm) {
  const double n = grad_norm(grads);
  if (n > max_norm && n > 0.0) {
    const double f = max_norm / n;
    for (const auto& name : grads.names())
      for (double& g : grads.at(name).value) g *= f;
  }
  return n;
}

Adam::Adam(const ParamStore& like, AdamOptions opts)
    : opts_(opts), m_(like.zeros_like()), v_(like.zeros_like()) {}

void Adam::step(ParamStore& params, const ParamStore& grads, double sign) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (const auto& name : params.names()) {
    auto& p = params.at(name).value;
    const auto& g = grads.at(name).value;
    auto& m = m_.at(name).value;
    auto& v = v_.at(name).value;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] += sign * opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
    }
  }
}

}  // namespace hiedit
