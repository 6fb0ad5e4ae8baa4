#pragma once

#include <cmath>
#include <map>
#include <string>

#include "sublayer/errors.hpp"
#include "sublayer/model/parameters.hpp"

namespace sublayer {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// First and second moments per parameter tensor. A default-constructed state
// is "fresh": zero moments, step 0.
struct AdamState {
  std::map<std::string, Tensor> m, v;
  std::size_t t = 0;
};

using Gradients = std::map<std::string, Tensor>;

// One bias-corrected Adam update, no weight decay. With a fresh state and an
// all-zero gradient the update is exactly zero.
inline void adam_step(Parameters& params, const Gradients& grads, AdamState& st, double lr, const AdamHyper& h) {
  ++st.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.t));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    require_same_shape(p, g, "adam_step");
    auto [mit, m_new] = st.m.try_emplace(name, Tensor(p.shape()));
    auto [vit, v_new] = st.v.try_emplace(name, Tensor(p.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
    }
  }
}

// d^-0.5 * min(step^-0.5, step * warmup^-1.5), step counted from 1.
inline double inverse_sqrt_lr(std::size_t step, std::size_t d_model, std::size_t warmup, double scale) {
  if (step == 0 || warmup == 0) throw Error("learning-rate schedule needs step >= 1 and warmup >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return scale / std::sqrt(static_cast<double>(d_model)) * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

}  // namespace sublayer
