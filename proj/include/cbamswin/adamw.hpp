#pragma once

// AdamW: decoupled weight decay followed by the bias-corrected Adam update.
//
//   p <- p - lr * wd * p
//   m <- b1 m + (1 - b1) g
//   v <- b2 v + (1 - b2) g^2
//   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

#include <cmath>
#include <string>
#include <vector>

#include "cbamswin/tensor.hpp"

namespace cbamswin {

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;

  void validate() const {
    if (!(lr > 0)) throw InvalidParam("learning rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw InvalidParam("betas must lie in [0, 1)");
    if (!(eps > 0)) throw InvalidParam("eps must be positive");
    if (!(weight_decay >= 0)) throw InvalidParam("weight decay must be non-negative");
  }
};

struct AdamWState {
  std::vector<std::vector<double>> m, v;  // one slot per parameter, same order every step
  std::uint64_t t = 0;
};

/// One step over `params` using their current gradients. A parameter without a
/// gradient from the last backward pass is treated as having a zero gradient.
inline void adamw_step(std::vector<Tensor>& params, AdamWState& state, const AdamWHyper& h) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeMismatch("optimizer state does not match the parameter list");
  ++state.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& data = params[k].leaf_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != data.size()) throw ShapeMismatch("optimizer state size differs for parameter " + std::to_string(k));
    const bool has_grad = params[k].has_grad();
    const auto g = params[k].grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      data[i] -= h.lr * h.weight_decay * data[i];
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      data[i] -= h.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
    }
  }
}

}  // namespace cbamswin
