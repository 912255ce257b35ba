#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "cbamswin/ops.hpp"

namespace cbamswin {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_leaf = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Relative error with denominator max(|a|, |b|, 1e-8).
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares backward() against central differences for every coordinate of
/// `leaves` (or a seeded sample of at most `max_coords_per_leaf` of them).
/// `f` rebuilds the scalar loss from the current leaf values.
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps = 1e-5,
                                  std::size_t max_coords_per_leaf = 0, unsigned seed = 0) {
  if (eps < 1e-7 || eps > 1e-3) throw InvalidParam("grad_check eps must lie in [1e-7, 1e-3]");
  for (auto& l : leaves) {
    if (!l.is_leaf()) throw InvalidParam("grad_check perturbs leaves only");
    l.set_requires_grad(true);
  }
  Tensor loss = f();
  if (!std::isfinite(loss.item())) throw NonFinite("loss is not finite at the base point");
  backward(loss);

  auto evaluate = [&f]() {
    const double v = f().item();
    if (!std::isfinite(v)) throw NonFinite("loss is not finite under perturbation");
    return v;
  };

  GradCheckResult res;
  std::mt19937 rng(seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    std::vector<double> analytic = leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                                                   : std::vector<double>(leaf.numel(), 0.0);
    std::vector<std::size_t> coords(leaf.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords_per_leaf && coords.size() > max_coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_leaf);
    }
    auto& data = leaf.leaf_data();
    for (std::size_t c : coords) {
      const double orig = data[c];
      data[c] = orig + eps;
      const double fp = evaluate();
      data[c] = orig - eps;
      const double fm = evaluate();
      data[c] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double e = rel_err(analytic[c], numeric);
      ++res.coords_checked;
      if (e > res.max_rel_err) {
        res.max_rel_err = e;
        res.worst_leaf = li;
        res.worst_coord = c;
        res.worst_analytic = analytic[c];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

/// Single-input form: f maps x to a scalar.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
  Tensor leaf(x.shape(), x.values(), true);
  return grad_check([&] { return f(leaf); }, {leaf}, eps).max_rel_err;
}

}  // namespace cbamswin
