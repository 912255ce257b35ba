#pragma once

#include <cstdint>
#include <vector>

#include "cbamswin/rng.hpp"
#include "cbamswin/tensor.hpp"

namespace cbamswin::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v), requires_grad);
}

inline Shape random_shape(Rng& rng, std::size_t max_rank = 4, std::size_t max_extent = 8) {
  Shape s(static_cast<std::size_t>(rng.integer(1, static_cast<std::int64_t>(max_rank))));
  for (auto& e : s) e = static_cast<std::size_t>(rng.integer(1, static_cast<std::int64_t>(max_extent)));
  return s;
}

}  // namespace cbamswin::testing
