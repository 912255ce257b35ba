#pragma once

// Differentiable tensor operations. Each forward computes values eagerly and,
// when any input requires a gradient, records the adjoint on the output node.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "cbamswin/tensor.hpp"

namespace cbamswin {

namespace detail {

// Flat index maps from a broadcast output shape back to each operand.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Maps each flat index of `out` to the flat index of an operand of shape `in`
// under right-aligned broadcasting.
inline std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  const auto in_st = strides_of(in);
  std::vector<std::size_t> eff(r, 0);
  for (std::size_t i = 0; i < in.size(); ++i) eff[off + i] = in[i] == 1 ? 0 : in_st[i];
  const std::size_t n = numel_of(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t flat = 0;
  for (std::size_t k = 0; k < n; ++k) {
    idx[k] = flat;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out[d]) {
        flat += eff[d];
        break;
      }
      flat -= eff[d] * (out[d] - 1);
      counter[d] = 0;
    }
  }
  return idx;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  p.out = broadcast_shapes(a, b);
  p.a_index = broadcast_index(p.out, a);
  p.b_index = broadcast_index(p.out, b);
  return p;
}

template <class Fwd, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const std::size_t n = plan->a_index.size();
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = fwd(a[plan->a_index[k]], b[plan->b_index[k]]);
  Shape shape = plan->out;
  return Tensor::make_result(std::move(shape), std::move(out), {a, b}, [plan, da, db](Tensor::Node& self) {
    const auto& av = input_data(self, 0);
    const auto& bv = input_data(self, 1);
    const std::size_t n = self.grad.size();
    if (wants_grad(self, 0)) {
      auto& ga = input_grad(self, 0);
      for (std::size_t k = 0; k < n; ++k) {
        ga[plan->a_index[k]] += self.grad[k] * da(av[plan->a_index[k]], bv[plan->b_index[k]]);
      }
    }
    if (wants_grad(self, 1)) {
      auto& gb = input_grad(self, 1);
      for (std::size_t k = 0; k < n; ++k) {
        gb[plan->b_index[k]] += self.grad[k] * db(av[plan->a_index[k]], bv[plan->b_index[k]]);
      }
    }
  });
}

template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [deriv](Tensor::Node& self) {
    const auto& xv = input_data(self, 0);
    auto& gx = input_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary_op(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

/// Elementwise logistic function 1/(1+e^-x).
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

// GELU, tanh approximation:
//   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline Tensor gelu(const Tensor& x) {
  return detail::unary_op(x, gelu_scalar, [](double v, double) {
    const double u = kGeluC * (v + kGeluA * v * v * v);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({}, {s}, {x}, [](Tensor::Node& self) {
    auto& gx = input_grad(self, 0);
    for (auto& g : gx) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Layout

/// Output element k takes input element index[k]; index -1 yields 0 (padding).
/// Every layout operation (reshape excepted) is expressed through this.
inline Tensor gather(const Tensor& x, Shape out_shape, std::vector<std::ptrdiff_t> index) {
  if (numel_of(out_shape) != index.size()) throw ShapeMismatch("gather index length does not match output shape");
  std::vector<double> out(index.size());
  for (std::size_t k = 0; k < index.size(); ++k) {
    const auto i = index[k];
    if (i >= static_cast<std::ptrdiff_t>(x.numel())) throw ShapeMismatch("gather index out of range");
    out[k] = i < 0 ? 0.0 : x[static_cast<std::size_t>(i)];
  }
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(std::move(index));
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [idx](Tensor::Node& self) {
    auto& gx = input_grad(self, 0);
    for (std::size_t k = 0; k < idx->size(); ++k) {
      if ((*idx)[k] >= 0) gx[static_cast<std::size_t>((*idx)[k])] += self.grad[k];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeMismatch("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [](Tensor::Node& self) {
    auto& gx = input_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Reorders axes: output axis i is input axis axes[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeMismatch("permute axes rank mismatch");
  std::vector<bool> used(r, false);
  for (auto a : axes) {
    if (a >= r || used[a]) throw InvalidParam("permute axes must be a permutation");
    used[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[axes[i]];
  const auto in_st = strides_of(x.shape());
  const std::size_t n = x.numel();
  std::vector<std::ptrdiff_t> index(n);
  std::vector<std::size_t> counter(r, 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t flat = 0;
    for (std::size_t i = 0; i < r; ++i) flat += counter[i] * in_st[axes[i]];
    index[k] = static_cast<std::ptrdiff_t>(flat);
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out_shape[d]) break;
      counter[d] = 0;
    }
  }
  return gather(x, std::move(out_shape), std::move(index));
}

/// Contiguous range [start, start+length) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || start + length > x.shape()[axis] || length == 0) {
    throw ShapeMismatch("slice out of range on " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t ext = x.shape()[axis];
  std::vector<std::ptrdiff_t> index;
  index.reserve(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t a = 0; a < length; ++a)
      for (std::size_t i = 0; i < inner; ++i)
        index.push_back(static_cast<std::ptrdiff_t>((o * ext + start + a) * inner + i));
  return gather(x, std::move(out_shape), std::move(index));
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw InvalidParam("concat of nothing");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeMismatch("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeMismatch("concat rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.shape()[i] != ref[i]) throw ShapeMismatch("concat extents differ off-axis");
    }
    total += p.shape()[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<double> out;
  out.reserve(numel_of(out_shape));
  for (std::size_t o = 0; o < outer; ++o)
    for (const auto& p : parts) {
      const std::size_t chunk = p.shape()[axis] * inner;
      auto d = p.data();
      out.insert(out.end(), d.begin() + o * chunk, d.begin() + (o + 1) * chunk);
    }
  auto extents = std::make_shared<std::vector<std::size_t>>();
  for (const auto& p : parts) extents->push_back(p.shape()[axis]);
  return Tensor::make_result(std::move(out_shape), std::move(out), parts,
                             [extents, outer, inner](Tensor::Node& self) {
                               std::size_t pos = 0;
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t p = 0; p < extents->size(); ++p) {
                                   const std::size_t chunk = (*extents)[p] * inner;
                                   if (wants_grad(self, p)) {
                                     auto& g = input_grad(self, p);
                                     for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += self.grad[pos + i];
                                   }
                                   pos += chunk;
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product [..,M,K] x [..,K,N] -> [..,M,N]; batch prefixes broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeMismatch("matmul needs rank >= 2 operands");
  const std::size_t M = a.shape()[a.rank() - 2], K = a.shape()[a.rank() - 1];
  const std::size_t K2 = b.shape()[b.rank() - 2], N = b.shape()[b.rank() - 1];
  if (K != K2) {
    throw ShapeMismatch("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch = detail::broadcast_shapes(a_batch, b_batch);
  auto a_off = std::make_shared<std::vector<std::size_t>>(detail::broadcast_index(batch, a_batch));
  auto b_off = std::make_shared<std::vector<std::size_t>>(detail::broadcast_index(batch, b_batch));
  const std::size_t nb = a_off->size();
  std::vector<double> out(nb * M * N, 0.0);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t t = 0; t < nb; ++t) {
    const double* A = av.data() + (*a_off)[t] * M * K;
    const double* B = bv.data() + (*b_off)[t] * K * N;
    double* C = out.data() + t * M * N;
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        const double aik = A[i * K + k];
        for (std::size_t j = 0; j < N; ++j) C[i * N + j] += aik * B[k * N + j];
      }
  }
  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  return Tensor::make_result(std::move(out_shape), std::move(out), {a, b},
                             [a_off, b_off, M, K, N](Tensor::Node& self) {
                               const auto& av = input_data(self, 0);
                               const auto& bv = input_data(self, 1);
                               const bool ga_on = wants_grad(self, 0), gb_on = wants_grad(self, 1);
                               for (std::size_t t = 0; t < a_off->size(); ++t) {
                                 const double* G = self.grad.data() + t * M * N;
                                 const double* A = av.data() + (*a_off)[t] * M * K;
                                 const double* B = bv.data() + (*b_off)[t] * K * N;
                                 if (ga_on) {
                                   double* GA = input_grad(self, 0).data() + (*a_off)[t] * M * K;
                                   for (std::size_t i = 0; i < M; ++i)
                                     for (std::size_t k = 0; k < K; ++k) {
                                       double s = 0.0;
                                       for (std::size_t j = 0; j < N; ++j) s += G[i * N + j] * B[k * N + j];
                                       GA[i * K + k] += s;
                                     }
                                 }
                                 if (gb_on) {
                                   double* GB = input_grad(self, 1).data() + (*b_off)[t] * K * N;
                                   for (std::size_t i = 0; i < M; ++i)
                                     for (std::size_t k = 0; k < K; ++k) {
                                       const double aik = A[i * K + k];
                                       for (std::size_t j = 0; j < N; ++j) GB[k * N + j] += aik * G[i * N + j];
                                     }
                                 }
                               }
                             });
}

/// Swaps the two trailing axes.
inline Tensor transpose_last(const Tensor& x) {
  if (x.rank() < 2) throw ShapeMismatch("transpose needs rank >= 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

/// Affine map on the trailing axis: y = x w^T + bias.
inline Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias = std::nullopt) {
  if (w.rank() != 2 || x.rank() < 1) throw ShapeMismatch("linear expects w of rank 2");
  const std::size_t din = w.shape()[1], dout = w.shape()[0];
  if (x.shape().back() != din) {
    throw ShapeMismatch("linear: trailing extent " + std::to_string(x.shape().back()) + " != " +
                        std::to_string(din));
  }
  if (bias && (bias->rank() != 1 || bias->shape()[0] != dout)) throw ShapeMismatch("linear: bias extent");
  const std::size_t rows = x.numel() / din;
  std::vector<double> out(rows * dout);
  auto xv = x.data();
  auto wv = w.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < dout; ++o) {
      double s = bias ? (*bias)[o] : 0.0;
      for (std::size_t i = 0; i < din; ++i) s += xv[r * din + i] * wv[o * din + i];
      out[r * dout + o] = s;
    }
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  std::vector<Tensor> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return Tensor::make_result(std::move(out_shape), std::move(out), std::move(inputs),
                             [rows, din, dout, has_bias](Tensor::Node& self) {
                               const auto& xv = input_data(self, 0);
                               const auto& wv = input_data(self, 1);
                               const double* G = self.grad.data();
                               if (wants_grad(self, 0)) {
                                 auto& gx = input_grad(self, 0);
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t o = 0; o < dout; ++o) {
                                     const double g = G[r * dout + o];
                                     for (std::size_t i = 0; i < din; ++i) gx[r * din + i] += g * wv[o * din + i];
                                   }
                               }
                               if (wants_grad(self, 1)) {
                                 auto& gw = input_grad(self, 1);
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t o = 0; o < dout; ++o) {
                                     const double g = G[r * dout + o];
                                     for (std::size_t i = 0; i < din; ++i) gw[o * din + i] += g * xv[r * din + i];
                                   }
                               }
                               if (has_bias && wants_grad(self, 2)) {
                                 auto& gb = input_grad(self, 2);
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t o = 0; o < dout; ++o) gb[o] += G[r * dout + o];
                               }
                             });
}

/// 2-D cross-correlation of a single sample [C_in,H,W] with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad) {
  if (stride < 1) throw InvalidParam("conv2d stride must be >= 1");
  if (x.rank() != 3 || kernel.rank() != 4) throw ShapeMismatch("conv2d expects x [C,H,W] and kernel [O,C,k,k]");
  const std::size_t cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const std::size_t cout = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (kernel.shape()[1] != cin) {
    throw ShapeMismatch("conv2d channel mismatch: input " + std::to_string(cin) + ", kernel " +
                        std::to_string(kernel.shape()[1]));
  }
  if (kh > H + 2 * pad || kw > W + 2 * pad) throw ShapeMismatch("conv2d kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(cout * Ho * Wo, 0.0);
  auto xv = x.data();
  auto kv = kernel.data();
  const auto P = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t dy = 0; dy < kh; ++dy)
        for (std::size_t dx = 0; dx < kw; ++dx) {
          const double kval = kv[((o * cin + c) * kh + dy) * kw + dx];
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + dy) - P;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + dx) - P;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              out[(o * Ho + oy) * Wo + ox] += kval * xv[(c * H + iy) * W + ix];
            }
          }
        }
  return Tensor::make_result(
      {cout, Ho, Wo}, std::move(out), {x, kernel},
      [=](Tensor::Node& self) {
        const auto& xv = input_data(self, 0);
        const auto& kv = input_data(self, 1);
        const bool gx_on = wants_grad(self, 0), gk_on = wants_grad(self, 1);
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const std::size_t kidx = ((o * cin + c) * kh + dy) * kw + dx;
                double gk = 0.0;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + dy) - P;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t ox = 0; ox < Wo; ++ox) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + dx) - P;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    const double g = self.grad[(o * Ho + oy) * Wo + ox];
                    const std::size_t xi = (c * H + iy) * W + ix;
                    gk += g * xv[xi];
                    if (gx_on) input_grad(self, 0)[xi] += g * kv[kidx];
                  }
                }
                if (gk_on) input_grad(self, 1)[kidx] += gk;
              }
      });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis`; max-shifted for stability.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw InvalidParam("softmax axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t len = x.shape()[axis];
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < len; ++a) mx = std::max(mx, xv[base + a * inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < len; ++a) z += (out[base + a * inner] = std::exp(xv[base + a * inner] - mx));
      for (std::size_t a = 0; a < len; ++a) out[base + a * inner] /= z;
    }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [outer, inner, len](Tensor::Node& self) {
    auto& gx = input_grad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t a = 0; a < len; ++a) dot += self.grad[base + a * inner] * self.data[base + a * inner];
        for (std::size_t a = 0; a < len; ++a) {
          const std::size_t k = base + a * inner;
          gx[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each trailing-axis slice to zero mean and unit (population)
/// variance, then applies gamma and beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps) {
  const std::size_t D = x.shape().back();
  if (gamma.numel() != D || beta.numel() != D) {
    throw ShapeMismatch("layer_norm: gamma/beta extent must be " + std::to_string(D));
  }
  const std::size_t rows = x.numel() / D;
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t i = 0; i < D; ++i) mu += xv[r * D + i];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      const double d = xv[r * D + i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(D);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < D; ++i) {
      const double h = (xv[r * D + i] - mu) * is;
      (*xhat)[r * D + i] = h;
      out[r * D + i] = gamma[i] * h + beta[i];
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x, gamma, beta}, [=](Tensor::Node& self) {
    const auto& gv = input_data(self, 1);
    const double* G = self.grad.data();
    if (wants_grad(self, 0)) {
      auto& gx = input_grad(self, 0);
      for (std::size_t r = 0; r < rows; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < D; ++i) {
          const double gh = G[r * D + i] * gv[i];
          s1 += gh;
          s2 += gh * (*xhat)[r * D + i];
        }
        const double invD = 1.0 / static_cast<double>(D);
        for (std::size_t i = 0; i < D; ++i) {
          const double gh = G[r * D + i] * gv[i];
          gx[r * D + i] += (*inv_std)[r] * (gh - invD * s1 - (*xhat)[r * D + i] * invD * s2);
        }
      }
    }
    if (wants_grad(self, 1)) {
      auto& gg = input_grad(self, 1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < D; ++i) gg[i] += G[r * D + i] * (*xhat)[r * D + i];
    }
    if (wants_grad(self, 2)) {
      auto& gb = input_grad(self, 2);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < D; ++i) gb[i] += G[r * D + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolMode { Avg, Max };

namespace detail {

// Reduces [C,H,W] over a set of positions. `groups` output cells, each
// reducing `count` input elements located at base(g) + j*step.
inline Tensor pool_generic(const Tensor& x, Shape out_shape, std::size_t groups, std::size_t count,
                           std::function<std::size_t(std::size_t, std::size_t)> at, PoolMode mode) {
  std::vector<double> out(groups);
  auto arg = std::make_shared<std::vector<std::size_t>>(groups);
  auto xv = x.data();
  for (std::size_t g = 0; g < groups; ++g) {
    if (mode == PoolMode::Avg) {
      double s = 0.0;
      for (std::size_t j = 0; j < count; ++j) s += xv[at(g, j)];
      out[g] = s / static_cast<double>(count);
    } else {
      std::size_t best = at(g, 0);
      for (std::size_t j = 1; j < count; ++j) {
        const std::size_t k = at(g, j);
        if (xv[k] > xv[best]) best = k;
      }
      (*arg)[g] = best;
      out[g] = xv[best];
    }
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), {x},
                             [=](Tensor::Node& self) {
                               auto& gx = input_grad(self, 0);
                               for (std::size_t g = 0; g < groups; ++g) {
                                 if (mode == PoolMode::Avg) {
                                   const double share = self.grad[g] / static_cast<double>(count);
                                   for (std::size_t j = 0; j < count; ++j) gx[at(g, j)] += share;
                                 } else {
                                   gx[(*arg)[g]] += self.grad[g];
                                 }
                               }
                             });
}

}  // namespace detail

/// Per-channel reduction over H x W: [C,H,W] -> [C,1,1].
inline Tensor pool_spatial(const Tensor& x, PoolMode mode) {
  if (x.rank() != 3) throw ShapeMismatch("pool_spatial expects [C,H,W]");
  const std::size_t C = x.shape()[0], HW = x.shape()[1] * x.shape()[2];
  return detail::pool_generic(
      x, {C, 1, 1}, C, HW, [HW](std::size_t g, std::size_t j) { return g * HW + j; }, mode);
}

/// Per-pixel reduction across channels: [C,H,W] -> [1,H,W].
inline Tensor pool_channel(const Tensor& x, PoolMode mode) {
  if (x.rank() != 3) throw ShapeMismatch("pool_channel expects [C,H,W]");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2], HW = H * W;
  return detail::pool_generic(
      x, {1, H, W}, HW, C, [HW](std::size_t g, std::size_t j) { return j * HW + g; }, mode);
}

// ---------------------------------------------------------------------------
// Losses

/// Mean cross-entropy of logits [N,K] against class indices.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2 || logits.shape()[0] != targets.size()) {
    throw ShapeMismatch("cross_entropy expects logits [N,K] with N targets");
  }
  const std::size_t N = logits.shape()[0], K = logits.shape()[1];
  auto probs = std::make_shared<std::vector<double>>(N * K);
  double loss = 0.0;
  auto lv = logits.data();
  for (std::size_t n = 0; n < N; ++n) {
    if (targets[n] >= K) throw InvalidParam("cross_entropy target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, lv[n * K + k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(lv[n * K + k] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < K; ++k) (*probs)[n * K + k] = std::exp(lv[n * K + k] - lse);
    loss += lse - lv[n * K + targets[n]];
  }
  loss /= static_cast<double>(N);
  auto tgt = std::make_shared<std::vector<std::size_t>>(targets);
  return Tensor::make_result({}, {loss}, {logits}, [=](Tensor::Node& self) {
    auto& g = input_grad(self, 0);
    const double s = self.grad[0] / static_cast<double>(N);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        g[n * K + k] += s * ((*probs)[n * K + k] - (k == (*tgt)[n] ? 1.0 : 0.0));
      }
  });
}

/// Summed binary cross-entropy on logits with 0/1 targets.
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
  if (logits.numel() != targets.size()) throw ShapeMismatch("bce_with_logits target count");
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double z = logits[i];
    // softplus(z) - y z, computed stably
    loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - targets[i] * z;
  }
  auto tgt = std::make_shared<std::vector<double>>(targets);
  return Tensor::make_result({}, {loss}, {logits}, [tgt](Tensor::Node& self) {
    const auto& zv = input_data(self, 0);
    auto& g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * (sigmoid_scalar(zv[i]) - (*tgt)[i]);
  });
}

/// Summed smooth-L1 (Huber with transition beta) between pred and a fixed target.
inline Tensor smooth_l1(const Tensor& pred, const std::vector<double>& target, double beta = 1.0) {
  if (pred.numel() != target.size()) throw ShapeMismatch("smooth_l1 target count");
  double loss = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = std::abs(pred[i] - target[i]);
    loss += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
  }
  auto tgt = std::make_shared<std::vector<double>>(target);
  return Tensor::make_result({}, {loss}, {pred}, [tgt, beta](Tensor::Node& self) {
    const auto& pv = input_data(self, 0);
    auto& g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double d = pv[i] - (*tgt)[i];
      const double dd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
      g[i] += self.grad[0] * dd;
    }
  });
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace cbamswin
