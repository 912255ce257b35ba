#pragma once

/**
 * @file cbam.hpp
 * @brief Channel and spatial attention (CBAM) over [C,H,W] features.
 *
 * Channel map:  M_c = sigmoid(W1 relu(W0 avg(F)) + W1 relu(W0 max(F)))   [C,1,1]
 * Spatial map:  M_s = sigmoid(conv7x7([avg_c(F); max_c(F)]), pad 3)      [1,H,W]
 *
 * The shared MLP has a ReLU between W0 and W1 and no biases. refine()
 * multiplies features by the maps; it carries no residual of its own.
 */

#include <cstddef>
#include <optional>
#include <string>

#include "cbamswin/ops.hpp"
#include "cbamswin/rng.hpp"

namespace cbamswin {

inline constexpr std::size_t kSpatialKernel = 7;
inline constexpr std::size_t kSpatialPad = 3;

struct ChannelAttentionParams {
  Tensor w0;  // [C/r, C]
  Tensor w1;  // [C, C/r]
  std::size_t reduction = 1;

  std::size_t channels() const { return w0.shape()[1]; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "w0", w0);
    f(prefix + "w1", w1);
  }
};

struct SpatialAttentionParams {
  Tensor kernel;  // [1, 2, 7, 7]

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "kernel", kernel);
  }
};

struct AttentionMaps {
  std::optional<Tensor> m_c;  // [C,1,1]
  std::optional<Tensor> m_s;  // [1,H,W]
};

enum class RefineMode { ChannelOnly, SpatialOnly, Both };

/// Largest divisor of `channels` not exceeding `requested`, so the hidden
/// width channels/r is integral for any channel count.
inline std::size_t effective_reduction(std::size_t channels, std::size_t requested) {
  if (requested == 0) throw InvalidParam("reduction ratio must be positive");
  for (std::size_t r = std::min(requested, channels); r > 1; --r) {
    if (channels % r == 0) return r;
  }
  return 1;
}

inline ChannelAttentionParams make_channel_attention(std::size_t channels, std::size_t reduction, Rng& rng) {
  if (channels == 0 || reduction == 0 || channels % reduction != 0) {
    throw InvalidParam("reduction ratio " + std::to_string(reduction) + " must divide channel count " +
                       std::to_string(channels));
  }
  const std::size_t hidden = channels / reduction;
  std::vector<double> w0(hidden * channels), w1(channels * hidden);
  for (auto& v : w0) v = rng.trunc_normal(1.0 / std::sqrt(static_cast<double>(channels)));
  for (auto& v : w1) v = rng.trunc_normal(1.0 / std::sqrt(static_cast<double>(hidden)));
  return {Tensor::param({hidden, channels}, std::move(w0)), Tensor::param({channels, hidden}, std::move(w1)),
          reduction};
}

inline SpatialAttentionParams make_spatial_attention(Rng& rng) {
  std::vector<double> k(2 * kSpatialKernel * kSpatialKernel);
  for (auto& v : k) v = rng.trunc_normal(1.0 / std::sqrt(static_cast<double>(k.size())));
  return {Tensor::param({1, 2, kSpatialKernel, kSpatialKernel}, std::move(k))};
}

namespace detail {
inline void check_feature(const Tensor& f) {
  if (f.rank() != 3) throw ShapeMismatch("attention expects features [C,H,W], got " + shape_str(f.shape()));
}
}  // namespace detail

inline Tensor channel_attention_map(const Tensor& f, const ChannelAttentionParams& p) {
  detail::check_feature(f);
  const std::size_t C = f.shape()[0];
  if (p.w0.rank() != 2 || p.w0.shape()[1] != C || p.w1.shape()[0] != C || p.w1.shape()[1] != p.w0.shape()[0]) {
    throw ShapeMismatch("channel attention weights do not match " + std::to_string(C) + " channels");
  }
  auto mlp = [&](const Tensor& v) { return linear(relu(linear(v, p.w0)), p.w1); };
  Tensor avg = reshape(pool_spatial(f, PoolMode::Avg), {C});
  Tensor mx = reshape(pool_spatial(f, PoolMode::Max), {C});
  return reshape(sigmoid(add(mlp(avg), mlp(mx))), {C, 1, 1});
}

inline Tensor spatial_attention_map(const Tensor& f, const SpatialAttentionParams& p) {
  detail::check_feature(f);
  const auto& ks = p.kernel.shape();
  if (ks != Shape{1, 2, kSpatialKernel, kSpatialKernel}) {
    throw ShapeMismatch("spatial attention kernel must be [1,2,7,7], got " + shape_str(ks));
  }
  Tensor pooled = concat({pool_channel(f, PoolMode::Avg), pool_channel(f, PoolMode::Max)}, 0);
  return sigmoid(conv2d(pooled, p.kernel, 1, kSpatialPad));
}

/// Number of refine() calls on this thread; lets callers audit how many
/// attention applications a forward pass performed.
inline std::size_t& cbam_refine_counter() {
  thread_local std::size_t count = 0;
  return count;
}

inline Tensor refine(const Tensor& f, const AttentionMaps& maps, RefineMode mode) {
  detail::check_feature(f);
  const std::size_t C = f.shape()[0], H = f.shape()[1], W = f.shape()[2];
  const bool use_c = mode != RefineMode::SpatialOnly;
  const bool use_s = mode != RefineMode::ChannelOnly;
  if (use_c && (!maps.m_c || maps.m_c->shape() != Shape{C, 1, 1})) {
    throw ShapeMismatch("channel map must be [" + std::to_string(C) + ",1,1]");
  }
  if (use_s && (!maps.m_s || maps.m_s->shape() != Shape{1, H, W})) {
    throw ShapeMismatch("spatial map must be [1," + std::to_string(H) + "," + std::to_string(W) + "]");
  }
  ++cbam_refine_counter();
  Tensor out = f;
  if (use_c) out = mul(out, *maps.m_c);
  if (use_s) out = mul(out, *maps.m_s);
  return out;
}

/// Full CBAM application on [C,H,W]: channel map from f, spatial map from the
/// channel-refined features, both applied in sequence.
inline Tensor cbam_forward(const Tensor& f, const ChannelAttentionParams& cam, const SpatialAttentionParams& sam) {
  Tensor m_c = channel_attention_map(f, cam);
  Tensor m_s = spatial_attention_map(mul(f, m_c), sam);
  return refine(f, {m_c, m_s}, RefineMode::Both);
}

}  // namespace cbamswin
