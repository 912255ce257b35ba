#pragma once

/**
 * @file swin.hpp
 * @brief Four-stage Swin backbone with optional CBAM at model, stage or block level.
 *
 * Token maps are kept as [H', W', D] (or flattened [L, D]) inside a stage;
 * stage outputs are returned channel-first, [D, H', W'].
 *
 * Successive blocks alternate regular windows (even index) and windows
 * shifted by floor(window/2) (odd index):
 *
 *     z_hat = (S)W-MSA(LN(z)) + z
 *     z     = MLP(LN(z_hat)) + z_hat
 *
 * With block-level CBAM the normalized tokens are refined by channel
 * attention before W-MSA and by spatial attention before SW-MSA, inside the
 * residual branch.
 */

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cbamswin/cbam.hpp"
#include "cbamswin/ops.hpp"
#include "cbamswin/rng.hpp"

namespace cbamswin {

inline constexpr std::size_t kNumStages = 4;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr double kMaskLarge = 1e9;

enum class CbamPlacement { None, ModelLevel, StageLevel, BlockLevel };

inline std::string to_string(CbamPlacement p) {
  switch (p) {
    case CbamPlacement::None: return "none";
    case CbamPlacement::ModelLevel: return "model";
    case CbamPlacement::StageLevel: return "stage";
    case CbamPlacement::BlockLevel: return "block";
  }
  return "none";
}

inline CbamPlacement placement_from_string(const std::string& s) {
  if (s == "none" || s == "None") return CbamPlacement::None;
  if (s == "model" || s == "ModelLevel") return CbamPlacement::ModelLevel;
  if (s == "stage" || s == "StageLevel") return CbamPlacement::StageLevel;
  if (s == "block" || s == "BlockLevel") return CbamPlacement::BlockLevel;
  throw InvalidParam("unknown placement '" + s + "' (expected none|model|stage|block)");
}

struct SwinConfig {
  std::size_t embed_dim = 16;
  std::array<std::size_t, kNumStages> depths{2, 2, 2, 2};
  std::array<std::size_t, kNumStages> num_heads{1, 2, 4, 8};
  std::size_t window_size = 2;
  double mlp_ratio = 4.0;
  CbamPlacement placement = CbamPlacement::None;
  std::size_t cbam_reduction = 4;
  std::size_t patch_size = 4;
  std::array<std::size_t, 2> input_size{32, 32};  // H, W
  std::uint64_t seed = 0;
  bool relative_position_bias = true;

  /// Desk-scale configuration used by tests and the default CLI runs.
  static SwinConfig nano() { return SwinConfig{}; }

  /// Swin-T sized configuration: C=96, depths [2,2,6,2], window 7, 224x224.
  static SwinConfig tiny() {
    SwinConfig c;
    c.embed_dim = 96;
    c.depths = {2, 2, 6, 2};
    c.num_heads = {3, 6, 12, 24};
    c.window_size = 7;
    c.cbam_reduction = 16;
    c.input_size = {224, 224};
    return c;
  }

  std::size_t stage_dim(std::size_t s) const { return embed_dim << s; }
  std::size_t stage_height(std::size_t s) const { return input_size[0] / patch_size >> s; }
  std::size_t stage_width(std::size_t s) const { return input_size[1] / patch_size >> s; }
  std::size_t shift() const { return window_size / 2; }
  std::size_t hidden_dim(std::size_t s) const {
    return static_cast<std::size_t>(static_cast<double>(stage_dim(s)) * mlp_ratio + 0.5);
  }

  void validate() const {
    if (embed_dim == 0) throw InvalidParam("embed_dim must be positive");
    if (window_size == 0) throw InvalidParam("window_size must be positive");
    if (patch_size == 0) throw InvalidParam("patch_size must be positive");
    if (!(mlp_ratio > 0.0)) throw InvalidParam("mlp_ratio must be positive");
    if (cbam_reduction == 0) throw InvalidParam("cbam_reduction must be positive");
    for (std::size_t s = 0; s < kNumStages; ++s) {
      if (depths[s] == 0) throw InvalidParam("every stage needs at least one block");
      if (num_heads[s] == 0 || stage_dim(s) % num_heads[s] != 0) {
        throw InvalidParam("stage " + std::to_string(s) + " dimension " + std::to_string(stage_dim(s)) +
                           " is not divisible by " + std::to_string(num_heads[s]) + " heads");
      }
    }
    for (std::size_t a = 0; a < 2; ++a) {
      const std::size_t ext = input_size[a];
      if (ext == 0 || ext % patch_size != 0) {
        throw IndivisibleInput("input extent " + std::to_string(ext) + " is not divisible by patch size " +
                               std::to_string(patch_size));
      }
      // Three merges halve the token grid; each must see an even extent.
      std::size_t t = ext / patch_size;
      for (std::size_t s = 1; s < kNumStages; ++s, t /= 2) {
        if (t % 2 != 0) {
          throw IndivisibleInput("token extent " + std::to_string(t) + " cannot be merged at stage " +
                                 std::to_string(s));
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Parameter bundles

struct LayerNormParams {
  Tensor gamma, beta;
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "gamma", gamma);
    f(prefix + "beta", beta);
  }
};

struct LinearParams {
  Tensor w;  // [out, in]
  std::optional<Tensor> b;
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "w", w);
    if (b) f(prefix + "b", *b);
  }
};

inline Tensor apply(const LinearParams& p, const Tensor& x) { return linear(x, p.w, p.b); }
inline Tensor apply(const LayerNormParams& p, const Tensor& x) { return layer_norm(x, p.gamma, p.beta); }

inline LayerNormParams make_layer_norm(std::size_t d) {
  return {Tensor::param({d}, std::vector<double>(d, 1.0)), Tensor::param({d}, std::vector<double>(d, 0.0))};
}

inline LinearParams make_linear(std::size_t in, std::size_t out, bool bias, Rng& rng, double std = 0.02) {
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.trunc_normal(std);
  LinearParams p{Tensor::param({out, in}, std::move(w)), std::nullopt};
  if (bias) p.b = Tensor::param({out}, std::vector<double>(out, 0.0));
  return p;
}

struct BlockParams {
  LayerNormParams norm1, norm2;
  LinearParams qkv;       // [3D, D]
  LinearParams proj;      // [D, D]
  Tensor rel_bias;        // [(2w-1)^2, heads]
  LinearParams fc1, fc2;  // D -> hidden -> D
  std::optional<ChannelAttentionParams> cam;
  std::optional<SpatialAttentionParams> sam;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + "norm1.", f);
    qkv.visit(prefix + "qkv.", f);
    proj.visit(prefix + "proj.", f);
    f(prefix + "rel_bias", rel_bias);
    norm2.visit(prefix + "norm2.", f);
    fc1.visit(prefix + "fc1.", f);
    fc2.visit(prefix + "fc2.", f);
    if (cam) cam->visit(prefix + "cam.", f);
    if (sam) sam->visit(prefix + "sam.", f);
  }
};

struct PatchMergingParams {
  LayerNormParams norm;    // over 4D
  LinearParams reduction;  // [2D, 4D], no bias
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + "norm.", f);
    reduction.visit(prefix + "reduction.", f);
  }
};

struct StageParams {
  std::optional<PatchMergingParams> merge;  // absent for stage 0
  std::optional<ChannelAttentionParams> entry_cam;
  std::optional<SpatialAttentionParams> entry_sam;
  std::vector<BlockParams> blocks;
};

struct BackboneParams {
  LinearParams embed;  // [C, C_img * p * p]
  std::optional<ChannelAttentionParams> model_cam;
  std::optional<SpatialAttentionParams> model_sam;
  std::array<StageParams, kNumStages> stages;

  template <class F>
  void visit(F&& f) {
    embed.visit("embed.", f);
    if (model_cam) model_cam->visit("model_cbam.cam.", f);
    if (model_sam) model_sam->visit("model_cbam.sam.", f);
    for (std::size_t s = 0; s < kNumStages; ++s) {
      auto& st = stages[s];
      const std::string sp = "stage" + std::to_string(s) + ".";
      if (st.merge) st.merge->visit(sp + "merge.", f);
      if (st.entry_cam) st.entry_cam->visit(sp + "entry_cbam.cam.", f);
      if (st.entry_sam) st.entry_sam->visit(sp + "entry_cbam.sam.", f);
      for (std::size_t b = 0; b < st.blocks.size(); ++b) st.blocks[b].visit(sp + "block" + std::to_string(b) + ".", f);
    }
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Tensor& t) { n += t.numel(); });
    return n;
  }
};

inline BlockParams make_block(std::size_t dim, std::size_t heads, std::size_t window, std::size_t hidden,
                              Rng& rng) {
  BlockParams b{make_layer_norm(dim),
                make_layer_norm(dim),
                make_linear(dim, 3 * dim, true, rng),
                make_linear(dim, dim, true, rng),
                Tensor(),
                make_linear(dim, hidden, true, rng),
                make_linear(hidden, dim, true, rng),
                std::nullopt,
                std::nullopt};
  const std::size_t span = 2 * window - 1;
  std::vector<double> table(span * span * heads);
  for (auto& v : table) v = rng.trunc_normal(0.02);
  b.rel_bias = Tensor::param({span * span, heads}, std::move(table));
  return b;
}

/// Parameters for the whole backbone, seeded from cfg.seed.
inline BackboneParams init_backbone(const SwinConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  BackboneParams p;
  const std::size_t stem_in = kImageChannels * cfg.patch_size * cfg.patch_size;
  p.embed = make_linear(stem_in, cfg.embed_dim, true, rng);
  if (cfg.placement == CbamPlacement::ModelLevel) {
    p.model_cam = make_channel_attention(kImageChannels, effective_reduction(kImageChannels, cfg.cbam_reduction), rng);
    p.model_sam = make_spatial_attention(rng);
  }
  for (std::size_t s = 0; s < kNumStages; ++s) {
    auto& st = p.stages[s];
    const std::size_t dim = cfg.stage_dim(s);
    if (s > 0) {
      const std::size_t in = 4 * cfg.stage_dim(s - 1);
      st.merge = PatchMergingParams{make_layer_norm(in), make_linear(in, dim, false, rng)};
    }
    if (cfg.placement == CbamPlacement::StageLevel) {
      const std::size_t entry = s == 0 ? stem_in : 4 * cfg.stage_dim(s - 1);
      st.entry_cam = make_channel_attention(entry, effective_reduction(entry, cfg.cbam_reduction), rng);
      st.entry_sam = make_spatial_attention(rng);
    }
    for (std::size_t b = 0; b < cfg.depths[s]; ++b) {
      st.blocks.push_back(make_block(dim, cfg.num_heads[s], cfg.window_size, cfg.hidden_dim(s), rng));
      if (cfg.placement == CbamPlacement::BlockLevel) {
        if (b % 2 == 0) {
          st.blocks.back().cam = make_channel_attention(dim, effective_reduction(dim, cfg.cbam_reduction), rng);
        } else {
          st.blocks.back().sam = make_spatial_attention(rng);
        }
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Token layout helpers

/// [H,W,D] -> [D,H,W]
inline Tensor tokens_to_chw(const Tensor& x) { return permute(x, {2, 0, 1}); }
/// [D,H,W] -> [H,W,D]
inline Tensor chw_to_tokens(const Tensor& x) { return permute(x, {1, 2, 0}); }

/// Cyclic shift of [H,W,D]: out[r][c] = x[(r+dy) mod H][(c+dx) mod W].
inline Tensor roll_hw(const Tensor& x, std::ptrdiff_t dy, std::ptrdiff_t dx) {
  const auto H = static_cast<std::ptrdiff_t>(x.shape()[0]);
  const auto W = static_cast<std::ptrdiff_t>(x.shape()[1]);
  const auto D = static_cast<std::ptrdiff_t>(x.shape()[2]);
  std::vector<std::ptrdiff_t> idx;
  idx.reserve(x.numel());
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      const std::ptrdiff_t sr = ((r + dy) % H + H) % H;
      const std::ptrdiff_t sc = ((c + dx) % W + W) % W;
      for (std::ptrdiff_t d = 0; d < D; ++d) idx.push_back((sr * W + sc) * D + d);
    }
  return gather(x, x.shape(), std::move(idx));
}

/// Zero-pads [H,W,D] on the bottom/right to [Hp,Wp,D], or crops back when Hp<=H.
inline Tensor resize_hw(const Tensor& x, std::size_t Hp, std::size_t Wp) {
  const std::size_t H = x.shape()[0], W = x.shape()[1], D = x.shape()[2];
  if (Hp == H && Wp == W) return x;
  std::vector<std::ptrdiff_t> idx;
  idx.reserve(Hp * Wp * D);
  for (std::size_t r = 0; r < Hp; ++r)
    for (std::size_t c = 0; c < Wp; ++c)
      for (std::size_t d = 0; d < D; ++d)
        idx.push_back(r < H && c < W ? static_cast<std::ptrdiff_t>((r * W + c) * D + d) : -1);
  return gather(x, {Hp, Wp, D}, std::move(idx));
}

/// [H,W,D] -> [num_windows, window^2, D]; windows row-major, tokens row-major.
inline Tensor window_partition(const Tensor& x, std::size_t window) {
  if (x.rank() != 3) throw ShapeMismatch("window_partition expects [H,W,D]");
  const std::size_t H = x.shape()[0], W = x.shape()[1], D = x.shape()[2];
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw IndivisibleInput("token grid " + std::to_string(H) + "x" + std::to_string(W) +
                           " is not divisible by window " + std::to_string(window));
  }
  Tensor t = reshape(x, {H / window, window, W / window, window, D});
  t = permute(t, {0, 2, 1, 3, 4});
  return reshape(t, {(H / window) * (W / window), window * window, D});
}

/// Inverse of window_partition.
inline Tensor window_reverse(const Tensor& windows, std::size_t H, std::size_t W) {
  if (windows.rank() != 3) throw ShapeMismatch("window_reverse expects [nW,T,D]");
  const std::size_t nW = windows.shape()[0], T = windows.shape()[1], D = windows.shape()[2];
  const auto window = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(T))));
  if (window * window != T || nW * T != H * W || H % window != 0 || W % window != 0) {
    throw ShapeMismatch("cannot reverse " + shape_str(windows.shape()) + " into " + std::to_string(H) + "x" +
                        std::to_string(W));
  }
  Tensor t = reshape(windows, {H / window, W / window, window, window, D});
  t = permute(t, {0, 2, 1, 3, 4});
  return reshape(t, {H, W, D});
}

/// Attention mask [num_windows, T, T] for a cyclically shifted grid: 0 where two
/// tokens come from the same pre-shift region, -kMaskLarge otherwise.
inline Tensor build_shift_mask(std::size_t H, std::size_t W, std::size_t window, std::size_t shift) {
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw IndivisibleInput("mask grid must be divisible by the window");
  }
  if (shift != 0 && shift != window / 2) {
    throw InvalidParam("shift must be 0 or window/2, got " + std::to_string(shift));
  }
  const std::size_t T = window * window, nWw = W / window, nW = (H / window) * nWw;
  std::vector<double> mask(nW * T * T, 0.0);
  if (shift == 0) return Tensor({nW, T, T}, std::move(mask));
  // Bands along each axis: [0, E-window), [E-window, E-shift), [E-shift, E).
  auto band = [&](std::size_t p, std::size_t E) -> std::size_t {
    if (p < E - window) return 0;
    if (p < E - shift) return 1;
    return 2;
  };
  for (std::size_t w = 0; w < nW; ++w) {
    const std::size_t r0 = (w / nWw) * window, c0 = (w % nWw) * window;
    for (std::size_t i = 0; i < T; ++i) {
      const std::size_t ri = band(r0 + i / window, H) * 3 + band(c0 + i % window, W);
      for (std::size_t j = 0; j < T; ++j) {
        const std::size_t rj = band(r0 + j / window, H) * 3 + band(c0 + j % window, W);
        mask[(w * T + i) * T + j] = ri == rj ? 0.0 : -kMaskLarge;
      }
    }
  }
  return Tensor({nW, T, T}, std::move(mask));
}

/// Gathers the relative position bias table [(2w-1)^2, heads] into [heads, T, T].
inline Tensor relative_bias(const Tensor& table, std::size_t window, std::size_t heads) {
  const std::size_t T = window * window, span = 2 * window - 1;
  if (table.shape() != Shape{span * span, heads}) throw ShapeMismatch("relative bias table shape");
  std::vector<std::ptrdiff_t> idx;
  idx.reserve(heads * T * T);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) {
        const std::size_t dr = i / window + window - 1 - j / window;
        const std::size_t dc = i % window + window - 1 - j % window;
        idx.push_back(static_cast<std::ptrdiff_t>((dr * span + dc) * heads + h));
      }
  return gather(table, {heads, T, T}, std::move(idx));
}

/// Multi-head self-attention within each window of [nW, T, D].
///
/// scores = Q K^T / sqrt(D/heads) + relative bias + mask, softmax over keys.
/// When `weights_out` is given it receives the attention weights [nW,heads,T,T].
inline Tensor window_msa(const Tensor& x, const BlockParams& p, const std::optional<Tensor>& mask,
                         std::size_t heads, bool use_relative_bias = true, Tensor* weights_out = nullptr) {
  if (x.rank() != 3) throw ShapeMismatch("window_msa expects [nW,T,D]");
  const std::size_t nW = x.shape()[0], T = x.shape()[1], D = x.shape()[2];
  if (heads == 0 || D % heads != 0) throw ShapeMismatch("dimension not divisible by heads");
  const std::size_t dh = D / heads;
  Tensor qkv = reshape(apply(p.qkv, x), {nW, T, 3, heads, dh});
  qkv = permute(qkv, {2, 0, 3, 1, 4});  // [3, nW, heads, T, dh]
  auto part = [&](std::size_t i) { return reshape(slice(qkv, 0, i, 1), {nW, heads, T, dh}); };
  Tensor q = scale(part(0), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor scores = matmul(q, transpose_last(part(1)));  // [nW, heads, T, T]
  if (use_relative_bias) {
    const auto window = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(T))));
    scores = add(scores, relative_bias(p.rel_bias, window, heads));
  }
  if (mask) {
    if (mask->shape() != Shape{nW, T, T}) throw ShapeMismatch("mask must be [nW,T,T]");
    scores = add(scores, reshape(*mask, {nW, 1, T, T}));
  }
  Tensor attn = softmax(scores, 3);
  if (weights_out) *weights_out = attn;
  Tensor out = matmul(attn, part(2));  // [nW, heads, T, dh]
  out = reshape(permute(out, {0, 2, 1, 3}), {nW, T, D});
  return apply(p.proj, out);
}

enum class BlockAttention { None, Channel, Spatial };

struct BlockGeometry {
  std::size_t height = 0, width = 0;
  std::size_t window = 2;
  std::size_t shift = 0;
  std::size_t heads = 1;
  bool relative_bias = true;
};

/// One Swin block on tokens [L,D] laid out on a height x width grid.
inline Tensor swin_block_forward(const Tensor& x, const BlockParams& p, const BlockGeometry& g,
                                 BlockAttention cbam = BlockAttention::None) {
  if (x.rank() != 2 || x.shape()[0] != g.height * g.width) {
    throw ShapeMismatch("block input " + shape_str(x.shape()) + " does not match a " + std::to_string(g.height) +
                        "x" + std::to_string(g.width) + " grid");
  }
  const std::size_t D = x.shape()[1];
  Tensor h = apply(p.norm1, x);
  if (cbam != BlockAttention::None) {
    Tensor f = tokens_to_chw(reshape(h, {g.height, g.width, D}));
    if (cbam == BlockAttention::Channel) {
      if (!p.cam) throw InvalidParam("block has no channel attention parameters");
      f = refine(f, {channel_attention_map(f, *p.cam), std::nullopt}, RefineMode::ChannelOnly);
    } else {
      if (!p.sam) throw InvalidParam("block has no spatial attention parameters");
      f = refine(f, {std::nullopt, spatial_attention_map(f, *p.sam)}, RefineMode::SpatialOnly);
    }
    h = reshape(chw_to_tokens(f), {g.height * g.width, D});
  }
  const std::size_t Hp = (g.height + g.window - 1) / g.window * g.window;
  const std::size_t Wp = (g.width + g.window - 1) / g.window * g.window;
  h = resize_hw(reshape(h, {g.height, g.width, D}), Hp, Wp);
  const auto s = static_cast<std::ptrdiff_t>(g.shift);
  if (g.shift) h = roll_hw(h, s, s);
  std::optional<Tensor> mask;
  if (g.shift) mask = build_shift_mask(Hp, Wp, g.window, g.shift);
  Tensor attn = window_msa(window_partition(h, g.window), p, mask, g.heads, g.relative_bias);
  h = window_reverse(attn, Hp, Wp);
  if (g.shift) h = roll_hw(h, -s, -s);
  h = reshape(resize_hw(h, g.height, g.width), {g.height * g.width, D});
  Tensor z = add(x, h);
  return add(z, apply(p.fc2, gelu(apply(p.fc1, apply(p.norm2, z)))));
}

/// Which CBAM sub-module block `index` of a stage carries under a placement.
inline BlockAttention block_attention(CbamPlacement placement, std::size_t index) {
  if (placement != CbamPlacement::BlockLevel) return BlockAttention::None;
  return index % 2 == 0 ? BlockAttention::Channel : BlockAttention::Spatial;
}

/// Two successive blocks: W-MSA then SW-MSA.
inline Tensor swin_block_pair_forward(const Tensor& x, std::size_t height, std::size_t width,
                                      const BlockParams& first, const BlockParams& second, const SwinConfig& cfg,
                                      std::size_t heads, CbamPlacement placement) {
  BlockGeometry g{height, width, cfg.window_size, 0, heads, cfg.relative_position_bias};
  Tensor y = swin_block_forward(x, first, g, block_attention(placement, 0));
  g.shift = cfg.shift();
  return swin_block_forward(y, second, g, block_attention(placement, 1));
}

// ---------------------------------------------------------------------------
// Stem and merging

/// [C_img,H,W] -> [H/p, W/p, C_img*p*p]; each patch flattened in (channel, row, col) order.
inline Tensor patch_partition(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) throw ShapeMismatch("image must be [C,H,W]");
  const std::size_t C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw IndivisibleInput("image " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by patch " +
                           std::to_string(patch));
  }
  const std::size_t Hp = H / patch, Wp = W / patch;
  std::vector<std::ptrdiff_t> idx;
  idx.reserve(image.numel());
  for (std::size_t r = 0; r < Hp; ++r)
    for (std::size_t c = 0; c < Wp; ++c)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px)
            idx.push_back(static_cast<std::ptrdiff_t>((ch * H + r * patch + py) * W + c * patch + px));
  return gather(image, {Hp, Wp, C * patch * patch}, std::move(idx));
}

/// Patch partition followed by the linear embedding; [H/p * W/p, C].
inline Tensor patch_partition_embed(const Tensor& image, const SwinConfig& cfg, const LinearParams& embed) {
  if (image.rank() != 3 || image.shape()[0] != kImageChannels) {
    throw ShapeMismatch("image must have " + std::to_string(kImageChannels) + " channels");
  }
  Tensor t = patch_partition(image, cfg.patch_size);
  const std::size_t Hp = t.shape()[0], Wp = t.shape()[1];
  return reshape(apply(embed, t), {Hp * Wp, embed.w.shape()[0]});
}

/// 2x2 neighbourhood concat of [H,W,D] -> [H/2, W/2, 4D]; order (0,0),(1,0),(0,1),(1,1).
inline Tensor merge_neighbourhoods(const Tensor& x) {
  if (x.rank() != 3) throw ShapeMismatch("patch merging expects [H,W,D]");
  const std::size_t H = x.shape()[0], W = x.shape()[1], D = x.shape()[2];
  if (H % 2 != 0 || W % 2 != 0) {
    throw IndivisibleInput("patch merging needs even extents, got " + std::to_string(H) + "x" + std::to_string(W));
  }
  static constexpr std::size_t kOffsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  std::vector<std::ptrdiff_t> idx;
  idx.reserve(x.numel());
  for (std::size_t r = 0; r < H / 2; ++r)
    for (std::size_t c = 0; c < W / 2; ++c)
      for (const auto& o : kOffsets)
        for (std::size_t d = 0; d < D; ++d)
          idx.push_back(static_cast<std::ptrdiff_t>(((2 * r + o[0]) * W + 2 * c + o[1]) * D + d));
  return gather(x, {H / 2, W / 2, 4 * D}, std::move(idx));
}

/// [H,W,D] -> [H/2, W/2, 2D]: neighbourhood concat, layer norm, linear reduction.
inline Tensor patch_merging(const Tensor& x, const PatchMergingParams& p) {
  return apply(p.reduction, apply(p.norm, merge_neighbourhoods(x)));
}

// ---------------------------------------------------------------------------
// Backbone

/// CBAM sub-module invocations per forward pass.
inline std::size_t count_cbam_invocations(const SwinConfig& cfg) {
  switch (cfg.placement) {
    case CbamPlacement::None: return 0;
    case CbamPlacement::ModelLevel: return 1;
    case CbamPlacement::StageLevel: return kNumStages;
    case CbamPlacement::BlockLevel: {
      std::size_t n = 0;
      for (auto d : cfg.depths) n += d;
      return n;
    }
  }
  return 0;
}

namespace detail {
inline Tensor cbam_on_tokens(const Tensor& tokens, const ChannelAttentionParams& cam,
                             const SpatialAttentionParams& sam) {
  return chw_to_tokens(cbam_forward(tokens_to_chw(tokens), cam, sam));
}
}  // namespace detail

/// Runs all four stages on a [3,H,W] image; returns [C*2^s, H/p/2^s, W/p/2^s] per stage.
inline std::array<Tensor, kNumStages> backbone_forward(const Tensor& image, const SwinConfig& cfg,
                                                        const BackboneParams& params) {
  if (image.rank() != 3 || image.shape()[0] != kImageChannels) {
    throw ShapeMismatch("image must be [3,H,W], got " + shape_str(image.shape()));
  }
  if (image.shape()[1] % cfg.patch_size != 0 || image.shape()[2] % cfg.patch_size != 0) {
    throw IndivisibleInput("image extents must be divisible by patch size " + std::to_string(cfg.patch_size));
  }
  Tensor img = image;
  if (cfg.placement == CbamPlacement::ModelLevel) img = cbam_forward(img, *params.model_cam, *params.model_sam);

  Tensor grid = patch_partition(img, cfg.patch_size);  // [H', W', C_img p^2]
  if (cfg.placement == CbamPlacement::StageLevel) {
    grid = detail::cbam_on_tokens(grid, *params.stages[0].entry_cam, *params.stages[0].entry_sam);
  }
  grid = apply(params.embed, grid);  // [H', W', C]

  std::array<Tensor, kNumStages> outputs;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const auto& st = params.stages[s];
    if (s > 0) {
      grid = merge_neighbourhoods(grid);
      if (cfg.placement == CbamPlacement::StageLevel) grid = detail::cbam_on_tokens(grid, *st.entry_cam, *st.entry_sam);
      grid = apply(st.merge->reduction, apply(st.merge->norm, grid));
    }
    const std::size_t H = grid.shape()[0], W = grid.shape()[1], D = grid.shape()[2];
    Tensor tokens = reshape(grid, {H * W, D});
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      BlockGeometry g{H, W, cfg.window_size, b % 2 ? cfg.shift() : 0, cfg.num_heads[s], cfg.relative_position_bias};
      tokens = swin_block_forward(tokens, st.blocks[b], g, block_attention(cfg.placement, b));
    }
    grid = reshape(tokens, {H, W, D});
    outputs[s] = tokens_to_chw(grid);
  }
  return outputs;
}

}  // namespace cbamswin
