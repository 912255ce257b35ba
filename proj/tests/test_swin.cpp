#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <set>

#include "cbamswin/gradcheck.hpp"
#include "cbamswin/swin.hpp"
#include "test_util.hpp"

using namespace cbamswin;
using cbamswin::testing::random_tensor;

namespace {

Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 31) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

// Block parameters with O(1) random weights so attention is far from uniform.
BlockParams random_block(std::size_t D, std::size_t heads, std::size_t window, std::size_t hidden, Rng& rng,
                         bool grad = false) {
  auto lin = [&](std::size_t in, std::size_t out, double s) {
    return LinearParams{random_tensor({out, in}, rng, -s, s, grad), random_tensor({out}, rng, -0.1, 0.1, grad)};
  };
  const std::size_t span = 2 * window - 1;
  BlockParams b{{random_tensor({D}, rng, 0.5, 1.5, grad), random_tensor({D}, rng, -0.2, 0.2, grad)},
                {random_tensor({D}, rng, 0.5, 1.5, grad), random_tensor({D}, rng, -0.2, 0.2, grad)},
                lin(D, 3 * D, 0.6),
                lin(D, D, 0.5),
                random_tensor({span * span, heads}, rng, -0.5, 0.5, grad),
                lin(D, hidden, 0.5),
                lin(hidden, D, 0.5),
                std::nullopt,
                std::nullopt};
  return b;
}

// Every leaf except the qkv bias, whose key slice has an identically zero
// gradient (a shared key offset shifts each softmax row uniformly) and is
// checked separately.
std::vector<Tensor> block_leaves(BlockParams& b) {
  std::vector<Tensor> out;
  b.visit("", [&](const std::string& name, Tensor& t) {
    if (name != "qkv.b") out.push_back(t);
  });
  return out;
}

// Query/value bias coordinates by central differences; key bias gradient is zero.
void check_qkv_bias(const std::function<Tensor()>& f, Tensor bias, double tol) {
  const std::size_t D = bias.numel() / 3;
  backward(f());
  const std::vector<double> analytic(bias.grad().begin(), bias.grad().end());
  for (std::size_t i = 0; i < bias.numel(); ++i) {
    if (i >= D && i < 2 * D) {
      EXPECT_LT(std::abs(analytic[i]), 1e-12) << "key bias " << i;
      continue;
    }
    const double saved = bias.leaf_data()[i], eps = 1e-5;
    bias.leaf_data()[i] = saved + eps;
    const double up = f().item();
    bias.leaf_data()[i] = saved - eps;
    const double down = f().item();
    bias.leaf_data()[i] = saved;
    EXPECT_LT(rel_err(analytic[i], (up - down) / (2 * eps)), tol) << "qkv bias " << i;
  }
}

// Attention sub-layer of a shifted block on an [H,W,D] grid: roll, partition,
// masked window attention, reverse, roll back.
Tensor shifted_attention(const Tensor& x, const BlockParams& p, std::size_t window, std::size_t shift,
                         std::size_t heads) {
  const std::size_t H = x.shape()[0], W = x.shape()[1];
  const auto s = static_cast<std::ptrdiff_t>(shift);
  Tensor h = roll_hw(x, s, s);
  Tensor a = window_msa(window_partition(h, window), p, build_shift_mask(H, W, window, shift), heads);
  return roll_hw(window_reverse(a, H, W), -s, -s);
}

// After rolling by -shift, original row r lands on shifted row (r - shift) mod H.
// Tokens that wrapped around form their own region inside a shifted window.
struct ShiftedCoord {
  std::size_t row, col;
  bool wrap_r, wrap_c;
};
ShiftedCoord shifted_coord(std::size_t r, std::size_t c, std::size_t H, std::size_t W, std::size_t shift) {
  return {(r + H - shift) % H, (c + W - shift) % W, r < shift, c < shift};
}

}  // namespace

// ---------------------------------------------------------------------------
// Window partition / reverse

TEST(WindowPartition, SingleWindowPreservesOrder) {
  Rng rng(1);
  Tensor x = random_tensor({3, 3, 2}, rng);
  Tensor w = window_partition(x, 3);
  ASSERT_EQ(w.shape(), (Shape{1, 9, 2}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(w[i], x[i]);
}

TEST(WindowPartition, FourByFourWindowTwoOrdering) {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);  // token (r,c) holds 4r+c
  Tensor w = window_partition(Tensor({4, 4, 1}, v), 2);
  ASSERT_EQ(w.shape(), (Shape{4, 4, 1}));
  for (std::size_t win = 0; win < 4; ++win)
    for (std::size_t t = 0; t < 4; ++t) {
      const std::size_t r = (win / 2) * 2 + t / 2, c = (win % 2) * 2 + t % 2;
      EXPECT_EQ(w[win * 4 + t], static_cast<double>(4 * r + c));
    }
  EXPECT_EQ(w[0], 0.0);
  EXPECT_EQ(w[1], 1.0);
  EXPECT_EQ(w[2], 4.0);
  EXPECT_EQ(w[3], 5.0);
}

TEST(WindowPartition, RoundtripAllDivisibleSizes) {
  Rng rng(2);
  for (std::size_t H = 1; H <= 8; ++H)
    for (std::size_t W = 1; W <= 8; ++W)
      for (std::size_t win = 1; win <= 8; ++win) {
        if (H % win || W % win) continue;
        Tensor x = random_tensor({H, W, 3}, rng);
        Tensor back = window_reverse(window_partition(x, win), H, W);
        ASSERT_EQ(back.shape(), x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(back[i], x[i]);
      }
}

TEST(WindowPartition, Errors) {
  EXPECT_THROW(window_partition(Tensor::zeros({4, 6, 1}), 4), IndivisibleInput);
  EXPECT_THROW(window_reverse(Tensor::zeros({4, 4, 1}), 4, 2), ShapeMismatch);
}

// ---------------------------------------------------------------------------
// Shift mask

TEST(ShiftMask, ZeroShiftIsAllZero) {
  Tensor m = build_shift_mask(8, 4, 2, 0);
  ASSERT_EQ(m.shape(), (Shape{8, 4, 4}));
  for (double v : m.data()) EXPECT_EQ(v, 0.0);
}

TEST(ShiftMask, MatchesRegionIdOracle) {
  const std::size_t H = 4, W = 4, win = 2, shift = 1, T = 4;
  Tensor m = build_shift_mask(H, W, win, shift);
  // region id of each shifted position, from the original coordinate it holds
  std::vector<int> region(H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      auto sc = shifted_coord(r, c, H, W, shift);
      region[sc.row * W + sc.col] = (sc.wrap_r ? 2 : 0) + (sc.wrap_c ? 1 : 0);
    }
  for (std::size_t w = 0; w < 4; ++w)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) {
        const std::size_t pi = ((w / 2) * 2 + i / 2) * W + (w % 2) * 2 + i % 2;
        const std::size_t pj = ((w / 2) * 2 + j / 2) * W + (w % 2) * 2 + j % 2;
        EXPECT_EQ(m[(w * T + i) * T + j], region[pi] == region[pj] ? 0.0 : -1e9);
      }
  // Only the last window row/column is split; window 0 is unmasked.
  for (std::size_t k = 0; k < T * T; ++k) EXPECT_EQ(m[k], 0.0);
}

TEST(ShiftMask, SymmetricForAllSizes) {
  for (std::size_t win = 2; win <= 8; ++win)
    for (std::size_t H = win; H <= 8; H += win)
      for (std::size_t W = win; W <= 8; W += win) {
        Tensor m = build_shift_mask(H, W, win, win / 2);
        const std::size_t T = win * win, nW = m.shape()[0];
        for (std::size_t w = 0; w < nW; ++w)
          for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = 0; j < T; ++j) {
              const double v = m[(w * T + i) * T + j];
              ASSERT_EQ(v, m[(w * T + j) * T + i]);
              ASSERT_TRUE(v == 0.0 || v == -1e9);
            }
      }
}

TEST(ShiftMask, InvalidShift) {
  EXPECT_THROW(build_shift_mask(4, 4, 2, 2), InvalidParam);
  EXPECT_THROW(build_shift_mask(8, 8, 4, 1), InvalidParam);
}

// ---------------------------------------------------------------------------
// Window attention

TEST(WindowMsa, IdenticalTokensGiveIdenticalOutputs) {
  Rng rng(3);
  auto p = random_block(4, 2, 2, 8, rng);
  p.rel_bias = Tensor::zeros(p.rel_bias.shape());
  std::vector<double> tok{0.3, -0.7, 1.1, 0.2}, v;
  for (int t = 0; t < 4; ++t) v.insert(v.end(), tok.begin(), tok.end());
  Tensor out = window_msa(Tensor({1, 4, 4}, v), p, std::nullopt, 2);
  for (std::size_t t = 1; t < 4; ++t)
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(out[t * 4 + d], out[d], 1e-15);
}

TEST(WindowMsa, TwoTokenClosedForm) {
  // D=1, one head: q = a x, k = b x, v = c x, identity output projection.
  const double a = 0.8, b = -1.3, c = 2.0, x0 = 0.5, x1 = -1.5;
  BlockParams p{};
  p.qkv = {Tensor({3, 1}, {a, b, c}), Tensor({3}, {0, 0, 0})};
  p.proj = {Tensor({1, 1}, {1.0}), Tensor({1}, {0.0})};
  Tensor out = window_msa(Tensor({1, 2, 1}, {x0, x1}), p, std::nullopt, 1, false);
  const double xs[2] = {x0, x1};
  for (int i = 0; i < 2; ++i) {
    const double s0 = a * xs[i] * b * x0, s1 = a * xs[i] * b * x1;
    const double w0 = 1.0 / (1.0 + std::exp(s1 - s0));
    EXPECT_NEAR(out[i], w0 * c * x0 + (1.0 - w0) * c * x1, 1e-15);
  }
}

TEST(WindowMsa, MaskedWeightVanishes) {
  Rng rng(4);
  auto p = random_block(4, 2, 2, 8, rng);
  Tensor mask = Tensor::zeros({1, 4, 4});
  mask.leaf_data()[0 * 4 + 3] = -1e9;
  mask.leaf_data()[3 * 4 + 0] = -1e9;
  Tensor weights;
  window_msa(random_tensor({1, 4, 4}, rng, -2, 2), p, mask, 2, true, &weights);
  ASSERT_EQ(weights.shape(), (Shape{1, 2, 4, 4}));
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_LT(weights[(h * 4 + 0) * 4 + 3], 1e-30);
    EXPECT_LT(weights[(h * 4 + 3) * 4 + 0], 1e-30);
    EXPECT_GT(weights[(h * 4 + 0) * 4 + 1], 1e-6);
  }
}

TEST(WindowMsa, HeadsMustDivide) {
  Rng rng(5);
  auto p = random_block(4, 3, 2, 8, rng);
  EXPECT_THROW(window_msa(Tensor::zeros({1, 4, 4}), p, std::nullopt, 3), ShapeMismatch);
}

// Shifted-window attention against attention computed directly on the
// unshifted grid, restricting each token to partners that share its shifted
// window and its wrap-around region.
TEST(ShiftedWindowAttention, MatchesBruteForceOnFourByFour) {
  const std::size_t H = 4, W = 4, win = 2, shift = 1, D = 6, heads = 2, dh = D / heads;
  const std::size_t span = 2 * win - 1;
  Rng rng(6);
  auto p = random_block(D, heads, win, 8, rng);
  Tensor x = random_tensor({H, W, D}, rng, -1.5, 1.5);
  Tensor got = shifted_attention(x, p, win, shift, heads);

  const std::size_t L = H * W;
  std::vector<double> qkv(L * 3 * D);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t o = 0; o < 3 * D; ++o) {
      double s = (*p.qkv.b)[o];
      for (std::size_t i = 0; i < D; ++i) s += p.qkv.w[o * D + i] * x[t * D + i];
      qkv[t * 3 * D + o] = s;
    }
  double max_diff = 0.0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t t = r * W + c;
      auto a = shifted_coord(r, c, H, W, shift);
      std::vector<double> concat(D, 0.0);
      for (std::size_t h = 0; h < heads; ++h) {
        std::vector<std::pair<std::size_t, double>> scores;
        for (std::size_t r2 = 0; r2 < H; ++r2)
          for (std::size_t c2 = 0; c2 < W; ++c2) {
            auto b = shifted_coord(r2, c2, H, W, shift);
            if (a.row / win != b.row / win || a.col / win != b.col / win) continue;
            if (a.wrap_r != b.wrap_r || a.wrap_c != b.wrap_c) continue;
            const std::size_t t2 = r2 * W + c2;
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += qkv[t * 3 * D + h * dh + e] * qkv[t2 * 3 * D + D + h * dh + e];
            s /= std::sqrt(static_cast<double>(dh));
            const std::size_t dr = a.row % win + win - 1 - b.row % win;
            const std::size_t dc = a.col % win + win - 1 - b.col % win;
            s += p.rel_bias[(dr * span + dc) * heads + h];
            scores.emplace_back(t2, s);
          }
        double mx = -1e300, z = 0.0;
        for (auto& [_, s] : scores) mx = std::max(mx, s);
        for (auto& [_, s] : scores) z += std::exp(s - mx);
        for (auto& [t2, s] : scores)
          for (std::size_t e = 0; e < dh; ++e)
            concat[h * dh + e] += std::exp(s - mx) / z * qkv[t2 * 3 * D + 2 * D + h * dh + e];
      }
      for (std::size_t o = 0; o < D; ++o) {
        double s = (*p.proj.b)[o];
        for (std::size_t i = 0; i < D; ++i) s += p.proj.w[o * D + i] * concat[i];
        max_diff = std::max(max_diff, std::abs(s - got[t * D + o]));
      }
    }
  EXPECT_LT(max_diff, 1e-10);
}

// ---------------------------------------------------------------------------
// Blocks

TEST(SwinBlock, ZeroBranchesAreIdentity) {
  Rng rng(7);
  const std::size_t D = 8;
  auto zero_block = [&] {
    auto b = make_block(D, 2, 2, 16, rng);
    b.visit("", [](const std::string& name, Tensor& t) {
      if (name.find("norm") == std::string::npos) t = Tensor::zeros(t.shape());
    });
    return b;
  };
  auto b0 = zero_block(), b1 = zero_block();
  SwinConfig cfg;
  Tensor x = random_tensor({16, D}, rng);
  Tensor y = swin_block_pair_forward(x, 4, 4, b0, b1, cfg, 2, CbamPlacement::None);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(SwinBlock, SaturatedCbamMatchesPlainBlocks) {
  Rng rng(8);
  const std::size_t D = 8, heads = 2;
  auto b0 = random_block(D, heads, 2, 16, rng), b1 = random_block(D, heads, 2, 16, rng);
  Tensor x = random_tensor({16, D}, rng);
  SwinConfig cfg;
  Tensor plain = swin_block_pair_forward(x, 4, 4, b0, b1, cfg, heads, CbamPlacement::None);

  // Channel logits K(|avg| + |max|) and spatial logits K * channel-max are
  // large and positive for normalized tokens, so both maps are ~1.
  const double K = 1e4;
  std::vector<double> w0(2 * D * D, 0.0), w1(D * 2 * D, 0.0), k(2 * 49, 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    w0[d * D + d] = 1.0;
    w0[(D + d) * D + d] = -1.0;
    w1[d * 2 * D + d] = K;
    w1[d * 2 * D + D + d] = K;
  }
  k[49 + 24] = K;  // centre tap of the max channel
  auto s0 = b0, s1 = b1;
  s0.cam = ChannelAttentionParams{Tensor({2 * D, D}, w0), Tensor({D, 2 * D}, w1), 1};
  s1.sam = SpatialAttentionParams{Tensor({1, 2, 7, 7}, k)};
  Tensor sat = swin_block_pair_forward(x, 4, 4, s0, s1, cfg, heads, CbamPlacement::BlockLevel);
  double diff = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) diff = std::max(diff, std::abs(sat[i] - plain[i]));
  EXPECT_LT(diff, 1e-3);
}

TEST(SwinBlock, BlockLevelMatchesCompositionalOracle) {
  Rng rng(9);
  const std::size_t D = 8, H = 4, W = 4, heads = 2, win = 2;
  auto b0 = random_block(D, heads, win, 16, rng), b1 = random_block(D, heads, win, 16, rng);
  b0.cam = make_channel_attention(D, 2, rng);
  b1.sam = make_spatial_attention(rng);
  Tensor x = random_tensor({H * W, D}, rng);
  SwinConfig cfg;
  Tensor got = swin_block_pair_forward(x, H, W, b0, b1, cfg, heads, CbamPlacement::BlockLevel);

  // Block 1: norm -> channel attention on [D,H,W] -> W-MSA -> residual -> MLP.
  Tensor n = layer_norm(x, b0.norm1.gamma, b0.norm1.beta);
  Tensor f = permute(reshape(n, {H, W, D}), {2, 0, 1});
  f = mul(f, channel_attention_map(f, *b0.cam));
  Tensor grid = permute(f, {1, 2, 0});
  Tensor a = window_reverse(window_msa(window_partition(grid, win), b0, std::nullopt, heads), H, W);
  Tensor z = add(x, reshape(a, {H * W, D}));
  Tensor m = linear(gelu(linear(layer_norm(z, b0.norm2.gamma, b0.norm2.beta), b0.fc1.w, b0.fc1.b)), b0.fc2.w,
                    b0.fc2.b);
  Tensor y = add(z, m);

  // Block 2: norm -> spatial attention -> shifted W-MSA -> residual -> MLP.
  n = layer_norm(y, b1.norm1.gamma, b1.norm1.beta);
  f = permute(reshape(n, {H, W, D}), {2, 0, 1});
  f = mul(f, spatial_attention_map(f, *b1.sam));
  a = shifted_attention(permute(f, {1, 2, 0}), b1, win, 1, heads);
  z = add(y, reshape(a, {H * W, D}));
  m = linear(gelu(linear(layer_norm(z, b1.norm2.gamma, b1.norm2.beta), b1.fc1.w, b1.fc1.b)), b1.fc2.w, b1.fc2.b);
  Tensor expect = add(z, m);
  for (std::size_t i = 0; i < expect.numel(); ++i) EXPECT_EQ(got[i], expect[i]);
}

TEST(SwinBlock, PaddedGridMatchesExplicitPadding) {
  // A 3x3 grid with window 2 is padded to 4x4 and cropped back.
  Rng rng(10);
  const std::size_t D = 4;
  auto b = random_block(D, 1, 2, 8, rng);
  Tensor x = random_tensor({9, D}, rng);
  BlockGeometry g{3, 3, 2, 0, 1, true};
  Tensor y = swin_block_forward(x, b, g);
  ASSERT_EQ(y.shape(), (Shape{9, D}));
  Tensor n = resize_hw(reshape(layer_norm(x, b.norm1.gamma, b.norm1.beta), {3, 3, D}), 4, 4);
  Tensor a = window_reverse(window_msa(window_partition(n, 2), b, std::nullopt, 1), 4, 4);
  Tensor z = add(x, reshape(resize_hw(a, 3, 3), {9, D}));
  Tensor expect = add(z, linear(gelu(linear(layer_norm(z, b.norm2.gamma, b.norm2.beta), b.fc1.w, b.fc1.b)),
                                b.fc2.w, b.fc2.b));
  for (std::size_t i = 0; i < expect.numel(); ++i) EXPECT_EQ(y[i], expect[i]);
}

TEST(SwinBlock, ShapeMismatch) {
  Rng rng(11);
  auto b = random_block(4, 1, 2, 8, rng);
  EXPECT_THROW(swin_block_forward(Tensor::zeros({15, 4}), b, BlockGeometry{4, 4, 2, 0, 1, true}), ShapeMismatch);
}

TEST(SwinBlock, PairGradientCheck) {
  Rng rng(12);
  const std::size_t D = 8, heads = 2;
  auto b0 = random_block(D, heads, 2, 16, rng, true), b1 = random_block(D, heads, 2, 16, rng, true);
  b0.cam = make_channel_attention(D, 2, rng);
  b1.sam = make_spatial_attention(rng);
  Tensor x = random_tensor({16, D}, rng, -1, 1, true);
  std::vector<Tensor> leaves{x};
  for (auto* b : {&b0, &b1})
    for (auto& t : block_leaves(*b)) leaves.push_back(t);
  SwinConfig cfg;
  auto f = [&] {
    return weighted_sum(swin_block_pair_forward(x, 4, 4, b0, b1, cfg, heads, CbamPlacement::BlockLevel));
  };
  auto r = grad_check(f, leaves, 1e-5);
  EXPECT_LT(r.max_rel_err, 1e-4) << "leaf " << r.worst_leaf << " coord " << r.worst_coord;
  check_qkv_bias(f, *b0.qkv.b, 1e-4);
  check_qkv_bias(f, *b1.qkv.b, 1e-4);
}

TEST(SwinBlock, AttentionAssignment) {
  EXPECT_EQ(block_attention(CbamPlacement::BlockLevel, 0), BlockAttention::Channel);
  EXPECT_EQ(block_attention(CbamPlacement::BlockLevel, 1), BlockAttention::Spatial);
  EXPECT_EQ(block_attention(CbamPlacement::BlockLevel, 4), BlockAttention::Channel);
  EXPECT_EQ(block_attention(CbamPlacement::BlockLevel, 5), BlockAttention::Spatial);
  EXPECT_EQ(block_attention(CbamPlacement::StageLevel, 0), BlockAttention::None);
}

// ---------------------------------------------------------------------------
// Stem and merging

TEST(PatchPartition, SingleChannelPatchProjects) {
  Rng rng(13);
  Tensor img = random_tensor({1, 4, 4}, rng);
  Tensor proj = random_tensor({3, 16}, rng);
  Tensor tok = linear(patch_partition(img, 4), proj);
  ASSERT_EQ(tok.shape(), (Shape{1, 1, 3}));
  for (std::size_t o = 0; o < 3; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < 16; ++i) s += proj[o * 16 + i] * img[i];
    EXPECT_NEAR(tok[o], s, 1e-15);
  }
}

TEST(PatchPartition, ChannelThenRowThenColumn) {
  std::vector<double> v(3 * 8 * 8);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  Tensor t = patch_partition(Tensor({3, 8, 8}, v), 4);
  ASSERT_EQ(t.shape(), (Shape{2, 2, 48}));
  // token (1,0), channel 2, patch row 3, patch col 1
  EXPECT_EQ(t[(1 * 2 + 0) * 48 + 2 * 16 + 3 * 4 + 1], static_cast<double>((2 * 8 + 4 + 3) * 8 + 1));
}

TEST(PatchPartition, EmbedCountsAndBias) {
  SwinConfig cfg;
  cfg.input_size = {8, 8};
  Rng rng(14);
  auto embed = make_linear(48, cfg.embed_dim, true, rng);
  for (auto& b : embed.b->leaf_data()) b = rng.uniform(-1, 1);
  Tensor tok = patch_partition_embed(Tensor::zeros({3, 8, 8}), cfg, embed);
  ASSERT_EQ(tok.shape(), (Shape{4, cfg.embed_dim}));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t d = 0; d < cfg.embed_dim; ++d) EXPECT_EQ(tok[t * cfg.embed_dim + d], (*embed.b)[d]);
  EXPECT_THROW(patch_partition_embed(Tensor::zeros({3, 10, 8}), cfg, embed), IndivisibleInput);
  EXPECT_THROW(patch_partition_embed(Tensor::zeros({1, 8, 8}), cfg, embed), ShapeMismatch);
}

TEST(PatchMerging, ShapeLaw) {
  Rng rng(15);
  for (std::size_t H : {2, 4, 6, 8})
    for (std::size_t W : {2, 4, 8})
      for (std::size_t D : {1, 3}) {
        PatchMergingParams p{make_layer_norm(4 * D), make_linear(4 * D, 2 * D, false, rng)};
        Tensor y = patch_merging(random_tensor({H, W, D}, rng), p);
        EXPECT_EQ(y.shape(), (Shape{H / 2, W / 2, 2 * D}));
      }
}

TEST(PatchMerging, HandOracle) {
  // 2x2x1 input: a b / c d -> concat order (0,0),(1,0),(0,1),(1,1) = a c b d.
  const double a = 1.0, b = 2.0, c = 4.0, d = -3.0;
  Tensor proj({2, 4}, {1, 0, 0, 0, 0.5, -1, 2, 0.25});
  PatchMergingParams p{make_layer_norm(4), {proj, std::nullopt}};
  Tensor y = patch_merging(Tensor({2, 2, 1}, {a, b, c, d}), p);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2}));
  const double cat[4] = {a, c, b, d};
  const double mu = (a + b + c + d) / 4.0;
  double var = 0.0;
  for (double v : cat) var += (v - mu) * (v - mu) / 4.0;
  double n[4];
  for (int i = 0; i < 4; ++i) n[i] = (cat[i] - mu) / std::sqrt(var + 1e-5);
  for (std::size_t o = 0; o < 2; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) s += proj[o * 4 + i] * n[i];
    EXPECT_NEAR(y[o], s, 1e-15);
  }
}

TEST(PatchMerging, OddExtentRejected) {
  Rng rng(16);
  PatchMergingParams p{make_layer_norm(4), make_linear(4, 2, false, rng)};
  EXPECT_EQ(patch_merging(Tensor::zeros({6, 6, 1}), p).shape(), (Shape{3, 3, 2}));
  EXPECT_THROW(patch_merging(Tensor::zeros({3, 4, 1}), p), IndivisibleInput);
  EXPECT_THROW(patch_merging(Tensor::zeros({4, 5, 1}), p), IndivisibleInput);
}

// ---------------------------------------------------------------------------
// Backbone

namespace {

SwinConfig small_config(CbamPlacement placement, std::array<std::size_t, 4> depths = {2, 2, 2, 2}) {
  SwinConfig c;
  c.embed_dim = 8;
  c.depths = depths;
  c.num_heads = {1, 2, 2, 4};
  c.mlp_ratio = 2.0;
  c.placement = placement;
  c.seed = 5;
  return c;
}

Tensor random_image(const SwinConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor({3, cfg.input_size[0], cfg.input_size[1]}, rng, 0, 1);
}

}  // namespace

TEST(Backbone, ConfigValidation) {
  auto c = SwinConfig::nano();
  EXPECT_NO_THROW(c.validate());
  c.num_heads = {3, 2, 4, 8};
  EXPECT_THROW(c.validate(), InvalidParam);
  c = SwinConfig::nano();
  c.input_size = {30, 32};
  EXPECT_THROW(c.validate(), IndivisibleInput);
  c.input_size = {48, 32};  // 12 -> 6 -> 3 -> cannot merge
  EXPECT_THROW(c.validate(), IndivisibleInput);
}

TEST(Backbone, NanoShapeTraceEveryPlacement) {
  for (auto pl : {CbamPlacement::None, CbamPlacement::ModelLevel, CbamPlacement::StageLevel, CbamPlacement::BlockLevel}) {
    auto cfg = SwinConfig::nano();
    cfg.placement = pl;
    auto params = init_backbone(cfg);
    auto out = backbone_forward(random_image(cfg, 1), cfg, params);
    const std::size_t ext[4] = {8, 4, 2, 1};
    for (std::size_t s = 0; s < 4; ++s) {
      EXPECT_EQ(out[s].shape(), (Shape{16u << s, ext[s], ext[s]})) << to_string(pl) << " stage " << s;
      EXPECT_TRUE(all_finite(out[s]));
    }
  }
}

TEST(Backbone, TinyShapeTrace) {
  auto cfg = SwinConfig::tiny();
  auto params = init_backbone(cfg);
  auto out = backbone_forward(random_image(cfg, 2), cfg, params);
  const std::size_t ext[4] = {56, 28, 14, 7}, dims[4] = {96, 192, 384, 768};
  for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(out[s].shape(), (Shape{dims[s], ext[s], ext[s]}));
}

TEST(Backbone, CbamCountsMatchRuntimeCounter) {
  const std::array<std::size_t, 4> depths{2, 2, 6, 2};
  const std::pair<CbamPlacement, std::size_t> expect[] = {{CbamPlacement::None, 0},
                                                          {CbamPlacement::ModelLevel, 1},
                                                          {CbamPlacement::StageLevel, 4},
                                                          {CbamPlacement::BlockLevel, 12}};
  for (auto [pl, n] : expect) {
    auto cfg = small_config(pl, depths);
    EXPECT_EQ(count_cbam_invocations(cfg), n);
    auto params = init_backbone(cfg);
    const std::size_t before = cbam_refine_counter();
    backbone_forward(random_image(cfg, 3), cfg, params);
    EXPECT_EQ(cbam_refine_counter() - before, n) << to_string(pl);
  }
}

TEST(Backbone, DeterministicForSeed) {
  auto cfg = small_config(CbamPlacement::None);
  auto img = random_image(cfg, 4);
  auto p1 = init_backbone(cfg), p2 = init_backbone(cfg);
  auto o1 = backbone_forward(img, cfg, p1), o2 = backbone_forward(img, cfg, p2);
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t i = 0; i < o1[s].numel(); ++i) ASSERT_EQ(o1[s][i], o2[s][i]);
  cfg.seed = 6;
  auto p3 = init_backbone(cfg);
  EXPECT_NE(backbone_forward(img, cfg, p3)[0][0], o1[0][0]);
}

TEST(Backbone, BlockLevelOddDepthFollowsParity) {
  auto cfg = small_config(CbamPlacement::BlockLevel, {3, 1, 2, 1});
  auto params = init_backbone(cfg);
  EXPECT_TRUE(params.stages[0].blocks[2].cam.has_value());
  EXPECT_FALSE(params.stages[0].blocks[2].sam.has_value());
  EXPECT_TRUE(params.stages[0].blocks[1].sam.has_value());
  const std::size_t before = cbam_refine_counter();
  backbone_forward(random_image(cfg, 5), cfg, params);
  EXPECT_EQ(cbam_refine_counter() - before, 7u);
}

TEST(Backbone, ParameterNamesUnique) {
  auto cfg = small_config(CbamPlacement::BlockLevel);
  auto params = init_backbone(cfg);
  std::set<std::string> names;
  std::size_t n = 0;
  params.visit([&](const std::string& name, Tensor&) {
    names.insert(name);
    ++n;
  });
  EXPECT_EQ(names.size(), n);
}

// End-to-end gradient through a small backbone. Stage 0 keeps three channels:
// a two-channel layer norm is nearly constant and its gradient sits at roundoff.
TEST(Backbone, EndToEndGradientCheck) {
  for (auto pl : {CbamPlacement::None, CbamPlacement::ModelLevel, CbamPlacement::StageLevel, CbamPlacement::BlockLevel}) {
    SwinConfig cfg;
    cfg.embed_dim = 3;
    cfg.depths = {2, 2, 1, 1};
    cfg.num_heads = {1, 2, 2, 3};
    cfg.mlp_ratio = 0.5;
    cfg.cbam_reduction = 2;
    cfg.input_size = {16, 16};
    cfg.patch_size = 2;
    cfg.placement = pl;
    cfg.seed = 17;
    auto params = init_backbone(cfg);
    ASSERT_LE(params.parameter_count(), 10000u);
    // Larger random weights than the default init keep the gradients well above roundoff.
    Rng rng(18);
    std::vector<Tensor> leaves, qkv_biases;
    params.visit([&](const std::string& name, Tensor& t) {
      if (name.find("gamma") == std::string::npos) {
        for (auto& v : t.leaf_data()) v = rng.uniform(-0.5, 0.5);
      }
      (name.ends_with("qkv.b") ? qkv_biases : leaves).push_back(t);
    });
    Tensor img = random_image(cfg, 19);
    auto f = [&] {
      auto out = backbone_forward(img, cfg, params);
      Tensor loss = weighted_sum(out[0], 1);
      for (std::size_t s = 1; s < 4; ++s) loss = add(loss, weighted_sum(out[s], s + 1));
      return loss;
    };
    auto r = grad_check(f, leaves, 1e-5, 6, 20);
    EXPECT_LT(r.max_rel_err, 1e-3) << to_string(pl) << " worst leaf " << r.worst_leaf << " coord " << r.worst_coord
                                   << " a=" << r.worst_analytic << " n=" << r.worst_numeric << " loss=" << f().item();
    for (auto& b : qkv_biases) check_qkv_bias(f, b, 1e-3);
  }
}
