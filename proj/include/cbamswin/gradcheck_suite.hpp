#pragma once

// Finite-difference checks of every differentiable operation, the composed
// attention block and a full block pair at nano size. Shared by the CLI and
// the acceptance runner.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "cbamswin/gradcheck.hpp"
#include "cbamswin/head.hpp"
#include "cbamswin/swin.hpp"

namespace cbamswin {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kGradEps = 1e-5;

struct GradCase {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t coords = 0;
  bool passed = false;
  std::size_t worst_leaf = 0, worst_coord = 0;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

struct GradSuiteResult {
  std::vector<GradCase> cases;
  double seconds = 0.0;
  bool passed() const {
    for (const auto& c : cases)
      if (!c.passed) return false;
    return !cases.empty();
  }
  double worst() const {
    double w = 0;
    for (const auto& c : cases) w = std::max(w, c.max_rel_err);
    return w;
  }
};

namespace detail {

struct GradSuite {
  Rng rng;
  GradSuiteResult res;

  explicit GradSuite(std::uint64_t seed) : rng(seed) {}

  Tensor leaf(const Shape& s, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(s, std::move(v), true);
  }

  // Values bounded away from zero so kinks (relu, smooth-L1) sit outside the stencil.
  Tensor leaf_off_zero(const Shape& s, double gap = 0.1) {
    Tensor t = leaf(s);
    for (auto& x : t.leaf_data()) x = x < 0 ? x - gap : x + gap;
    return t;
  }

  // Fixed pseudo-random projection to a scalar so no gradient is trivially uniform.
  static Tensor project(const Tensor& t) {
    std::vector<double> w(t.numel());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.731 * static_cast<double>(i) + 0.3) + 0.2;
    return sum(mul(t, Tensor(t.shape(), std::move(w))));
  }

  void check(const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> leaves) {
    const auto r = grad_check(f, std::move(leaves), kGradEps);
    res.cases.push_back({name, r.max_rel_err, r.coords_checked, r.max_rel_err < kGradTolerance, r.worst_leaf,
                         r.worst_coord, r.worst_analytic, r.worst_numeric});
  }

  void check_map(const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> leaves) {
    check(name, [&f] { return project(f()); }, std::move(leaves));
  }

  // The key slice of a qkv bias only shifts whole softmax rows, so its gradient
  // is identically zero; query and value slices are checked by differences.
  void check_qkv_bias(const std::string& name, const std::function<Tensor()>& f, Tensor bias) {
    const std::size_t D = bias.numel() / 3;
    backward(f());
    const std::vector<double> analytic(bias.grad().begin(), bias.grad().end());
    GradCase c{name, 0.0, 0, true};
    auto& data = bias.leaf_data();
    for (std::size_t i = 0; i < bias.numel(); ++i) {
      ++c.coords;
      if (i >= D && i < 2 * D) {
        if (std::abs(analytic[i]) > 1e-12) c.max_rel_err = std::max(c.max_rel_err, 1.0);
        continue;
      }
      const double saved = data[i];
      data[i] = saved + kGradEps;
      const double up = f().item();
      data[i] = saved - kGradEps;
      const double down = f().item();
      data[i] = saved;
      c.max_rel_err = std::max(c.max_rel_err, rel_err(analytic[i], (up - down) / (2 * kGradEps)));
    }
    c.passed = c.max_rel_err < kGradTolerance;
    res.cases.push_back(c);
  }

  void elementwise() {
    Tensor a = leaf({3, 4}), b = leaf({3, 4}), row = leaf({1, 4}), col = leaf({3, 1});
    check_map("add", [&] { return add(a, b); }, {a, b});
    check_map("add_broadcast", [&] { return add(a, row); }, {a, row});
    check_map("sub", [&] { return sub(a, col); }, {a, col});
    check_map("mul", [&] { return mul(a, b); }, {a, b});
    check_map("mul_broadcast", [&] { return mul(col, row); }, {col, row});
    check_map("scale", [&] { return scale(a, -1.7); }, {a});
    check_map("add_scalar", [&] { return add_scalar(a, 0.4); }, {a});
    check_map("square", [&] { return square(a); }, {a});
    Tensor k = leaf_off_zero({3, 4});
    check_map("relu", [&] { return relu(k); }, {k});
    check_map("sigmoid", [&] { return sigmoid(a); }, {a});
    check_map("exp", [&] { return exp(a); }, {a});
    check_map("gelu", [&] { return gelu(scale(a, 3.0)); }, {a});
    check("sum", [&] { return sum(square(a)); }, {a});
    check("mean", [&] { return mean(square(a)); }, {a});
  }

  void layout() {
    Tensor x = leaf({2, 3, 4});
    check_map("gather", [&] { return gather(x, {5}, {0, 7, -1, 7, 23}); }, {x});
    check_map("reshape", [&] { return reshape(x, {6, 4}); }, {x});
    check_map("permute", [&] { return permute(x, {2, 0, 1}); }, {x});
    check_map("slice", [&] { return slice(x, 1, 1, 2); }, {x});
    Tensor y = leaf({2, 2, 4});
    check_map("concat", [&] { return concat({x, y}, 1); }, {x, y});
    check_map("transpose_last", [&] { return transpose_last(x); }, {x});
  }

  void linear_algebra() {
    Tensor a = leaf({2, 3, 4}), b = leaf({2, 4, 5}), m = leaf({4, 2});
    check_map("matmul_batched", [&] { return matmul(a, b); }, {a, b});
    check_map("matmul_broadcast", [&] { return matmul(a, m); }, {a, m});
    Tensor x = leaf({5, 4}), w = leaf({3, 4}), bias = leaf({3});
    check_map("linear", [&] { return linear(x, w, bias); }, {x, w, bias});
    Tensor img = leaf({2, 6, 5}), kernel = leaf({3, 2, 3, 3});
    check_map("conv2d", [&] { return conv2d(img, kernel, 1, 1); }, {img, kernel});
    check_map("conv2d_strided", [&] { return conv2d(img, kernel, 2, 0); }, {img, kernel});
  }

  void normalization_and_losses() {
    Tensor x = leaf({3, 4, 5}, -2, 2);
    check_map("softmax_last", [&] { return softmax(x, 2); }, {x});
    check_map("softmax_middle", [&] { return softmax(x, 1); }, {x});
    Tensor t = leaf({4, 6}, -2, 2), g = leaf({6}, 0.5, 1.5), b = leaf({6});
    check_map("layer_norm", [&] { return layer_norm(t, g, b); }, {t, g, b});
    Tensor f = leaf({3, 4, 5});
    check_map("pool_spatial_avg", [&] { return pool_spatial(f, PoolMode::Avg); }, {f});
    check_map("pool_spatial_max", [&] { return pool_spatial(f, PoolMode::Max); }, {f});
    check_map("pool_channel_avg", [&] { return pool_channel(f, PoolMode::Avg); }, {f});
    check_map("pool_channel_max", [&] { return pool_channel(f, PoolMode::Max); }, {f});
    Tensor logits = leaf({4, 3}, -2, 2);
    check("cross_entropy", [&] { return cross_entropy(logits, {0, 2, 1, 2}); }, {logits});
    Tensor z = leaf({6}, -3, 3);
    check("bce_with_logits", [&] { return bce_with_logits(z, {1, 0, 0, 1, 1, 0}); }, {z});
    Tensor p = leaf_off_zero({6}, 0.05);
    // targets keep |p - t| away from the beta=1 joint
    const std::vector<double> tgt{0.0, 2.6, -0.3, 1.9, -2.5, 0.1};
    check("smooth_l1", [&] { return smooth_l1(p, tgt, 1.0); }, {p});
  }

  void swin_pieces() {
    Tensor grid = leaf({4, 4, 3});
    check_map("roll_hw", [&] { return roll_hw(grid, 1, -1); }, {grid});
    check_map("resize_hw_pad", [&] { return resize_hw(grid, 6, 5); }, {grid});
    check_map("window_partition", [&] { return window_partition(grid, 2); }, {grid});
    Tensor win = leaf({4, 4, 3});
    check_map("window_reverse", [&] { return window_reverse(win, 4, 4); }, {win});
    Tensor table = leaf({9, 2});
    check_map("relative_bias", [&] { return relative_bias(table, 2, 2); }, {table});
    Tensor image = leaf({3, 8, 8});
    check_map("patch_partition", [&] { return patch_partition(image, 4); }, {image});
    PatchMergingParams pm{{leaf({12}, 0.5, 1.5), leaf({12})}, {leaf({6, 12}), std::nullopt}};
    check_map("patch_merging", [&] { return patch_merging(grid, pm); }, {grid, pm.norm.gamma, pm.norm.beta, pm.reduction.w});
  }

  void attention() {
    const std::size_t C = 8;
    Tensor f = leaf({C, 5, 6});
    ChannelAttentionParams cam{leaf({C / 2, C}), leaf({C, C / 2}), 2};
    SpatialAttentionParams sam{leaf({1, 2, kSpatialKernel, kSpatialKernel}, -0.5, 0.5)};
    check_map("channel_attention", [&] { return channel_attention_map(f, cam); }, {f, cam.w0, cam.w1});
    check_map("spatial_attention", [&] { return spatial_attention_map(f, sam); }, {f, sam.kernel});
    Tensor mc = leaf({C, 1, 1}, 0.1, 0.9), ms = leaf({1, 5, 6}, 0.1, 0.9);
    check_map("refine", [&] { return refine(f, {mc, ms}, RefineMode::Both); }, {f, mc, ms});
    check_map("cbam_block", [&] { return cbam_forward(f, cam, sam); }, {f, cam.w0, cam.w1, sam.kernel});
  }

  // Nano first-stage geometry: 8x8 tokens of width 16, window 2, shift 1, with
  // block-level attention so both attention sub-modules sit in the pair.
  void block_pair() {
    SwinConfig cfg = SwinConfig::nano();
    cfg.placement = CbamPlacement::BlockLevel;
    const std::size_t D = cfg.embed_dim, heads = cfg.num_heads[0];
    const std::size_t H = cfg.stage_height(0), W = cfg.stage_width(0);
    Rng init(rng.below(UINT64_MAX));
    BlockParams b0 = make_block(D, heads, cfg.window_size, cfg.hidden_dim(0), init);
    BlockParams b1 = make_block(D, heads, cfg.window_size, cfg.hidden_dim(0), init);
    b0.cam = make_channel_attention(D, effective_reduction(D, cfg.cbam_reduction), init);
    b1.sam = make_spatial_attention(init);
    // Default linear init is near zero; larger weights keep gradients well above
    // roundoff. The attention modules keep their fan-in scaled init, since larger
    // weights saturate their sigmoids.
    std::vector<Tensor> leaves, biases;
    for (auto* b : {&b0, &b1}) {
      b->visit("", [&](const std::string& name, Tensor& t) {
        const bool rescale = name.find("gamma") == std::string::npos && !name.starts_with("cam.") &&
                             !name.starts_with("sam.");
        if (rescale)
          for (auto& v : t.leaf_data()) v = rng.uniform(-0.5, 0.5);
        t.set_requires_grad(true);
        (name == "qkv.b" ? biases : leaves).push_back(t);
      });
    }
    Tensor x = leaf({H * W, D});
    leaves.insert(leaves.begin(), x);
    auto f = [&] { return project(swin_block_pair_forward(x, H, W, b0, b1, cfg, heads, cfg.placement)); };
    check("swin_block_pair_nano", f, leaves);
    check_qkv_bias("swin_block_pair_nano_qkv_bias_0", f, biases[0]);
    check_qkv_bias("swin_block_pair_nano_qkv_bias_1", f, biases[1]);
  }

  void heads() {
    const std::size_t D = 8, K = 3;
    Tensor f = leaf({D, 2, 2});
    // Two positive cells whose residuals sit in the linear part of smooth-L1 with
    // opposite signs cancel exactly in a bias coordinate, leaving only roundoff
    // to compare; small output weights and these boxes avoid that.
    HeadParams loc{HeadTask::Localization, K, {leaf({D}, 0.5, 1.5), leaf({D})},
                   {leaf({kBoxFields + K, D}, -0.1, 0.1), leaf({kBoxFields + K}, -0.1, 0.1)}};
    const std::vector<Category> cats{{1, "a"}, {2, "b"}, {3, "c"}};
    const auto targets = assign_cells({{{2, 2, 8, 8}, 3}, {{10, 9, 7, 9}, 1}}, cats, 2, 2, 8.0);
    check("localization_loss", [&] { return localization_loss(localization_outputs(f, loc), targets, K); },
          {f, loc.norm.gamma, loc.norm.beta, loc.out.w, *loc.out.b});
    HeadParams cls{HeadTask::Classification, K, {leaf({D}, 0.5, 1.5), leaf({D})}, {leaf({K, D}), leaf({K})}};
    check("classification_head", [&] { return cross_entropy(classification_logits(f, cls), {1}); },
          {f, cls.norm.gamma, cls.norm.beta, cls.out.w, *cls.out.b});
  }
};

}  // namespace detail

/// Runs every check; deterministic for a given seed.
inline GradSuiteResult run_gradient_suite(std::uint64_t seed = 20240611) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::GradSuite s(seed);
  s.elementwise();
  s.layout();
  s.linear_algebra();
  s.normalization_and_losses();
  s.swin_pieces();
  s.attention();
  s.block_pair();
  s.heads();
  s.res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s.res;
}

}  // namespace cbamswin
