#pragma once

// Task heads on top of the backbone.
//
// Classification: LayerNorm over the last-stage tokens, global average pool,
// linear -> class logits.
//
// Localization: LayerNorm over the third-stage tokens, then a 1x1 projection
// giving per cell [objectness, tx, ty, tw, th, class logits...]. A cell of
// stride s predicts a box centred at ((i + tx) s, (j + ty) s) with size
// (s e^tw, s e^th). Each ground-truth box is owned by the cell containing its
// centre; when several share a cell the larger box wins.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cbamswin/metrics.hpp"
#include "cbamswin/swin.hpp"

namespace cbamswin {

enum class HeadTask { Classification, Localization };

inline std::string to_string(HeadTask t) { return t == HeadTask::Classification ? "classification" : "localization"; }

inline HeadTask head_task_from_string(const std::string& s) {
  if (s == "classification") return HeadTask::Classification;
  if (s == "localization") return HeadTask::Localization;
  throw InvalidParam("unknown task '" + s + "' (expected classification|localization)");
}

inline constexpr std::size_t kLocalizationStage = 2;
inline constexpr std::size_t kBoxFields = 5;  // objectness + 4 offsets
inline constexpr double kMaxLogSize = 4.0;    // decode clamp on tw, th

struct HeadParams {
  HeadTask task = HeadTask::Classification;
  std::size_t num_classes = 0;
  LayerNormParams norm;
  LinearParams out;  // [num_classes, D] or [5 + num_classes, D]

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + "norm.", f);
    out.visit(prefix + "out.", f);
  }
};

inline std::size_t head_stage(HeadTask task) {
  return task == HeadTask::Classification ? kNumStages - 1 : kLocalizationStage;
}

inline HeadParams init_head(const SwinConfig& cfg, HeadTask task, std::size_t num_classes, Rng& rng) {
  if (num_classes == 0) throw InvalidParam("head needs at least one class");
  const std::size_t D = cfg.stage_dim(head_stage(task));
  const std::size_t outputs = task == HeadTask::Classification ? num_classes : kBoxFields + num_classes;
  return {task, num_classes, make_layer_norm(D), make_linear(D, outputs, true, rng)};
}

/// Class logits [1, K] from a [D, h, w] feature map.
inline Tensor classification_logits(const Tensor& features, const HeadParams& p) {
  if (features.rank() != 3 || features.shape()[0] != p.norm.gamma.numel()) {
    throw ShapeMismatch("classification head expects [" + std::to_string(p.norm.gamma.numel()) + ",h,w], got " +
                        shape_str(features.shape()));
  }
  const std::size_t D = features.shape()[0], n = features.shape()[1] * features.shape()[2];
  Tensor tokens = apply(p.norm, reshape(chw_to_tokens(features), {n, D}));
  Tensor pooled = reshape(pool_channel(reshape(tokens, {n, D, 1}), PoolMode::Avg), {1, D});
  return apply(p.out, pooled);
}

/// Per-cell predictions [h*w, 5 + K] from a [D, h, w] feature map.
inline Tensor localization_outputs(const Tensor& features, const HeadParams& p) {
  if (features.rank() != 3 || features.shape()[0] != p.norm.gamma.numel()) {
    throw ShapeMismatch("localization head expects [" + std::to_string(p.norm.gamma.numel()) + ",h,w], got " +
                        shape_str(features.shape()));
  }
  const std::size_t D = features.shape()[0], n = features.shape()[1] * features.shape()[2];
  return apply(p.out, apply(p.norm, reshape(chw_to_tokens(features), {n, D})));
}

inline Tensor head_forward(const std::array<Tensor, kNumStages>& features, const HeadParams& p) {
  const Tensor& f = features[head_stage(p.task)];
  return p.task == HeadTask::Classification ? classification_logits(f, p) : localization_outputs(f, p);
}

// ---------------------------------------------------------------------------
// Localization targets, loss and decoding

struct CellTargets {
  std::vector<double> objectness;                   // per cell, 0/1
  std::vector<std::size_t> positive_cells;
  std::vector<std::array<double, 4>> offsets;       // per positive cell
  std::vector<std::size_t> classes;                 // per positive cell
};

inline CellTargets assign_cells(const std::vector<Instance>& instances, const std::vector<Category>& categories,
                                std::size_t grid_w, std::size_t grid_h, double stride) {
  CellTargets t;
  t.objectness.assign(grid_w * grid_h, 0.0);
  std::vector<long> owner(grid_w * grid_h, -1);
  for (std::size_t k = 0; k < instances.size(); ++k) {
    const auto& b = instances[k].box;
    const double cx = b.x + b.w / 2, cy = b.y + b.h / 2;
    const auto i = std::min(grid_w - 1, static_cast<std::size_t>(std::max(0.0, cx / stride)));
    const auto j = std::min(grid_h - 1, static_cast<std::size_t>(std::max(0.0, cy / stride)));
    long& o = owner[j * grid_w + i];
    if (o < 0 || instances[static_cast<std::size_t>(o)].box.area() < b.area()) o = static_cast<long>(k);
  }
  for (std::size_t cell = 0; cell < owner.size(); ++cell) {
    if (owner[cell] < 0) continue;
    const auto& inst = instances[static_cast<std::size_t>(owner[cell])];
    const auto& b = inst.box;
    const double i = static_cast<double>(cell % grid_w), j = static_cast<double>(cell / grid_w);
    std::size_t cls = categories.size();
    for (std::size_t c = 0; c < categories.size(); ++c)
      if (categories[c].id == inst.category_id) cls = c;
    if (cls == categories.size()) throw DanglingReference("instance with unknown category");
    t.objectness[cell] = 1.0;
    t.positive_cells.push_back(cell);
    t.offsets.push_back({(b.x + b.w / 2) / stride - i, (b.y + b.h / 2) / stride - j,
                         std::log(std::max(b.w, 1e-3) / stride), std::log(std::max(b.h, 1e-3) / stride)});
    t.classes.push_back(cls);
  }
  return t;
}

/// Mean objectness BCE over cells, plus smooth-L1 offsets and class CE averaged over positive cells.
inline Tensor localization_loss(const Tensor& outputs, const CellTargets& t, std::size_t num_classes) {
  const std::size_t cells = outputs.shape()[0];
  Tensor obj = slice(outputs, 1, 0, 1);
  Tensor loss = scale(bce_with_logits(obj, t.objectness), 1.0 / static_cast<double>(cells));
  if (t.positive_cells.empty()) return loss;
  std::vector<std::ptrdiff_t> rows;
  for (auto c : t.positive_cells) rows.push_back(static_cast<std::ptrdiff_t>(c));
  const std::size_t P = rows.size(), F = outputs.shape()[1];
  std::vector<std::ptrdiff_t> index;
  for (auto r : rows)
    for (std::size_t f = 0; f < F; ++f) index.push_back(r * static_cast<std::ptrdiff_t>(F) + static_cast<std::ptrdiff_t>(f));
  Tensor pos = gather(outputs, {P, F}, std::move(index));
  std::vector<double> box_targets;
  for (const auto& o : t.offsets) box_targets.insert(box_targets.end(), o.begin(), o.end());
  Tensor box_loss = scale(smooth_l1(slice(pos, 1, 1, 4), box_targets, 1.0), 1.0 / static_cast<double>(P));
  Tensor cls_loss = cross_entropy(slice(pos, 1, kBoxFields, num_classes), t.classes);
  return add(add(loss, box_loss), cls_loss);
}

/// Detections for every cell, scored by sigmoid(objectness) times the top class probability.
inline std::vector<Detection> decode_detections(const Tensor& outputs, std::size_t grid_w, std::size_t grid_h,
                                                double stride, const std::vector<Category>& categories,
                                                std::int64_t image_id, std::size_t image_w, std::size_t image_h) {
  const std::size_t F = outputs.shape()[1], K = F - kBoxFields;
  if (outputs.shape()[0] != grid_w * grid_h || K != categories.size()) {
    throw ShapeMismatch("localization outputs do not match the grid or category table");
  }
  const auto v = outputs.data();
  const double W = static_cast<double>(image_w), H = static_cast<double>(image_h);
  std::vector<Detection> dets;
  for (std::size_t cell = 0; cell < grid_w * grid_h; ++cell) {
    const double* o = &v[cell * F];
    std::size_t best = 0;
    double mx = o[kBoxFields], z = 0.0;
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, o[kBoxFields + k]);
    for (std::size_t k = 0; k < K; ++k) {
      z += std::exp(o[kBoxFields + k] - mx);
      if (o[kBoxFields + k] > o[kBoxFields + best]) best = k;
    }
    const double p_cls = std::exp(o[kBoxFields + best] - mx) / z;
    const double i = static_cast<double>(cell % grid_w), j = static_cast<double>(cell / grid_w);
    const double cx = (i + std::clamp(o[1], -0.5, 1.5)) * stride, cy = (j + std::clamp(o[2], -0.5, 1.5)) * stride;
    const double w = stride * std::exp(std::clamp(o[3], -kMaxLogSize, kMaxLogSize));
    const double h = stride * std::exp(std::clamp(o[4], -kMaxLogSize, kMaxLogSize));
    const double x0 = std::clamp(cx - w / 2, 0.0, W), x1 = std::clamp(cx + w / 2, 0.0, W);
    const double y0 = std::clamp(cy - h / 2, 0.0, H), y1 = std::clamp(cy + h / 2, 0.0, H);
    dets.push_back({image_id, {x0, y0, x1 - x0, y1 - y0}, categories[best].id, sigmoid_scalar(o[0]) * p_cls});
  }
  return dets;
}

}  // namespace cbamswin
