#pragma once

// Detection metrics: IoU, greedy matching, 101-point AP, AR@maxDets, and the
// per-category report ordered by size ratio.
//
// Conventions (COCO-style):
//   - detections are ranked by score, ties kept in input order
//   - each detection takes the unmatched same-category GT with the highest
//     IoU >= threshold (IoU ties go to the earlier GT)
//   - AP averages the interpolated precision max{p(r') : r' >= r} over
//     r = 0.00, 0.01, ..., 1.00
//   - at most max_dets top-scoring detections are kept per image
//   - AR is recall averaged over the evaluation thresholds
//   - categories with neither GT nor detections are left out of the means;
//     detections of a category without GT score AP = AR = 0

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbamswin/dataset.hpp"
#include "cbamswin/stats.hpp"

namespace cbamswin {

struct Detection {
  std::int64_t image_id = 0;
  BBox box;
  std::int64_t category_id = 0;
  double score = 0.0;
  bool operator==(const Detection&) const = default;
};

struct GroundTruth {
  std::int64_t image_id = 0;
  BBox box;
  std::int64_t category_id = 0;
};

inline double iou(const BBox& a, const BBox& b) {
  // Extents come from corner differences throughout so identical boxes give exactly 1.
  const double ax1 = a.x + a.w, ay1 = a.y + a.h, bx1 = b.x + b.w, by1 = b.y + b.h;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(a.y, b.y));
  const double inter = iw * ih;
  const double uni = (ax1 - a.x) * (ay1 - a.y) + (bx1 - b.x) * (by1 - b.y) - inter;
  return uni > 0 ? std::min(1.0, inter / uni) : 0.0;
}

/// Indices of `scores` ordered by descending score; equal scores keep input order.
inline std::vector<std::size_t> rank_by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

struct MatchResult {
  std::vector<bool> tp;           // per detection, input order
  std::vector<long> matched_gt;   // GT index or -1
  std::size_t num_tp = 0, num_fp = 0, num_fn = 0;
};

/// Greedy matching within one image.
inline MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                    double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0)) throw InvalidParam("IoU threshold must lie in (0, 1]");
  std::vector<double> scores;
  for (const auto& d : dets) scores.push_back(d.score);
  MatchResult r;
  r.tp.assign(dets.size(), false);
  r.matched_gt.assign(dets.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t di : rank_by_score(scores)) {
    long best = -1;
    double best_iou = iou_thresh;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].category_id != dets[di].category_id) continue;
      const double v = iou(dets[di].box, gts[g].box);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<long>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      r.tp[di] = true;
      r.matched_gt[di] = best;
      ++r.num_tp;
    } else {
      ++r.num_fp;
    }
  }
  r.num_fn = gts.size() - r.num_tp;
  return r;
}

inline constexpr std::size_t kRecallPoints = 101;

struct ScoredLabel {
  double score = 0.0;
  bool tp = false;
};

/// 101-point interpolated AP. Returns nullopt when there is nothing to score
/// (no GT and no detections), 0 when there are detections but no GT.
inline std::optional<double> average_precision(const std::vector<ScoredLabel>& labels, std::size_t num_gt) {
  if (num_gt == 0) return labels.empty() ? std::nullopt : std::optional<double>(0.0);
  std::vector<double> scores;
  for (const auto& l : labels) scores.push_back(l.score);
  const auto order = rank_by_score(scores);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tp += labels[order[k]].tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double sum = 0.0;
  std::size_t i = 0;
  for (std::size_t k = 0; k < kRecallPoints; ++k) {
    const double r = static_cast<double>(k) / 100.0;
    while (i < recall.size() && recall[i] < r) ++i;
    if (i == recall.size()) break;
    sum += precision[i];
  }
  return sum / static_cast<double>(kRecallPoints);
}

struct EvalParams {
  std::vector<double> iou_thresholds{0.50, 0.75};  // AP is reported at the first two
  std::size_t max_dets = 100;
};

struct CategoryMetrics {
  std::int64_t category_id = 0;
  std::string name;
  std::size_t num_gt = 0, num_dets = 0;
  std::vector<double> ap;  // per threshold
  double ar = 0.0;
  double mean_size_ratio = std::nan("");  // filled by attach_size_ratios
  double ap50() const { return ap.at(0); }
  double ap75() const { return ap.at(1); }
};

struct MetricsReport {
  double map50 = 0.0, map75 = 0.0, mar100 = 0.0;
  std::vector<double> iou_thresholds;
  std::size_t max_dets = 100;
  std::vector<CategoryMetrics> per_category;  // category-table order, scored categories only
};

/// Keeps the max_dets highest-scoring detections of each image (ties by input order).
inline std::vector<Detection> cap_per_image(const std::vector<Detection>& dets, std::size_t max_dets) {
  std::map<std::int64_t, std::vector<std::size_t>> by_image;
  for (std::size_t i = 0; i < dets.size(); ++i) by_image[dets[i].image_id].push_back(i);
  std::vector<bool> keep(dets.size(), false);
  for (auto& [id, idx] : by_image) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    for (std::size_t k = 0; k < std::min(max_dets, idx.size()); ++k) keep[idx[k]] = true;
  }
  std::vector<Detection> out;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (keep[i]) out.push_back(dets[i]);
  return out;
}

inline MetricsReport evaluate(const std::vector<Detection>& all_dets, const std::vector<GroundTruth>& gts,
                              const std::vector<Category>& categories, const EvalParams& params = {}) {
  if (params.iou_thresholds.size() < 2) throw InvalidParam("evaluation needs at least two IoU thresholds");
  if (params.max_dets == 0) throw InvalidParam("max_dets must be positive");
  auto known = [&](std::int64_t c) {
    return std::any_of(categories.begin(), categories.end(), [&](const Category& k) { return k.id == c; });
  };
  for (const auto& d : all_dets) {
    if (!known(d.category_id)) throw DanglingReference("detection has unknown category " + std::to_string(d.category_id));
    if (!(d.score >= 0.0 && d.score <= 1.0)) throw InvalidParam("detection score outside [0, 1]");
  }
  for (const auto& g : gts)
    if (!known(g.category_id)) throw DanglingReference("ground truth has unknown category " + std::to_string(g.category_id));

  const auto dets = cap_per_image(all_dets, params.max_dets);
  MetricsReport rep;
  rep.iou_thresholds = params.iou_thresholds;
  rep.max_dets = params.max_dets;
  for (const auto& cat : categories) {
    // Per-image slices of this category.
    struct Slice {
      std::vector<std::size_t> det_index;  // positions in `dets`
      std::vector<Detection> dets;
      std::vector<GroundTruth> gts;
    };
    std::map<std::int64_t, Slice> images;
    CategoryMetrics cm{cat.id, cat.name};
    for (const auto& g : gts)
      if (g.category_id == cat.id) images[g.image_id].gts.push_back(g), ++cm.num_gt;
    std::vector<std::size_t> det_rank;  // input order, used for score ties across images
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].category_id != cat.id) continue;
      auto& s = images[dets[i].image_id];
      s.det_index.push_back(i);
      s.dets.push_back(dets[i]);
      det_rank.push_back(i);
      ++cm.num_dets;
    }
    if (cm.num_gt == 0 && cm.num_dets == 0) continue;

    double recall_sum = 0.0;
    for (double thr : params.iou_thresholds) {
      std::vector<ScoredLabel> labels(dets.size());
      std::size_t tp = 0;
      for (const auto& [id, s] : images) {
        const auto m = match_detections(s.dets, s.gts, thr);
        tp += m.num_tp;
        for (std::size_t k = 0; k < s.dets.size(); ++k) labels[s.det_index[k]] = {s.dets[k].score, m.tp[k]};
      }
      std::vector<ScoredLabel> ordered;
      for (std::size_t r : det_rank) ordered.push_back(labels[r]);
      cm.ap.push_back(*average_precision(ordered, cm.num_gt));
      recall_sum += cm.num_gt ? static_cast<double>(tp) / static_cast<double>(cm.num_gt) : 0.0;
    }
    cm.ar = recall_sum / static_cast<double>(params.iou_thresholds.size());
    rep.per_category.push_back(std::move(cm));
  }
  if (!rep.per_category.empty()) {
    const double n = static_cast<double>(rep.per_category.size());
    for (const auto& c : rep.per_category) {
      rep.map50 += c.ap50();
      rep.map75 += c.ap75();
      rep.mar100 += c.ar;
    }
    rep.map50 /= n;
    rep.map75 /= n;
    rep.mar100 /= n;
  }
  return rep;
}

inline std::vector<GroundTruth> ground_truth_of(const Dataset& ds) {
  std::vector<GroundTruth> out;
  for (const auto& im : ds.images)
    for (const auto& inst : im.instances) out.push_back({im.id, inst.box, inst.category_id});
  return out;
}

inline MetricsReport evaluate(const std::vector<Detection>& dets, const Dataset& ds, const EvalParams& params = {}) {
  std::map<std::int64_t, bool> ids;
  for (const auto& im : ds.images) ids[im.id] = true;
  for (const auto& d : dets)
    if (!ids.count(d.image_id)) throw DanglingReference("detection refers to missing image " + std::to_string(d.image_id));
  return evaluate(dets, ground_truth_of(ds), ds.categories, params);
}

// ---------------------------------------------------------------------------
// Size-ordered report

/// Categories without ground truth have no size ratio and are left as NaN.
inline void attach_size_ratios(MetricsReport& rep, const std::vector<CategoryStats>& stats) {
  for (auto& c : rep.per_category) {
    if (c.num_gt == 0) continue;
    auto it = std::find_if(stats.begin(), stats.end(), [&](const CategoryStats& s) { return s.category_id == c.category_id; });
    if (it == stats.end()) throw MissingStats("no size statistics for category '" + c.name + "'");
    c.mean_size_ratio = it->mean_size_ratio;
  }
}

/// Report rows with ground truth, sorted by mean size ratio, largest first
/// (stable for equal ratios).
inline std::vector<CategoryMetrics> size_ordered_report(MetricsReport rep, const std::vector<CategoryStats>& stats) {
  attach_size_ratios(rep, stats);
  std::vector<CategoryMetrics> rows;
  for (const auto& c : rep.per_category)
    if (c.num_gt > 0) rows.push_back(c);
  std::stable_sort(rows.begin(), rows.end(),
                   [](const CategoryMetrics& a, const CategoryMetrics& b) { return a.mean_size_ratio > b.mean_size_ratio; });
  return rows;
}

/// Plot-ready CSV: category, size_ratio, then AP50 of each named variant.
/// Rows follow the size order of the first variant; categories absent from a
/// variant's report are written as empty cells.
inline void write_size_ordered_csv(const std::vector<std::pair<std::string, MetricsReport>>& variants,
                                   const std::vector<CategoryStats>& stats, std::ostream& out) {
  if (variants.empty()) throw InvalidParam("size-ordered CSV needs at least one report");
  out << "category,size_ratio";
  for (const auto& [name, rep] : variants) out << ",ap50_" << name;
  out << "\n";
  for (const auto& row : size_ordered_report(variants.front().second, stats)) {
    out << row.name << ',' << row.mean_size_ratio;
    for (const auto& [name, rep] : variants) {
      out << ',';
      for (const auto& c : rep.per_category)
        if (c.category_id == row.category_id) out << c.ap50();
    }
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const MetricsReport& rep) {
  nlohmann::json j{{"map50", rep.map50},
                   {"map75", rep.map75},
                   {"mar100", rep.mar100},
                   {"ar_iou_thresholds", rep.iou_thresholds},
                   {"max_dets", rep.max_dets}};
  j["per_category"] = nlohmann::json::array();
  for (const auto& c : rep.per_category) {
    nlohmann::json row{{"category_id", c.category_id}, {"name", c.name}, {"num_gt", c.num_gt},
                       {"num_dets", c.num_dets},       {"ap50", c.ap50()}, {"ap75", c.ap75()},
                       {"ar100", c.ar}};
    if (!std::isnan(c.mean_size_ratio)) row["mean_size_ratio"] = c.mean_size_ratio;
    j["per_category"].push_back(row);
  }
  return j;
}

inline void write_metrics_csv(const MetricsReport& rep, std::ostream& out) {
  out << "category,num_gt,ap50,ap75,ar100\n";
  for (const auto& c : rep.per_category) {
    out << c.name << ',' << c.num_gt << ',' << c.ap50() << ',' << c.ap75() << ',' << c.ar << "\n";
  }
  out << "all,,"  << rep.map50 << ',' << rep.map75 << ',' << rep.mar100 << "\n";
}

/// COCO results list: [{"image_id", "category_id", "bbox": [x,y,w,h], "score"}, ...].
inline std::vector<Detection> parse_detections(const nlohmann::json& doc) {
  if (!doc.is_array()) throw ParseError("detections must be a JSON array");
  std::vector<Detection> out;
  try {
    for (const auto& d : doc) {
      const auto& b = d.at("bbox");
      if (!b.is_array() || b.size() != 4) throw ParseError("detection bbox must have four numbers");
      Detection det{d.at("image_id").get<std::int64_t>(),
                    {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
                    d.at("category_id").get<std::int64_t>(),
                    d.at("score").get<double>()};
      if (!(det.score >= 0.0 && det.score <= 1.0)) throw InvalidParam("detection score outside [0, 1]");
      if (det.box.w < 0 || det.box.h < 0) throw ParseError("detection bbox has negative extent");
      out.push_back(det);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed detection: ") + e.what());
  }
  return out;
}

inline nlohmann::json to_json(const std::vector<Detection>& dets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : dets) {
    arr.push_back({{"image_id", d.image_id},
                   {"category_id", d.category_id},
                   {"bbox", {d.box.x, d.box.y, d.box.w, d.box.h}},
                   {"score", d.score}});
  }
  return arr;
}

}  // namespace cbamswin
