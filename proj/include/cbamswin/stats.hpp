#pragma once

// Per-category box statistics and the small-instance rule.

#include <iomanip>
#include <iostream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cbamswin/dataset.hpp"

namespace cbamswin {

/// A category is small when its mean box area is under 2% of the image area.
inline constexpr double kSmallRatioThreshold = 0.02;

// COCO's absolute size bins, expressed as a fraction of a 640x480 image:
// 32^2 px is about 0.3% and 96^2 px about 3%.
inline constexpr double kCocoReferenceArea = 640.0 * 480.0;
inline constexpr double kCocoSmallSide = 32.0;
inline constexpr double kCocoMediumSide = 96.0;
inline constexpr double kCocoSmallRatio = kCocoSmallSide * kCocoSmallSide / kCocoReferenceArea;     // 0.00333
inline constexpr double kCocoMediumRatio = kCocoMediumSide * kCocoMediumSide / kCocoReferenceArea;  // 0.03

enum class SizeClass { Small, Regular };

inline std::string to_string(SizeClass c) { return c == SizeClass::Small ? "small" : "regular"; }

struct CategoryStats {
  std::int64_t category_id = 0;
  std::string name;
  std::size_t count = 0;
  double mean_area_px = 0;
  double mean_w = 0, mean_h = 0;
  double mean_size_ratio = 0;
  SizeClass size_class = SizeClass::Regular;
};

inline SizeClass classify_small(double mean_size_ratio) {
  return mean_size_ratio < kSmallRatioThreshold ? SizeClass::Small : SizeClass::Regular;
}
inline SizeClass classify_small(const CategoryStats& s) { return classify_small(s.mean_size_ratio); }

/// Mean w*h and mean w*h/(W*H) per category, in category-table order.
/// Categories without instances are skipped with a warning on `warn`.
inline std::vector<CategoryStats> category_stats(const Dataset& ds, std::ostream* warn = &std::cerr) {
  struct Acc {
    std::size_t n = 0;
    double area = 0, ratio = 0, w = 0, h = 0;
  };
  std::map<std::int64_t, Acc> acc;
  for (const auto& im : ds.images) {
    const double image_area = static_cast<double>(im.width) * static_cast<double>(im.height);
    for (const auto& inst : im.instances) {
      auto& a = acc[inst.category_id];
      ++a.n;
      a.area += inst.box.area();
      a.ratio += inst.box.area() / image_area;
      a.w += inst.box.w;
      a.h += inst.box.h;
    }
  }
  std::vector<CategoryStats> out;
  for (const auto& c : ds.categories) {
    auto it = acc.find(c.id);
    if (it == acc.end()) {
      if (warn) *warn << "warning: category '" << c.name << "' (" << c.id << ") has no instances; skipped\n";
      continue;
    }
    const auto& a = it->second;
    const double n = static_cast<double>(a.n);
    CategoryStats s{c.id, c.name, a.n, a.area / n, a.w / n, a.h / n, a.ratio / n, SizeClass::Regular};
    s.size_class = classify_small(s);
    out.push_back(s);
  }
  return out;
}

inline void write_stats_csv(const std::vector<CategoryStats>& stats, std::ostream& out) {
  out << "category,count,mean_w,mean_h,mean_area_px,mean_size_ratio,size_class\n";
  out << std::setprecision(17);
  for (const auto& s : stats) {
    out << s.name << "," << s.count << "," << s.mean_w << "," << s.mean_h << "," << s.mean_area_px << ","
        << s.mean_size_ratio << "," << to_string(s.size_class) << "\n";
  }
}

}  // namespace cbamswin
