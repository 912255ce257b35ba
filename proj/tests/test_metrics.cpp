#include <gtest/gtest.h>

#include <sstream>

#include "cbamswin/metrics.hpp"
#include "cbamswin/rng.hpp"
#include "oracles/metrics_oracle.hpp"

using namespace cbamswin;
using namespace cbamswin::oracle;

// ---------------------------------------------------------------------------
// IoU

TEST(Iou, Examples) {
  EXPECT_EQ(iou({1, 2, 3, 4}, {1, 2, 3, 4}), 1.0);
  EXPECT_EQ(iou({0, 0, 1, 1}, {5, 5, 1, 1}), 0.0);
  EXPECT_EQ(iou({0, 0, 2, 2}, {1, 1, 2, 2}), 1.0 / 7.0);
  EXPECT_EQ(raster_iou({0, 0, 2, 2}, {1, 1, 2, 2}), 1.0 / 7.0);
  EXPECT_EQ(iou({0, 0, 0, 0}, {0, 0, 0, 0}), 0.0);
}

TEST(Iou, MatchesRasterOracle) {
  Rng rng(1);
  for (int t = 0; t < 300; ++t) {
    const BBox a = random_box(rng, 12), b = random_box(rng, 12);
    EXPECT_DOUBLE_EQ(iou(a, b), raster_iou(a, b));
  }
}

TEST(Iou, Properties) {
  Rng rng(2);
  for (int t = 0; t < 500; ++t) {
    const BBox a{rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 4), rng.uniform(0, 4)};
    const BBox b = rng.below(4) ? BBox{rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 4), rng.uniform(0, 4)} : a;
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(v == 1.0, a == b && a.area() > 0);
  }
}

// ---------------------------------------------------------------------------
// Matching

TEST(Match, SingleHit) {
  // (0,0,10,10) vs (0,0,10,6): IoU 0.6
  auto m = match_detections({{1, {0, 0, 10, 6}, 1, 0.7}}, {{1, {0, 0, 10, 10}, 1}}, 0.5);
  EXPECT_EQ(m.num_tp, 1u);
  EXPECT_EQ(m.num_fp, 0u);
  EXPECT_EQ(m.num_fn, 0u);
}

TEST(Match, DuplicateGoesToLowerScore) {
  auto m = match_detections({{1, {0, 0, 10, 9}, 1, 0.4}, {1, {0, 0, 10, 8}, 1, 0.8}}, {{1, {0, 0, 10, 10}, 1}}, 0.5);
  EXPECT_EQ(m.tp, (std::vector<bool>{false, true}));
  EXPECT_EQ(m.num_fp, 1u);
}

TEST(Match, HighestIouWins) {
  auto m = match_detections({{1, {0, 0, 10, 10}, 1, 0.9}}, {{1, {0, 0, 10, 8}, 1}, {1, {0, 0, 10, 10}, 1}}, 0.5);
  EXPECT_EQ(m.matched_gt[0], 1);
  EXPECT_EQ(m.num_fn, 1u);
}

TEST(Match, CategoryGating) {
  auto m = match_detections({{1, {0, 0, 10, 10}, 2, 0.9}}, {{1, {0, 0, 10, 10}, 1}}, 0.5);
  EXPECT_EQ(m.num_fp, 1u);
  EXPECT_EQ(m.num_fn, 1u);
}

TEST(Match, ThresholdRange) {
  EXPECT_THROW(match_detections({}, {}, 0.0), InvalidParam);
  EXPECT_THROW(match_detections({}, {}, 1.5), InvalidParam);
  EXPECT_NO_THROW(match_detections({}, {}, 1.0));
}

TEST(Match, RaisingThresholdNeverAddsTruePositives) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    auto f = random_fixture(rng, 8, 5, 1, 2);
    std::size_t prev = f.dets.size() + 1;
    for (double thr : {0.1, 0.3, 0.5, 0.75, 0.9, 1.0}) {
      const auto tp = match_detections(f.dets, f.gts, thr).num_tp;
      EXPECT_LE(tp, prev);
      prev = tp;
    }
  }
}

TEST(Match, AgreesWithAssignmentEnumeration) {
  Rng rng(4);
  for (int t = 0; t < 300; ++t) {
    auto f = random_fixture(rng, 5, 3, 1, 1);
    std::vector<BBox> db, gb;
    std::vector<double> sc;
    for (const auto& d : f.dets) db.push_back(d.box), sc.push_back(d.score);
    for (const auto& g : f.gts) gb.push_back(g.box);
    for (double thr : {0.5, 0.75}) {
      std::size_t survivors = 0;
      EXPECT_EQ(match_detections(f.dets, f.gts, thr).matched_gt, brute_force_assignment(db, sc, gb, thr, &survivors));
      EXPECT_EQ(survivors, 1u);
    }
  }
}

// ---------------------------------------------------------------------------
// Average precision

TEST(AveragePrecision, Examples) {
  EXPECT_EQ(*average_precision({{0.3, true}}, 1), 1.0);
  EXPECT_EQ(*average_precision({{0.9, false}, {0.8, true}}, 1), 0.5);
  const double ap = *average_precision({{0.9, true}, {0.8, false}, {0.7, true}}, 2);
  EXPECT_EQ(ap, brute_force_ap({0.9, 0.8, 0.7}, {true, false, true}, 2));
  EXPECT_NEAR(ap, (51.0 + 50.0 * 2.0 / 3.0) / 101.0, 1e-15);
  EXPECT_NEAR(ap, 0.834, 1e-3);  // quoted value is truncated
  EXPECT_EQ(*average_precision({{0.9, false}}, 0), 0.0);
  EXPECT_FALSE(average_precision({}, 0).has_value());
  EXPECT_EQ(*average_precision({}, 3), 0.0);
}

TEST(AveragePrecision, MatchesPrefixEnumeration) {
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    const auto n = rng.integer(1, 9);
    std::vector<ScoredLabel> labels;
    std::vector<double> scores;
    std::vector<bool> tp;
    std::size_t hits = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      labels.push_back({static_cast<double>(rng.integer(0, 4)) / 4.0, rng.below(2) == 1});
      scores.push_back(labels.back().score);
      tp.push_back(labels.back().tp);
      hits += labels.back().tp;
    }
    const std::size_t num_gt = hits + static_cast<std::size_t>(rng.integer(0, 3));
    if (num_gt == 0) continue;
    EXPECT_EQ(*average_precision(labels, num_gt), brute_force_ap(scores, tp, num_gt));
  }
}

TEST(AveragePrecision, DependsOnRankingOnly) {
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    std::vector<ScoredLabel> a, b;
    for (auto n = rng.integer(1, 10); n > 0; --n) {
      a.push_back({rng.uniform(0.01, 1.0), rng.below(2) == 1});
      b.push_back({a.back().score * 0.37, a.back().tp});
    }
    EXPECT_EQ(average_precision(a, 6), average_precision(b, 6));
  }
}

// ---------------------------------------------------------------------------
// evaluate

TEST(Evaluate, PerfectDetector) {
  std::vector<GroundTruth> gts{{1, {0, 0, 4, 4}, 1}, {1, {5, 5, 2, 2}, 2}, {2, {1, 1, 3, 3}, 1}};
  std::vector<Detection> dets;
  for (const auto& g : gts) dets.push_back({g.image_id, g.box, g.category_id, 0.9});
  auto r = evaluate(dets, gts, {{1, "a"}, {2, "b"}});
  EXPECT_EQ(r.map50, 1.0);
  EXPECT_EQ(r.map75, 1.0);
  EXPECT_EQ(r.mar100, 1.0);
}

TEST(Evaluate, NoDetections) {
  auto r = evaluate({}, {{1, {0, 0, 4, 4}, 1}}, {{1, "a"}, {2, "b"}});
  EXPECT_EQ(r.map50, 0.0);
  EXPECT_EQ(r.map75, 0.0);
  EXPECT_EQ(r.mar100, 0.0);
  ASSERT_EQ(r.per_category.size(), 1u);  // category b has nothing to score
}

TEST(Evaluate, ThreeImageTwoCategoryFixture) {
  std::vector<Category> cats{{1, "squat"}, {2, "joint"}};
  std::vector<GroundTruth> gts{{1, {0, 0, 4, 4}, 1}, {1, {4, 4, 4, 4}, 2}, {2, {2, 2, 3, 3}, 1}, {3, {0, 0, 8, 2}, 2}};
  std::vector<Detection> dets{{1, {0, 0, 4, 3}, 1, 0.9},   // IoU 0.75 with squat gt
                              {1, {0, 0, 4, 4}, 1, 0.6},   // duplicate
                              {1, {4, 4, 4, 4}, 1, 0.5},   // wrong category
                              {2, {2, 2, 3, 2}, 1, 0.8},   // IoU 2/3
                              {3, {0, 0, 8, 2}, 2, 0.95},  // exact
                              {3, {0, 2, 8, 2}, 2, 0.4}};  // disjoint
  const auto r = evaluate(dets, gts, cats);
  const auto o = brute_force_evaluate(dets, gts, cats);
  EXPECT_TRUE(o.unique);
  EXPECT_EQ(r.map50, o.map50);
  EXPECT_EQ(r.map75, o.map75);
  EXPECT_EQ(r.mar100, o.mar);
  // squat: ranking TP(.9) TP(.8) FP(.6) FP(.5) at 0.5 -> AP 1; at 0.75 TP FP FP FP -> AP 51/101
  EXPECT_EQ(r.per_category[0].ap50(), 1.0);
  EXPECT_EQ(r.per_category[0].ap75(), 51.0 / 101.0);
  EXPECT_EQ(r.per_category[0].ar, 0.75);
}

TEST(Evaluate, MatchesExhaustiveOracleOnSmallFixtures) {
  Rng rng(7);
  for (int t = 0; t < 2000; ++t) {
    auto f = random_fixture(rng, 5, 3, static_cast<int>(rng.integer(1, 3)), static_cast<int>(rng.integer(1, 3)));
    const auto r = evaluate(f.dets, f.gts, f.cats);
    const auto o = brute_force_evaluate(f.dets, f.gts, f.cats);
    ASSERT_TRUE(o.unique) << "fixture " << t;
    ASSERT_EQ(r.map50, o.map50) << "fixture " << t;
    ASSERT_EQ(r.map75, o.map75) << "fixture " << t;
    ASSERT_EQ(r.mar100, o.mar) << "fixture " << t;
    ASSERT_EQ(r.per_category.size(), o.scored.size());
  }
}

TEST(Evaluate, Map50AtLeastMap75) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    auto f = random_fixture(rng, 40, 20, 4, 3);
    const auto r = evaluate(f.dets, f.gts, f.cats);
    EXPECT_GE(r.map50, r.map75);
    for (double v : {r.map50, r.map75, r.mar100}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Evaluate, KeepsTopDetectionsPerImage) {
  std::vector<GroundTruth> gts{{1, {0, 0, 4, 4}, 1}};
  std::vector<Detection> dets;
  for (int i = 0; i < 100; ++i) dets.push_back({1, {10, 10, 1, 1}, 1, 0.5});
  dets.push_back({1, {0, 0, 4, 4}, 1, 0.4});
  EXPECT_EQ(evaluate(dets, gts, {{1, "a"}}).mar100, 0.0);
  EvalParams p;
  p.max_dets = 101;
  EXPECT_EQ(evaluate(dets, gts, {{1, "a"}}, p).mar100, 1.0);
}

TEST(Evaluate, Validation) {
  EXPECT_THROW(evaluate({{1, {0, 0, 1, 1}, 5, 0.5}}, {}, {{1, "a"}}), DanglingReference);
  EXPECT_THROW(evaluate({{1, {0, 0, 1, 1}, 1, 1.5}}, {}, {{1, "a"}}), InvalidParam);
  Dataset ds{{{1, "", 10, 10, {}, {{{0, 0, 2, 2}, 1}}}}, {{1, "a"}}};
  EXPECT_THROW(evaluate({{2, {0, 0, 1, 1}, 1, 0.5}}, ds), DanglingReference);
  EXPECT_EQ(evaluate({{1, {0, 0, 2, 2}, 1, 0.5}}, ds).map50, 1.0);
}

// ---------------------------------------------------------------------------
// Reports and serialization

namespace {
MetricsReport three_category_report() {
  std::vector<GroundTruth> gts{{1, {0, 0, 4, 4}, 1}, {1, {5, 5, 2, 2}, 2}, {1, {1, 1, 3, 3}, 3}};
  return evaluate({{1, {0, 0, 4, 4}, 1, 0.9}}, gts, {{1, "a"}, {2, "b"}, {3, "c"}});
}
std::vector<CategoryStats> stats_with(std::vector<double> ratios) {
  std::vector<CategoryStats> s;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    s.push_back({static_cast<std::int64_t>(i + 1), std::string(1, static_cast<char>('a' + i)), 1, 0, 0, 0, ratios[i],
                 classify_small(ratios[i])});
  }
  return s;
}
}  // namespace

TEST(SizeOrdered, DescendingRatio) {
  auto rows = size_ordered_report(three_category_report(), stats_with({0.05, 0.01, 0.03}));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].mean_size_ratio, 0.05);
  EXPECT_EQ(rows[1].mean_size_ratio, 0.03);
  EXPECT_EQ(rows[2].mean_size_ratio, 0.01);
  EXPECT_EQ(rows[0].name, "a");
}

TEST(SizeOrdered, SingleCategoryAndMissingStats) {
  auto rep = evaluate({}, {{1, {0, 0, 4, 4}, 1}}, {{1, "a"}});
  EXPECT_EQ(size_ordered_report(rep, stats_with({0.2})).size(), 1u);
  EXPECT_THROW(size_ordered_report(three_category_report(), stats_with({0.05, 0.01})), MissingStats);
  // detections of a category without ground truth: no size ratio, no row
  auto extra = evaluate({{1, {0, 0, 4, 4}, 2, 0.9}}, {{1, {0, 0, 4, 4}, 1}}, {{1, "a"}, {2, "b"}});
  ASSERT_EQ(extra.per_category.size(), 2u);
  auto rows = size_ordered_report(extra, stats_with({0.2}));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].name, "a");
}

TEST(SizeOrdered, CsvAcrossVariants) {
  std::ostringstream out;
  write_size_ordered_csv({{"none", three_category_report()}, {"bl", three_category_report()}},
                         stats_with({0.01, 0.05, 0.03}), out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "category,size_ratio,ap50_none,ap50_bl");
  std::getline(in, line);
  EXPECT_EQ(line, "b,0.05,0,0");
}

TEST(Serialization, DetectionsRoundtrip) {
  std::vector<Detection> d{{1, {0.5, 1, 2, 3}, 2, 0.25}, {4, {0, 0, 1, 1}, 1, 1.0}};
  EXPECT_EQ(parse_detections(to_json(d)), d);
  EXPECT_THROW(parse_detections(nlohmann::json::object()), ParseError);
  EXPECT_THROW(parse_detections(nlohmann::json::parse(R"([{"image_id": 1}])")), ParseError);
  EXPECT_THROW(parse_detections(nlohmann::json::parse(R"([{"image_id":1,"category_id":1,"bbox":[0,0,1,1],"score":2}])")),
               InvalidParam);
}

TEST(Serialization, ReportJsonAndCsv) {
  auto rep = three_category_report();
  auto j = to_json(rep);
  EXPECT_EQ(j["ar_iou_thresholds"], nlohmann::json({0.5, 0.75}));
  EXPECT_EQ(j["max_dets"], 100);
  EXPECT_EQ(j["per_category"].size(), 3u);
  std::ostringstream out;
  write_metrics_csv(rep, out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "category,num_gt,ap50,ap75,ar100");
}
