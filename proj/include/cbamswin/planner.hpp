#pragma once

// Train/val split and category balancing by synthesized augmented copies.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cbamswin/augment.hpp"

namespace cbamswin {

/// Seeded shuffle, then the first round(fraction * n) images go to train.
inline std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidParam("split fraction must lie in (0, 1)");
  std::vector<std::size_t> order(ds.images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
  Dataset train{{}, ds.categories}, val{{}, ds.categories};
  for (std::size_t k = 0; k < order.size(); ++k) {
    (k < n_train ? train : val).images.push_back(ds.images[order[k]]);
  }
  return {std::move(train), std::move(val)};
}

/// Number of images holding at least one instance of `category`.
inline std::size_t images_with_category(const Dataset& ds, std::int64_t category) {
  std::size_t n = 0;
  for (const auto& im : ds.images) {
    n += std::any_of(im.instances.begin(), im.instances.end(),
                     [&](const Instance& i) { return i.category_id == category; });
  }
  return n;
}

struct PlanStep {
  std::int64_t category_id = 0;
  std::int64_t source_image_id = 0;
  std::int64_t new_image_id = 0;
  std::vector<Transform> chain;
  bool operator==(const PlanStep&) const = default;
};

struct AugmentPlan {
  std::map<std::int64_t, std::size_t> targets;  // category id -> image count
  std::uint64_t seed = 0;
  std::vector<PlanStep> steps;
  bool operator==(const AugmentPlan&) const = default;
};

inline nlohmann::json to_json(const AugmentPlan& plan) {
  nlohmann::json j;
  j["seed"] = plan.seed;
  j["targets"] = nlohmann::json::object();
  for (const auto& [c, n] : plan.targets) j["targets"][std::to_string(c)] = n;
  j["steps"] = nlohmann::json::array();
  for (const auto& s : plan.steps) {
    nlohmann::json chain = nlohmann::json::array();
    for (const auto& t : s.chain) chain.push_back(to_json(t));
    j["steps"].push_back(
        {{"category_id", s.category_id}, {"source", s.source_image_id}, {"image_id", s.new_image_id}, {"chain", chain}});
  }
  return j;
}

namespace detail {
inline AnnotatedImage synthesize(const AnnotatedImage& src, const PlanStep& step) {
  AnnotatedImage out = augment(src, step.chain);
  out.id = step.new_image_id;
  out.file_name = "aug_" + std::to_string(step.new_image_id) + (src.pixels.channels == 1 ? ".pgm" : ".ppm");
  return out;
}
}  // namespace detail

inline constexpr std::size_t kMaxSynthesisAttempts = 64;

/// For each category below its target, synthesizes images from random source
/// images containing it, each through a chain of 1-3 random transforms, until
/// the target image count is met. Sources are drawn from the input images only.
inline std::pair<AugmentPlan, Dataset> plan_and_execute_augmentation(const Dataset& ds,
                                                                      const std::map<std::int64_t, std::size_t>& targets,
                                                                      std::uint64_t seed) {
  AugmentPlan plan{targets, seed, {}};
  Dataset out = ds;
  Rng rng(seed);
  std::int64_t next_id = 1;
  for (const auto& im : ds.images) next_id = std::max(next_id, im.id + 1);
  for (const auto& [cat, target] : targets) {
    if (!ds.find_category(cat)) throw DanglingReference("augmentation target for unknown category " + std::to_string(cat));
    std::vector<std::size_t> sources;
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      for (const auto& inst : ds.images[i].instances)
        if (inst.category_id == cat) {
          sources.push_back(i);
          break;
        }
    }
    std::size_t have = images_with_category(out, cat);
    if (have >= target) continue;
    if (sources.empty()) {
      throw InvalidParam("category " + std::to_string(cat) + " has no instances but a nonzero target");
    }
    while (have < target) {
      bool placed = false;
      for (std::size_t attempt = 0; attempt < kMaxSynthesisAttempts && !placed; ++attempt) {
        const auto& src = ds.images[sources[rng.below(sources.size())]];
        PlanStep step{cat, src.id, next_id, {}};
        const auto len = rng.integer(1, 3);
        for (std::int64_t k = 0; k < len; ++k) step.chain.push_back(random_transform(rng, src.width, src.height));
        AnnotatedImage img = detail::synthesize(src, step);
        if (std::none_of(img.instances.begin(), img.instances.end(),
                         [&](const Instance& i) { return i.category_id == cat; })) {
          continue;
        }
        out.images.push_back(std::move(img));
        plan.steps.push_back(std::move(step));
        ++next_id;
        ++have;
        placed = true;
      }
      if (!placed) throw InvalidParam("could not keep category " + std::to_string(cat) + " visible after augmentation");
    }
  }
  return {std::move(plan), std::move(out)};
}

/// Re-applies recorded steps to the source dataset.
inline Dataset replay_plan(const Dataset& ds, const AugmentPlan& plan) {
  Dataset out = ds;
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < ds.images.size(); ++i) index[ds.images[i].id] = i;
  for (const auto& step : plan.steps) {
    auto it = index.find(step.source_image_id);
    if (it == index.end()) throw DanglingReference("plan refers to missing image " + std::to_string(step.source_image_id));
    out.images.push_back(detail::synthesize(ds.images[it->second], step));
  }
  return out;
}

/// Targets document: {"train": {"<name or id>": n, ...}, "val": {...}, "default": n}.
/// "default" applies to every category not named explicitly in a split.
struct SplitTargets {
  std::map<std::int64_t, std::size_t> train, val;
};

inline SplitTargets parse_targets(const nlohmann::json& doc, const Dataset& ds) {
  SplitTargets out;
  try {
    auto resolve = [&](const std::string& key) -> std::int64_t {
      for (const auto& c : ds.categories)
        if (c.name == key || std::to_string(c.id) == key) return c.id;
      throw DanglingReference("targets name unknown category '" + key + "'");
    };
    const std::optional<std::size_t> fallback =
        doc.contains("default") ? std::optional<std::size_t>(doc.at("default").get<std::size_t>()) : std::nullopt;
    for (const auto& [split, dest] : {std::pair{"train", &out.train}, std::pair{"val", &out.val}}) {
      if (doc.contains(split)) {
        for (const auto& [k, v] : doc.at(split).items()) (*dest)[resolve(k)] = v.get<std::size_t>();
      }
      if (fallback && (std::string(split) == "train" || doc.contains(split))) {
        for (const auto& c : ds.categories) dest->emplace(c.id, *fallback);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed targets document: ") + e.what());
  }
  return out;
}

}  // namespace cbamswin
