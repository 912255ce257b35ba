#pragma once

// Annotated images, boxes and COCO-style annotation documents.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbamswin/image.hpp"

namespace cbamswin {

/// Top-left corner plus extent, in pixels.
struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
  double area() const { return w * h; }
  bool operator==(const BBox&) const = default;
};

struct Instance {
  BBox box;
  std::int64_t category_id = 0;
  bool operator==(const Instance&) const = default;
};

struct AnnotatedImage {
  std::int64_t id = 0;
  std::string file_name;
  std::size_t width = 0, height = 0;
  Image pixels;  // may be empty when only annotations are loaded
  std::vector<Instance> instances;
  bool operator==(const AnnotatedImage&) const = default;
};

struct Category {
  std::int64_t id = 0;
  std::string name;
  bool operator==(const Category&) const = default;
};

struct Dataset {
  std::vector<AnnotatedImage> images;
  std::vector<Category> categories;

  std::size_t instance_count() const {
    std::size_t n = 0;
    for (const auto& im : images) n += im.instances.size();
    return n;
  }
  const Category* find_category(std::int64_t id) const {
    for (const auto& c : categories)
      if (c.id == id) return &c;
    return nullptr;
  }
  bool operator==(const Dataset&) const = default;
};

inline bool box_intersects_image(const BBox& b, std::size_t W, std::size_t H) {
  return b.x < static_cast<double>(W) && b.y < static_cast<double>(H) && b.x + b.w > 0 && b.y + b.h > 0;
}

/// Parses a COCO document (images, annotations with bbox [x,y,w,h], categories).
inline Dataset parse_coco(const nlohmann::json& doc) {
  Dataset ds;
  try {
    if (!doc.is_object() || !doc.contains("images") || !doc.contains("annotations") || !doc.contains("categories")) {
      throw ParseError("COCO document needs images, annotations and categories");
    }
    std::map<std::int64_t, std::size_t> image_index;
    for (const auto& c : doc.at("categories")) {
      ds.categories.push_back({c.at("id").get<std::int64_t>(), c.value("name", std::string())});
    }
    for (const auto& im : doc.at("images")) {
      AnnotatedImage a;
      a.id = im.at("id").get<std::int64_t>();
      a.file_name = im.value("file_name", std::string());
      a.width = im.at("width").get<std::size_t>();
      a.height = im.at("height").get<std::size_t>();
      if (a.width == 0 || a.height == 0) throw ParseError("image " + std::to_string(a.id) + " has zero extent");
      if (!image_index.emplace(a.id, ds.images.size()).second) {
        throw ParseError("duplicate image id " + std::to_string(a.id));
      }
      ds.images.push_back(std::move(a));
    }
    for (const auto& an : doc.at("annotations")) {
      const auto image_id = an.at("image_id").get<std::int64_t>();
      const auto cat = an.at("category_id").get<std::int64_t>();
      const auto& bb = an.at("bbox");
      if (!bb.is_array() || bb.size() != 4) throw ParseError("bbox must be [x,y,w,h]");
      BBox box{bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
      if (box.w < 0 || box.h < 0) throw ParseError("bbox with negative extent");
      auto it = image_index.find(image_id);
      if (it == image_index.end()) {
        throw DanglingReference("annotation refers to missing image " + std::to_string(image_id));
      }
      if (!ds.find_category(cat)) {
        throw DanglingReference("annotation refers to unknown category " + std::to_string(cat));
      }
      auto& img = ds.images[it->second];
      if (!box_intersects_image(box, img.width, img.height)) {
        throw ParseError("annotation box lies outside image " + std::to_string(image_id));
      }
      img.instances.push_back({box, cat});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed COCO document: ") + e.what());
  }
  return ds;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline void write_json_file(const nlohmann::json& doc, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << doc.dump(2) << "\n";
}

inline Dataset load_coco(const std::string& path) { return parse_coco(read_json_file(path)); }

/// Reads every image file relative to `root`; missing files raise IoError.
inline void load_pixels(Dataset& ds, const std::string& root) {
  for (auto& im : ds.images) {
    im.pixels = read_pnm((std::filesystem::path(root) / im.file_name).string());
    if (im.pixels.width != im.width || im.pixels.height != im.height) {
      throw ParseError(im.file_name + " does not match its annotated size");
    }
  }
}

inline nlohmann::json to_coco(const Dataset& ds) {
  nlohmann::json doc;
  doc["images"] = nlohmann::json::array();
  doc["annotations"] = nlohmann::json::array();
  doc["categories"] = nlohmann::json::array();
  std::int64_t ann_id = 1;
  for (const auto& im : ds.images) {
    doc["images"].push_back({{"id", im.id}, {"file_name", im.file_name}, {"width", im.width}, {"height", im.height}});
    for (const auto& inst : im.instances) {
      const auto& b = inst.box;
      doc["annotations"].push_back({{"id", ann_id++},
                                    {"image_id", im.id},
                                    {"category_id", inst.category_id},
                                    {"bbox", {b.x, b.y, b.w, b.h}},
                                    {"area", b.area()},
                                    {"iscrowd", 0}});
    }
  }
  for (const auto& c : ds.categories) doc["categories"].push_back({{"id", c.id}, {"name", c.name}});
  return doc;
}

/// Writes annotations to `dir/annotations.json` and pixels as PGM/PPM next to it.
inline void save_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  Dataset copy = ds;
  for (auto& im : copy.images) {
    if (im.pixels.empty()) continue;
    if (im.file_name.empty()) im.file_name = "img_" + std::to_string(im.id) + (im.pixels.channels == 1 ? ".pgm" : ".ppm");
    write_pnm(im.pixels, (std::filesystem::path(dir) / im.file_name).string());
  }
  write_json_file(to_coco(copy), (std::filesystem::path(dir) / "annotations.json").string());
}

}  // namespace cbamswin
