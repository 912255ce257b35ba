#pragma once

// Model assembly, training loop, checkpoints, evaluation, ablation and timing.
//
// Batches are drawn from per-epoch permutations seeded by (seed, epoch), so the
// batch of any iteration is a pure function of the config. That is what lets a
// resumed run reproduce the losses of an uninterrupted one.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "cbamswin/config.hpp"
#include "cbamswin/planner.hpp"

namespace cbamswin {

// ---------------------------------------------------------------------------
// Model

struct Model {
  SwinConfig swin;
  BackboneParams backbone;
  HeadParams head;

  template <class F>
  void visit(F&& f) {
    backbone.visit(f);
    head.visit("head.", f);
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    visit([&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
  }

  Tensor forward(const Tensor& image) const { return head_forward(backbone_forward(image, swin, backbone), head); }
};

inline Model init_model(const SwinConfig& swin, HeadTask task, std::size_t num_classes) {
  Model m{swin, init_backbone(swin), {}};
  Rng rng(swin.seed ^ 0x5DEECE66DULL);
  m.head = init_head(swin, task, num_classes, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Data

struct Sample {
  std::int64_t image_id = 0;
  Tensor image;             // [3,H,W]
  std::size_t label = 0;    // classification target
  CellTargets cells;        // localization targets
};

struct PreparedData {
  std::vector<Category> categories;
  Dataset train, val;  // resized to the model input
  std::vector<Sample> train_samples, val_samples;
};

inline double localization_stride(const SwinConfig& c) {
  return static_cast<double>(c.input_size[1]) / static_cast<double>(c.stage_width(kLocalizationStage));
}

/// Resizes pixels and boxes to W x H.
inline AnnotatedImage fit_to_input(const AnnotatedImage& im, std::size_t W, std::size_t H) {
  if (im.width == W && im.height == H) return im;
  AnnotatedImage out = im;
  const double sx = static_cast<double>(W) / static_cast<double>(im.width);
  const double sy = static_cast<double>(H) / static_cast<double>(im.height);
  out.width = W;
  out.height = H;
  if (!im.pixels.empty()) out.pixels = resize_image(im.pixels, W, H);
  for (auto& inst : out.instances) inst.box = {inst.box.x * sx, inst.box.y * sy, inst.box.w * sx, inst.box.h * sy};
  return out;
}

inline std::vector<Sample> make_samples(const Dataset& ds, const SwinConfig& swin, HeadTask task) {
  std::vector<Sample> out;
  const std::size_t gw = swin.stage_width(kLocalizationStage), gh = swin.stage_height(kLocalizationStage);
  for (const auto& im : ds.images) {
    if (im.pixels.empty()) throw DatasetEmpty("image " + std::to_string(im.id) + " has no pixels loaded");
    if (task == HeadTask::Classification && im.instances.empty()) continue;  // no label
    Sample s;
    s.image_id = im.id;
    s.image = image_to_tensor(im.pixels);
    if (task == HeadTask::Classification) s.label = image_label(ds, im);
    else s.cells = assign_cells(im.instances, ds.categories, gw, gh, localization_stride(swin));
    out.push_back(std::move(s));
  }
  return out;
}

inline Dataset load_source(const DatasetSource& src, const SwinConfig& swin) {
  Dataset ds;
  if (!src.coco_path.empty()) {
    ds = load_coco(src.coco_path);
    const std::string root =
        src.image_root.empty() ? std::filesystem::path(src.coco_path).parent_path().string() : src.image_root;
    load_pixels(ds, root);
  } else {
    SyntheticSpec spec = *src.synthetic;
    spec.width = swin.input_size[1];
    spec.height = swin.input_size[0];
    ds = generate_synthetic(spec);
  }
  return ds;
}

inline PreparedData prepare_data(const TrainConfig& cfg) {
  Dataset ds = load_source(cfg.dataset, cfg.swin);
  if (ds.images.empty()) throw DatasetEmpty("dataset has no images");
  for (auto& im : ds.images) im = fit_to_input(im, cfg.swin.input_size[1], cfg.swin.input_size[0]);
  PreparedData d;
  d.categories = ds.categories;
  std::tie(d.train, d.val) = split_train_val(ds, 1.0 - cfg.val_fraction, cfg.seed);
  d.train_samples = make_samples(d.train, cfg.swin, cfg.task);
  d.val_samples = make_samples(d.val, cfg.swin, cfg.task);
  if (d.train_samples.empty()) throw DatasetEmpty("training split has no usable images");
  return d;
}

/// Sample indices for one iteration: consecutive slices of per-epoch permutations.
inline std::vector<std::size_t> batch_indices(std::size_t n, std::size_t batch, std::uint64_t seed, std::size_t iteration) {
  std::vector<std::size_t> out;
  std::size_t cached_epoch = SIZE_MAX;
  std::vector<std::size_t> perm;
  for (std::size_t k = 0; k < batch; ++k) {
    const std::size_t pos = iteration * batch + k;
    const std::size_t epoch = pos / n;
    if (epoch != cached_epoch) {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
      rng.shuffle(perm);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

inline std::size_t total_iterations(const TrainConfig& cfg, std::size_t n_train) {
  if (cfg.iterations > 0) return cfg.iterations;
  return cfg.epochs * ((n_train + cfg.batch_size - 1) / cfg.batch_size);
}

// ---------------------------------------------------------------------------
// One optimizer iteration

inline Tensor sample_loss(const Model& model, const Sample& s) {
  Tensor out = model.forward(s.image);
  if (model.head.task == HeadTask::Classification) return cross_entropy(out, {s.label});
  return localization_loss(out, s.cells, model.head.num_classes);
}

/// Mean loss over the batch; applies one AdamW step. Throws NonFiniteLoss before
/// touching the parameters when the loss is not finite.
inline double train_step(Model& model, AdamWState& opt, const AdamWHyper& hyper, const std::vector<const Sample*>& batch,
                         std::size_t iteration) {
  Tensor total;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    Tensor l = sample_loss(model, *batch[k]);
    total = k == 0 ? l : add(total, l);
  }
  Tensor loss = scale(total, 1.0 / static_cast<double>(batch.size()));
  const double value = loss.item();
  if (!std::isfinite(value)) {
    std::string culprit = "none (non-finite activations)";
    for (auto& [name, t] : model.named_parameters())
      if (!all_finite(t)) {
        culprit = name;
        break;
      }
    throw NonFiniteLoss("loss is " + std::to_string(value) + " at iteration " + std::to_string(iteration + 1) +
                        "; first non-finite parameter: " + culprit);
  }
  backward(loss);
  auto params = model.parameters();
  adamw_step(params, opt, hyper);
  return value;
}

// ---------------------------------------------------------------------------
// Timing

inline constexpr std::size_t kTimingWarmup = 5;

struct TimingSummary {
  double mean = 0.0, std = 0.0;
  std::size_t samples = 0;
};

/// Mean and population standard deviation of the samples after the warmup.
inline TimingSummary summarize_timing(const std::vector<double>& seconds, std::size_t warmup = kTimingWarmup) {
  TimingSummary s;
  if (seconds.size() <= warmup) return s;
  s.samples = seconds.size() - warmup;
  for (std::size_t i = warmup; i < seconds.size(); ++i) s.mean += seconds[i];
  s.mean /= static_cast<double>(s.samples);
  double var = 0.0;
  for (std::size_t i = warmup; i < seconds.size(); ++i) var += (seconds[i] - s.mean) * (seconds[i] - s.mean);
  s.std = std::sqrt(var / static_cast<double>(s.samples));
  return s;
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  TrainConfig config;
  std::vector<Category> categories;
  Model model;
  AdamWState optimizer;
  std::size_t iteration = 0;  // completed iterations
  std::vector<double> losses;
};

inline nlohmann::json to_json(Checkpoint& ck) {
  nlohmann::json j;
  j["format"] = "cbamswin-checkpoint-1";
  j["config"] = to_json(ck.config);
  j["seed"] = ck.config.seed;
  j["iteration"] = ck.iteration;
  j["losses"] = ck.losses;
  j["categories"] = nlohmann::json::array();
  for (const auto& c : ck.categories) j["categories"].push_back({{"id", c.id}, {"name", c.name}});
  auto named = ck.model.named_parameters();
  j["params"] = nlohmann::json::object();
  for (const auto& [name, t] : named) j["params"][name] = {{"shape", t.shape()}, {"data", t.values()}};
  j["optimizer"] = {{"t", ck.optimizer.t}, {"m", nlohmann::json::object()}, {"v", nlohmann::json::object()}};
  for (std::size_t k = 0; k < ck.optimizer.m.size() && k < named.size(); ++k) {
    j["optimizer"]["m"][named[k].first] = ck.optimizer.m[k];
    j["optimizer"]["v"][named[k].first] = ck.optimizer.v[k];
  }
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "cbamswin-checkpoint-1") throw ParseError("not a checkpoint document");
    Checkpoint ck;
    ck.config = train_config_from_json(j.at("config"));
    ck.iteration = j.at("iteration").get<std::size_t>();
    ck.losses = j.at("losses").get<std::vector<double>>();
    for (const auto& c : j.at("categories")) ck.categories.push_back({c.at("id").get<std::int64_t>(), c.at("name").get<std::string>()});
    ck.model = init_model(ck.config.swin, ck.config.task, ck.categories.size());
    const auto& params = j.at("params");
    const auto& opt = j.at("optimizer");
    ck.optimizer.t = opt.at("t").get<std::uint64_t>();
    for (auto& [name, t] : ck.model.named_parameters()) {
      if (!params.contains(name)) throw ParseError("checkpoint lacks parameter '" + name + "'");
      const auto& p = params.at(name);
      if (p.at("shape").get<Shape>() != t.shape()) throw ShapeMismatch("checkpoint shape differs for '" + name + "'");
      auto data = p.at("data").get<std::vector<double>>();
      if (data.size() != t.numel()) throw ShapeMismatch("checkpoint size differs for '" + name + "'");
      t.leaf_data() = std::move(data);
      if (ck.optimizer.t > 0) {
        ck.optimizer.m.push_back(opt.at("m").at(name).get<std::vector<double>>());
        ck.optimizer.v.push_back(opt.at("v").at(name).get<std::vector<double>>());
      }
    }
    if (params.size() != ck.model.named_parameters().size()) throw ParseError("checkpoint has unexpected parameters");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(Checkpoint& ck, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << to_json(ck).dump() << "\n";
  if (!out) throw IoError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  std::string out_dir;                  // when set: loss_curve.csv, timing.csv, checkpoint
  const Checkpoint* resume = nullptr;   // continue from this state
  std::size_t stop_after = 0;           // stop once this many iterations are complete (0: run to the end)
  std::ostream* log = nullptr;
  std::size_t log_every = 50;
};

struct TrainResult {
  Checkpoint state;
  std::vector<double> seconds;  // wall clock per iteration run in this call
  TimingSummary timing;
};

inline void write_loss_curve(const std::vector<double>& losses, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "iteration,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out << i + 1 << ',' << format_real(losses[i]) << "\n";
}

inline void write_timing_log(const std::vector<double>& seconds, std::size_t first_iteration, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "iteration,seconds\n";
  for (std::size_t i = 0; i < seconds.size(); ++i) out << first_iteration + i + 1 << ',' << format_real(seconds[i]) << "\n";
}

inline TrainResult train(const TrainConfig& cfg_in, const PreparedData& data, const TrainOptions& opt = {}) {
  TrainConfig cfg = cfg_in;
  cfg.swin.seed = cfg.seed;
  cfg.validate();
  TrainResult r;
  if (opt.resume) {
    r.state = *opt.resume;
    if (to_json(r.state.config) != to_json(cfg)) throw InvalidParam("resume checkpoint was written for a different config");
  } else {
    r.state.config = cfg;
    r.state.categories = data.categories;
    r.state.model = init_model(cfg.swin, cfg.task, data.categories.size());
  }
  const std::size_t n = data.train_samples.size();
  const std::size_t total = total_iterations(cfg, n);
  const std::size_t end = opt.stop_after ? std::min(total, opt.stop_after) : total;
  for (std::size_t it = r.state.iteration; it < end; ++it) {
    std::vector<const Sample*> batch;
    for (auto i : batch_indices(n, cfg.batch_size, cfg.seed, it)) batch.push_back(&data.train_samples[i]);
    const auto t0 = std::chrono::steady_clock::now();
    const double loss = train_step(r.state.model, r.state.optimizer, cfg.optim, batch, it);
    r.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    r.state.losses.push_back(loss);
    r.state.iteration = it + 1;
    if (opt.log && opt.log_every && (it + 1) % opt.log_every == 0) {
      *opt.log << "iter " << it + 1 << "/" << total << " loss " << loss << "\n";
    }
  }
  r.timing = summarize_timing(r.seconds);
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    const std::filesystem::path dir(opt.out_dir);
    write_loss_curve(r.state.losses, (dir / "loss_curve.csv").string());
    write_timing_log(r.seconds, end - r.seconds.size(), (dir / std::filesystem::path(cfg.timing_log_path).filename()).string());
    save_checkpoint(r.state, (dir / std::filesystem::path(cfg.checkpoint_path).filename()).string());
  }
  return r;
}

/// Mean of losses[i-window+1 .. i] (1-based iteration i).
inline double moving_average(const std::vector<double>& losses, std::size_t iteration, std::size_t window) {
  if (iteration == 0 || iteration > losses.size() || window == 0) throw InvalidParam("moving average out of range");
  const std::size_t lo = iteration >= window ? iteration - window : 0;
  double s = 0;
  for (std::size_t i = lo; i < iteration; ++i) s += losses[i];
  return s / static_cast<double>(iteration - lo);
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::vector<Detection> predict_detections(const Model& model, const Dataset& ds) {
  if (model.head.task != HeadTask::Localization) throw InvalidParam("detections need a localization model");
  const auto& c = model.swin;
  std::vector<Detection> dets;
  for (const auto& im : ds.images) {
    Tensor out = model.forward(image_to_tensor(im.pixels));
    auto d = decode_detections(out, c.stage_width(kLocalizationStage), c.stage_height(kLocalizationStage),
                               localization_stride(c), ds.categories, im.id, im.width, im.height);
    dets.insert(dets.end(), d.begin(), d.end());
  }
  return dets;
}

inline double classification_accuracy(const Model& model, const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    const auto v = model.forward(s.image).values();
    hits += static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin()) == s.label;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Ablation and timing comparison

inline const std::vector<CbamPlacement>& all_placements() {
  static const std::vector<CbamPlacement> v{CbamPlacement::None, CbamPlacement::ModelLevel, CbamPlacement::StageLevel,
                                            CbamPlacement::BlockLevel};
  return v;
}

struct AblationRun {
  CbamPlacement variant;
  std::uint64_t seed;
  MetricsReport report;
  TimingSummary timing;
  std::vector<double> losses;
};

struct AblationRow {
  CbamPlacement variant;
  double map50 = 0, map75 = 0, ar100 = 0;
  TimingSummary timing;        // pooled over seeds
  MetricsReport mean_report;   // per-category metrics averaged over seeds
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationRow> rows;
  std::vector<CategoryStats> val_stats;
};

/// Trains every variant on every seed with identical data; detection metrics come
/// from the localization head on the validation split.
inline AblationResult run_ablation(TrainConfig base, const std::vector<CbamPlacement>& variants,
                                   const std::vector<std::uint64_t>& seeds, std::ostream* log = nullptr) {
  if (seeds.empty()) throw InvalidParam("ablation needs at least one seed");
  if (variants.empty()) throw InvalidParam("ablation needs at least one variant");
  base.task = HeadTask::Localization;
  AblationResult res;
  std::map<std::uint64_t, PreparedData> data;  // split depends on the seed only
  for (auto seed : seeds) {
    TrainConfig c = base;
    c.seed = seed;
    data.emplace(seed, prepare_data(c));
  }
  std::ostringstream quiet;
  res.val_stats = category_stats(data.begin()->second.val, &quiet);
  for (auto variant : variants) {
    AblationRow row{variant};
    std::vector<double> pooled;  // post-warmup samples of every seed
    std::vector<MetricsReport> reports;
    for (auto seed : seeds) {
      TrainConfig c = base;
      c.seed = seed;
      c.swin.placement = variant;
      const auto& d = data.at(seed);
      auto tr = train(c, d);
      auto report = evaluate(predict_detections(tr.state.model, d.val), d.val);
      if (log) {
        *log << to_string(variant) << " seed " << seed << ": map50 " << report.map50 << " map75 " << report.map75
             << " ar100 " << report.mar100 << " iter " << tr.timing.mean << "s\n";
      }
      pooled.insert(pooled.end(), tr.seconds.begin() + static_cast<std::ptrdiff_t>(std::min(kTimingWarmup, tr.seconds.size())),
                    tr.seconds.end());
      reports.push_back(report);
      res.runs.push_back({variant, seed, report, tr.timing, tr.state.losses});
    }
    const double ns = static_cast<double>(seeds.size());
    row.mean_report = reports.front();
    for (auto& cm : row.mean_report.per_category) {
      std::fill(cm.ap.begin(), cm.ap.end(), 0.0);
      cm.ar = 0;
    }
    for (const auto& rep : reports) {
      row.map50 += rep.map50 / ns;
      row.map75 += rep.map75 / ns;
      row.ar100 += rep.mar100 / ns;
      for (auto& cm : row.mean_report.per_category)
        for (const auto& other : rep.per_category)
          if (other.category_id == cm.category_id) {
            for (std::size_t t = 0; t < cm.ap.size(); ++t) cm.ap[t] += other.ap[t] / ns;
            cm.ar += other.ar / ns;
          }
    }
    row.mean_report.map50 = row.map50;
    row.mean_report.map75 = row.map75;
    row.mean_report.mar100 = row.ar100;
    row.timing = summarize_timing(pooled, 0);
    res.rows.push_back(std::move(row));
  }
  return res;
}

inline const char* kAblationHeader = "variant,map50,map75,ar100,iter_time_mean,iter_time_std";

inline void write_ablation_csv(const AblationResult& res, std::ostream& out) {
  out << kAblationHeader << "\n";
  for (const auto& r : res.rows) {
    out << to_string(r.variant) << ',' << format_real(r.map50) << ',' << format_real(r.map75) << ','
        << format_real(r.ar100) << ',' << format_real(r.timing.mean) << ',' << format_real(r.timing.std) << "\n";
  }
}

inline void write_ablation_runs_csv(const AblationResult& res, std::ostream& out) {
  out << "variant,seed,map50,map75,ar100,iter_time_mean,iter_time_std,final_loss\n";
  for (const auto& r : res.runs) {
    out << to_string(r.variant) << ',' << r.seed << ',' << format_real(r.report.map50) << ','
        << format_real(r.report.map75) << ',' << format_real(r.report.mar100) << ',' << format_real(r.timing.mean) << ','
        << format_real(r.timing.std) << ',' << format_real(r.losses.empty() ? 0.0 : r.losses.back()) << "\n";
  }
}

/// Metrics averaged over the categories of each size class, per variant.
inline void write_size_class_csv(const AblationResult& res, std::ostream& out) {
  out << "variant,size_class,categories,ap50,ap75,ar100\n";
  for (const auto& row : res.rows) {
    for (auto cls : {SizeClass::Small, SizeClass::Regular}) {
      double ap50 = 0, ap75 = 0, ar = 0;
      std::size_t n = 0;
      for (const auto& cm : row.mean_report.per_category)
        for (const auto& s : res.val_stats)
          if (s.category_id == cm.category_id && s.size_class == cls) {
            ap50 += cm.ap50(), ap75 += cm.ap75(), ar += cm.ar, ++n;
          }
      if (n == 0) continue;
      const double d = static_cast<double>(n);
      out << to_string(row.variant) << ',' << to_string(cls) << ',' << n << ',' << format_real(ap50 / d) << ','
          << format_real(ap75 / d) << ',' << format_real(ar / d) << "\n";
    }
  }
}

struct BenchResult {
  std::vector<CbamPlacement> variants;
  std::vector<std::vector<double>> seconds;  // per variant, per iteration
  std::vector<TimingSummary> timing;
};

/// Times training iterations of each variant on identical batches. Variants run
/// round-robin, with the starting variant rotating each round, so slow drifts of
/// the machine affect all of them alike.
inline BenchResult bench(const TrainConfig& base, const std::vector<CbamPlacement>& variants, std::size_t iters,
                         const PreparedData& data) {
  if (iters == 0) throw InvalidParam("bench needs at least one iteration");
  BenchResult res{variants, std::vector<std::vector<double>>(variants.size()), {}};
  std::vector<Model> models;
  std::vector<AdamWState> states(variants.size());
  for (auto v : variants) {
    SwinConfig s = base.swin;
    s.placement = v;
    s.seed = base.seed;
    models.push_back(init_model(s, base.task, data.categories.size()));
  }
  const std::size_t n = data.train_samples.size();
  for (std::size_t it = 0; it < iters; ++it) {
    std::vector<const Sample*> batch;
    for (auto i : batch_indices(n, base.batch_size, base.seed, it)) batch.push_back(&data.train_samples[i]);
    for (std::size_t k = 0; k < variants.size(); ++k) {
      const std::size_t v = (k + it) % variants.size();
      const auto t0 = std::chrono::steady_clock::now();
      train_step(models[v], states[v], base.optim, batch, it);
      res.seconds[v].push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
  }
  for (const auto& s : res.seconds) res.timing.push_back(summarize_timing(s));
  return res;
}

}  // namespace cbamswin
