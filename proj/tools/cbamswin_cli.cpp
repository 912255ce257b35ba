// cbamswin command-line front end.
//
// Exit codes: 0 success, 1 invalid input (bad arguments, documents, shapes or
// parameters), 2 failure while running valid work (I/O, non-finite loss, a
// failing gradient check).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "cbamswin/config.hpp"
#include "cbamswin/enhance.hpp"
#include "cbamswin/gradcheck_suite.hpp"
#include "cbamswin/planner.hpp"
#include "cbamswin/stats.hpp"
#include "cbamswin/train.hpp"

namespace fs = std::filesystem;
using namespace cbamswin;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path out_path(const std::string& dir, const std::string& name) {
  fs::create_directories(dir);
  return fs::path(dir) / name;
}

std::ofstream open_out(const std::string& dir, const std::string& name) {
  const auto p = out_path(dir, name);
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw InvalidParam("bad seed '" + item + "'");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw InvalidParam("no seeds given");
  return seeds;
}

std::vector<CbamPlacement> parse_variants(const std::string& text) {
  if (text.empty() || text == "all") return all_placements();
  std::vector<CbamPlacement> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(placement_from_string(item));
  return out;
}

void write_report(const MetricsReport& rep, const std::vector<CategoryStats>& stats, const std::string& dir,
                  const std::string& label) {
  write_json_file(to_json(rep), out_path(dir, "metrics.json").string());
  auto csv = open_out(dir, "metrics.csv");
  write_metrics_csv(rep, csv);
  auto sized = open_out(dir, "size_ordered.csv");
  write_size_ordered_csv({{label, rep}}, stats, sized);
}

void print_report(const MetricsReport& rep) {
  std::cout << std::fixed << std::setprecision(4) << "mAP50 " << rep.map50 << "  mAP75 " << rep.map75 << "  mAR100 "
            << rep.mar100 << "\n";
  for (const auto& c : rep.per_category) {
    std::cout << "  " << std::left << std::setw(16) << c.name << std::right << " gt " << std::setw(5) << c.num_gt
              << "  ap50 " << c.ap50() << "  ap75 " << c.ap75() << "  ar " << c.ar << "\n";
  }
  std::cout.unsetf(std::ios::floatfield);
}

// ---------------------------------------------------------------------------

int cmd_stats(const std::string& coco, const std::string& out) {
  const Dataset ds = load_coco(coco);
  const auto stats = category_stats(ds);
  auto csv = open_out(out, "stats.csv");
  write_stats_csv(stats, csv);
  std::cout << ds.images.size() << " images, " << ds.instance_count() << " instances\n";
  write_stats_csv(stats, std::cout);
  return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out) {
  SyntheticSpec spec;
  if (!spec_path.empty()) spec = synthetic_spec_from_json(read_json_file(spec_path));
  spec.validate();
  const Dataset ds = generate_synthetic(spec);
  save_dataset(ds, out);
  std::cout << "wrote " << ds.images.size() << " images, " << ds.instance_count() << " instances to "
            << (fs::path(out) / "annotations.json").string() << "\n";
  return 0;
}

struct PreprocessArgs {
  std::string coco, image_root, enhance, targets;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
};

int cmd_preprocess(const PreprocessArgs& a, const std::string& out) {
  Dataset ds = load_coco(a.coco);
  load_pixels(ds, a.image_root.empty() ? fs::path(a.coco).parent_path().string() : a.image_root);
  if (!a.enhance.empty() && a.enhance != "none") {
    const auto method = enhance_method_from_string(a.enhance);
    for (auto& im : ds.images) im.pixels = enhance(im.pixels, method);
  }
  auto [train, val] = split_train_val(ds, a.train_fraction, a.seed);
  nlohmann::json plans = nlohmann::json::object();
  if (!a.targets.empty()) {
    const auto targets = parse_targets(read_json_file(a.targets), ds);
    auto [train_plan, train_aug] = plan_and_execute_augmentation(train, targets.train, a.seed);
    train = std::move(train_aug);
    plans["train"] = to_json(train_plan);
    if (!targets.val.empty()) {
      auto [val_plan, val_aug] = plan_and_execute_augmentation(val, targets.val, a.seed + 1);
      val = std::move(val_aug);
      plans["val"] = to_json(val_plan);
    }
  }
  save_dataset(train, out_path(out, "train").string());
  save_dataset(val, out_path(out, "val").string());
  write_json_file(plans, out_path(out, "augment_plan.json").string());
  for (const auto& [name, part] : {std::pair<std::string, const Dataset*>{"train", &train}, {"val", &val}}) {
    std::ostringstream quiet;
    auto csv = open_out(out, "stats_" + name + ".csv");
    write_stats_csv(category_stats(*part, &quiet), csv);
    std::cout << name << ": " << part->images.size() << " images, " << part->instance_count() << " instances\n";
  }
  return 0;
}

void write_split_metrics(const Model& model, const PreparedData& d, const std::string& out) {
  if (model.head.task == HeadTask::Localization) {
    auto rep = evaluate(predict_detections(model, d.val), d.val);
    std::ostringstream quiet;
    write_report(rep, category_stats(d.val, &quiet), out, to_string(model.swin.placement));
    print_report(rep);
  } else {
    const double acc = classification_accuracy(model, d.val_samples);
    write_json_file({{"task", "classification"}, {"val_accuracy", acc}, {"val_images", d.val_samples.size()}},
                    out_path(out, "metrics.json").string());
    auto csv = open_out(out, "metrics.csv");
    csv << "split,images,accuracy\nval," << d.val_samples.size() << ',' << format_real(acc) << "\n";
    std::cout << "val accuracy " << acc << "\n";
  }
}

int cmd_train(const std::string& config, const std::string& resume, std::size_t stop_after, const std::string& out) {
  const TrainConfig cfg = load_train_config(config);
  const PreparedData d = prepare_data(cfg);
  std::optional<Checkpoint> ck;
  TrainOptions opt;
  opt.out_dir = out;
  opt.log = &std::cout;
  opt.stop_after = stop_after;
  if (!resume.empty()) {
    ck = load_checkpoint(resume);
    opt.resume = &*ck;
  }
  std::cout << "training " << to_string(cfg.swin.placement) << " (" << to_string(cfg.task) << ") on "
            << d.train_samples.size() << " images, single-threaded\n";
  auto r = train(cfg, d, opt);
  std::cout << "iter time " << r.timing.mean << " +- " << r.timing.std << " s over " << r.timing.samples
            << " iterations after warmup\n";
  write_split_metrics(r.state.model, d, out);
  return 0;
}

Dataset fitted_dataset(const std::string& coco, const std::string& root, const SwinConfig& swin) {
  Dataset ds = load_coco(coco);
  load_pixels(ds, root.empty() ? fs::path(coco).parent_path().string() : root);
  for (auto& im : ds.images) im = fit_to_input(im, swin.input_size[1], swin.input_size[0]);
  return ds;
}

int cmd_eval(const std::string& checkpoint, const std::string& dets_path, const std::string& dataset,
             const std::string& image_root, const std::string& out) {
  if (checkpoint.empty() && (dets_path.empty() || dataset.empty())) {
    throw InvalidParam("eval needs --checkpoint unless both --dets and --dataset are given");
  }
  std::optional<Checkpoint> ck;
  if (!checkpoint.empty()) ck = load_checkpoint(checkpoint);
  Dataset gt;
  if (!dataset.empty()) {
    if (dets_path.empty()) {
      gt = fitted_dataset(dataset, image_root, ck->config.swin);
    } else {
      gt = load_coco(dataset);
    }
  } else {
    gt = prepare_data(ck->config).val;
  }
  std::vector<Detection> dets;
  if (!dets_path.empty()) {
    dets = parse_detections(read_json_file(dets_path));
  } else {
    dets = predict_detections(ck->model, gt);
    write_json_file(to_json(dets), out_path(out, "detections.json").string());
  }
  const auto rep = evaluate(dets, gt);
  std::ostringstream quiet;
  write_report(rep, category_stats(gt, &quiet), out, ck ? to_string(ck->config.swin.placement) : "detections");
  print_report(rep);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& out) {
  const auto r = run_gradient_suite(seed);
  auto csv = open_out(out, "gradcheck.csv");
  csv << "case,coords,max_rel_err,passed\n";
  for (const auto& c : r.cases) {
    csv << c.name << ',' << c.coords << ',' << format_real(c.max_rel_err) << ',' << (c.passed ? 1 : 0) << "\n";
    std::cout << (c.passed ? "ok   " : "FAIL ") << std::left << std::setw(34) << c.name << std::right
              << std::scientific << std::setprecision(3) << c.max_rel_err << "  (" << c.coords << " coords)\n";
  }
  std::cout.unsetf(std::ios::floatfield);
  std::cout << r.cases.size() << " cases, worst " << r.worst() << ", tolerance " << kGradTolerance << ", "
            << r.seconds << " s\n";
  if (!r.passed()) throw RuntimeFailure("gradient check failed");
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& seeds, const std::string& variants, const std::string& out) {
  const TrainConfig cfg = load_train_config(config);
  const auto res = run_ablation(cfg, parse_variants(variants), parse_seeds(seeds), &std::cout);
  auto table = open_out(out, "ablation.csv");
  write_ablation_csv(res, table);
  auto runs = open_out(out, "ablation_runs.csv");
  write_ablation_runs_csv(res, runs);
  auto classes = open_out(out, "size_class.csv");
  write_size_class_csv(res, classes);
  auto timing = open_out(out, "timing.csv");
  timing << "variant,iter_time_mean,iter_time_std,samples\n";
  nlohmann::json metrics = nlohmann::json::object();
  std::vector<std::pair<std::string, MetricsReport>> by_variant;
  auto csv = open_out(out, "metrics.csv");
  csv << "variant,category,num_gt,ap50,ap75,ar100\n";
  for (const auto& row : res.rows) {
    const auto name = to_string(row.variant);
    timing << name << ',' << format_real(row.timing.mean) << ',' << format_real(row.timing.std) << ','
           << row.timing.samples << "\n";
    metrics[name] = to_json(row.mean_report);
    by_variant.emplace_back(name, row.mean_report);
    for (const auto& c : row.mean_report.per_category) {
      csv << name << ',' << c.name << ',' << c.num_gt << ',' << format_real(c.ap50()) << ',' << format_real(c.ap75())
          << ',' << format_real(c.ar) << "\n";
    }
    csv << name << ",all,," << format_real(row.map50) << ',' << format_real(row.map75) << ','
        << format_real(row.ar100) << "\n";
  }
  write_json_file(metrics, out_path(out, "metrics.json").string());
  auto sized = open_out(out, "size_ordered.csv");
  write_size_ordered_csv(by_variant, res.val_stats, sized);
  write_ablation_csv(res, std::cout);
  return 0;
}

int cmd_bench(const std::string& config, std::size_t iters, const std::string& variants, const std::string& out) {
  const TrainConfig cfg = load_train_config(config);
  const PreparedData d = prepare_data(cfg);
  const auto res = bench(cfg, parse_variants(variants), iters, d);
  auto timing = open_out(out, "timing.csv");
  timing << "variant,iter_time_mean,iter_time_std,samples\n";
  double base = 0;
  for (std::size_t k = 0; k < res.variants.size(); ++k)
    if (res.variants[k] == CbamPlacement::None) base = res.timing[k].mean;
  for (std::size_t k = 0; k < res.variants.size(); ++k) {
    const auto& t = res.timing[k];
    const auto name = to_string(res.variants[k]);
    timing << name << ',' << format_real(t.mean) << ',' << format_real(t.std) << ',' << t.samples << "\n";
    std::cout << std::left << std::setw(6) << name << std::right << std::fixed << std::setprecision(4) << " " << t.mean
              << " +- " << t.std << " s/iter";
    if (base > 0) std::cout << "  (" << std::setprecision(3) << t.mean / base << "x none)";
    std::cout << "\n";
  }
  auto raw = open_out(out, "timing_iterations.csv");
  raw << "variant,iteration,seconds\n";
  for (std::size_t k = 0; k < res.variants.size(); ++k)
    for (std::size_t i = 0; i < res.seconds[k].size(); ++i)
      raw << to_string(res.variants[k]) << ',' << i + 1 << ',' << format_real(res.seconds[k][i]) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CBAM-augmented Swin backbone: data tools, training, evaluation and ablation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string out = "out";
  app.add_option("--out", out, "Output directory")->capture_default_str();

  std::string coco;
  auto* stats = app.add_subcommand("stats", "Per-category size statistics of a COCO annotation file");
  stats->add_option("coco", coco, "COCO json")->required()->check(CLI::ExistingFile);

  std::string spec;
  auto* synth = app.add_subcommand("synth", "Write the seeded synthetic defect set as a COCO dataset");
  synth->add_option("--spec", spec, "Synthetic spec (json); defaults when omitted")->check(CLI::ExistingFile);

  PreprocessArgs pre;
  auto* preprocess = app.add_subcommand("preprocess", "Enhance, split and augment a dataset");
  preprocess->add_option("coco", pre.coco, "COCO json")->required()->check(CLI::ExistingFile);
  preprocess->add_option("--image-root", pre.image_root, "Image directory (default: next to the json)");
  preprocess->add_option("--enhance", pre.enhance, "he|ahe|cet|msrcp|none");
  preprocess->add_option("--augment-plan", pre.targets, "Per-category image targets (json)")->check(CLI::ExistingFile);
  preprocess->add_option("--seed", pre.seed, "Seed for split and augmentation")->capture_default_str();
  preprocess->add_option("--train-fraction", pre.train_fraction, "Training share of images")->capture_default_str();

  std::string config, resume;
  std::size_t stop_after = 0;
  auto* train_cmd = app.add_subcommand("train", "Train one model");
  train_cmd->add_option("--config", config, "Training config (json)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train_cmd->add_option("--stop-after", stop_after, "Stop once this many iterations are complete");

  std::string checkpoint, dets, dataset, image_root;
  auto* eval = app.add_subcommand("eval", "Detection metrics for a checkpoint or a detections file");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint json")->check(CLI::ExistingFile);
  eval->add_option("--dets", dets, "Detections json (COCO results format)")->check(CLI::ExistingFile);
  eval->add_option("--dataset", dataset, "Ground-truth COCO json")->check(CLI::ExistingFile);
  eval->add_option("--image-root", image_root, "Image directory for --dataset");

  std::uint64_t grad_seed = 20240611;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--seed", grad_seed, "Seed for the random inputs")->capture_default_str();

  std::string seeds = "1,2,3", variants = "all";
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate every attention placement");
  ablate->add_option("--config", config, "Base training config (json)")->required()->check(CLI::ExistingFile);
  ablate->add_option("--seeds", seeds, "Comma-separated seeds")->capture_default_str();
  ablate->add_option("--variants", variants, "Comma-separated placements or 'all'")->capture_default_str();

  std::size_t iters = 50;
  auto* bench_cmd = app.add_subcommand("bench", "Interleaved iteration timing of the placements");
  bench_cmd->add_option("--config", config, "Training config (json)")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--iters", iters, "Timed iterations per variant")->capture_default_str();
  bench_cmd->add_option("--variants", variants, "Comma-separated placements or 'all'")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*stats) return cmd_stats(coco, out);
    if (*synth) return cmd_synth(spec, out);
    if (*preprocess) return cmd_preprocess(pre, out);
    if (*train_cmd) return cmd_train(config, resume, stop_after, out);
    if (*eval) return cmd_eval(checkpoint, dets, dataset, image_root, out);
    if (*gradcheck) return cmd_gradcheck(grad_seed, out);
    if (*ablate) return cmd_ablate(config, seeds, variants, out);
    if (*bench_cmd) return cmd_bench(config, iters, variants, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.is_validation() ? kExitValidation : kExitRuntime;
  } catch (const RuntimeFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}
