#pragma once

// JSON forms of the model and training configurations.
//
// Model config (all keys optional; "preset" is applied first):
//   {"preset": "nano"|"tiny", "embed_dim": 16, "depths": [2,2,2,2],
//    "num_heads": [1,2,4,8], "window_size": 2, "mlp_ratio": 4.0,
//    "placement": "none"|"model"|"stage"|"block", "cbam_reduction": 4,
//    "patch_size": 4, "input_size": [32, 32], "seed": 0,
//    "relative_position_bias": true}
//
// Training config:
//   {"swin": {...model config...}, "task": "classification"|"localization",
//    "lr": 1e-4, "weight_decay": 0.05, "betas": [0.9, 0.999], "eps": 1e-8,
//    "epochs": 1, "iterations": 200, "batch_size": 8, "seed": 0,
//    "val_fraction": 0.2,
//    "dataset": {"synthetic": {...}} | {"coco_path": "train.json", "image_root": "."},
//    "timing_log_path": "timing.csv", "checkpoint_path": "checkpoint.json"}
//
// A file holding only model keys is read as a training config with defaults.
// Unknown keys are rejected.

#include <optional>
#include <string>

#include <json.hpp>

#include "cbamswin/adamw.hpp"
#include "cbamswin/head.hpp"
#include "cbamswin/synthetic.hpp"

namespace cbamswin {

namespace detail {
template <class T>
T json_get(const nlohmann::json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError("config key '" + key + "' has the wrong type");
  }
}

template <std::size_t N>
std::array<std::size_t, N> json_array(const nlohmann::json& v, const std::string& key) {
  if (!v.is_array() || v.size() != N) throw ParseError("config key '" + key + "' needs " + std::to_string(N) + " entries");
  std::array<std::size_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = json_get<std::size_t>(v[i], key);
  return out;
}
}  // namespace detail

inline nlohmann::json to_json(const SwinConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"depths", c.depths},
          {"num_heads", c.num_heads},
          {"window_size", c.window_size},
          {"mlp_ratio", c.mlp_ratio},
          {"placement", to_string(c.placement)},
          {"cbam_reduction", c.cbam_reduction},
          {"patch_size", c.patch_size},
          {"input_size", c.input_size},
          {"seed", c.seed},
          {"relative_position_bias", c.relative_position_bias}};
}

inline SwinConfig swin_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("model config must be a JSON object");
  using detail::json_get;
  SwinConfig c;
  if (j.contains("preset")) {
    const auto preset = json_get<std::string>(j.at("preset"), "preset");
    if (preset == "nano") c = SwinConfig::nano();
    else if (preset == "tiny") c = SwinConfig::tiny();
    else throw InvalidParam("unknown preset '" + preset + "' (expected nano|tiny)");
  }
  for (const auto& [k, v] : j.items()) {
    if (k == "preset") continue;
    else if (k == "embed_dim") c.embed_dim = json_get<std::size_t>(v, k);
    else if (k == "depths") c.depths = detail::json_array<kNumStages>(v, k);
    else if (k == "num_heads") c.num_heads = detail::json_array<kNumStages>(v, k);
    else if (k == "window_size") c.window_size = json_get<std::size_t>(v, k);
    else if (k == "mlp_ratio") c.mlp_ratio = json_get<double>(v, k);
    else if (k == "placement") c.placement = placement_from_string(json_get<std::string>(v, k));
    else if (k == "cbam_reduction") c.cbam_reduction = json_get<std::size_t>(v, k);
    else if (k == "patch_size") c.patch_size = json_get<std::size_t>(v, k);
    else if (k == "input_size") c.input_size = detail::json_array<2>(v, k);
    else if (k == "seed") c.seed = json_get<std::uint64_t>(v, k);
    else if (k == "relative_position_bias") c.relative_position_bias = json_get<bool>(v, k);
    else throw ParseError("unknown model config key '" + k + "'");
  }
  c.validate();
  return c;
}

struct DatasetSource {
  std::optional<SyntheticSpec> synthetic;  // used when coco_path is empty
  std::string coco_path;
  std::string image_root;  // defaults to the directory of coco_path
};

struct TrainConfig {
  SwinConfig swin = SwinConfig::nano();
  HeadTask task = HeadTask::Classification;
  AdamWHyper optim{1e-4, 0.9, 0.999, 1e-8, 0.05};
  std::size_t epochs = 1;
  std::size_t iterations = 200;  // when nonzero, overrides epochs
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  DatasetSource dataset{SyntheticSpec{}, "", ""};
  std::string timing_log_path = "timing.csv";
  std::string checkpoint_path = "checkpoint.json";

  void validate() const {
    swin.validate();
    optim.validate();
    if (epochs == 0) throw InvalidParam("epochs must be at least 1");
    if (batch_size == 0) throw InvalidParam("batch_size must be at least 1");
    if (!(val_fraction > 0 && val_fraction < 1)) throw InvalidParam("val_fraction must lie in (0, 1)");
    if (dataset.coco_path.empty() && !dataset.synthetic) throw InvalidParam("config names no dataset");
    if (dataset.synthetic) dataset.synthetic->validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json ds;
  if (!c.dataset.coco_path.empty()) {
    ds = {{"coco_path", c.dataset.coco_path}, {"image_root", c.dataset.image_root}};
  } else {
    ds = {{"synthetic", to_json(*c.dataset.synthetic)}};
  }
  return {{"swin", to_json(c.swin)},
          {"task", to_string(c.task)},
          {"lr", c.optim.lr},
          {"weight_decay", c.optim.weight_decay},
          {"betas", {c.optim.beta1, c.optim.beta2}},
          {"eps", c.optim.eps},
          {"epochs", c.epochs},
          {"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"val_fraction", c.val_fraction},
          {"dataset", ds},
          {"timing_log_path", c.timing_log_path},
          {"checkpoint_path", c.checkpoint_path}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("training config must be a JSON object");
  using detail::json_get;
  static const std::vector<std::string> train_keys{
      "swin",       "task", "lr",           "weight_decay", "betas",           "eps",            "epochs",
      "iterations", "batch_size", "seed",   "val_fraction", "dataset",         "timing_log_path", "checkpoint_path"};
  const bool bare_model = !j.empty() && std::none_of(train_keys.begin(), train_keys.end(), [&](const std::string& k) {
    return k != "seed" && j.contains(k);
  });
  TrainConfig c;
  if (bare_model) {
    c.swin = swin_config_from_json(j);
    c.seed = c.swin.seed;
    c.validate();
    return c;
  }
  for (const auto& [k, v] : j.items()) {
    if (k == "swin") c.swin = swin_config_from_json(v);
    else if (k == "task") c.task = head_task_from_string(json_get<std::string>(v, k));
    else if (k == "lr") c.optim.lr = json_get<double>(v, k);
    else if (k == "weight_decay") c.optim.weight_decay = json_get<double>(v, k);
    else if (k == "betas") {
      if (!v.is_array() || v.size() != 2) throw ParseError("config key 'betas' needs 2 entries");
      c.optim.beta1 = json_get<double>(v[0], k);
      c.optim.beta2 = json_get<double>(v[1], k);
    } else if (k == "eps") c.optim.eps = json_get<double>(v, k);
    else if (k == "epochs") c.epochs = json_get<std::size_t>(v, k);
    else if (k == "iterations") c.iterations = json_get<std::size_t>(v, k);
    else if (k == "batch_size") c.batch_size = json_get<std::size_t>(v, k);
    else if (k == "seed") c.seed = json_get<std::uint64_t>(v, k);
    else if (k == "val_fraction") c.val_fraction = json_get<double>(v, k);
    else if (k == "timing_log_path") c.timing_log_path = json_get<std::string>(v, k);
    else if (k == "checkpoint_path") c.checkpoint_path = json_get<std::string>(v, k);
    else if (k == "dataset") {
      if (!v.is_object()) throw ParseError("config key 'dataset' must be an object");
      c.dataset = {};
      for (const auto& [dk, dv] : v.items()) {
        if (dk == "synthetic") c.dataset.synthetic = synthetic_spec_from_json(dv);
        else if (dk == "coco_path") c.dataset.coco_path = json_get<std::string>(dv, dk);
        else if (dk == "image_root") c.dataset.image_root = json_get<std::string>(dv, dk);
        else throw ParseError("unknown dataset key '" + dk + "'");
      }
    } else {
      throw ParseError("unknown training config key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::string& path) { return train_config_from_json(read_json_file(path)); }

}  // namespace cbamswin
