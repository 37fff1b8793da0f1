#include "sparseformer/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace spf {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw ConfigError(where.empty() ? what : where + ": " + what);
}

void reject_unknown(const json& j, const std::string& where, const std::set<std::string>& known) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) fail(where, "unknown key '" + it.key() + "'");
  }
}

template <typename V>
void take(const json& j, const std::string& where, const char* key, V& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<V>();
  } catch (const json::exception&) {
    fail(where, std::string("bad value for '") + key + "'");
  }
}

void parse_video(const json& j, const std::string& where, ModelConfig& mc) {
  if (j.is_null()) {
    mc.video.reset();
    return;
  }
  if (!j.is_object()) fail(where, "must be an object");
  reject_unknown(j, where, {"inflation", "frames"});
  VideoConfig v;
  take(j, where, "inflation", v.inflation);
  take(j, where, "frames", v.frames);
  mc.video = v;
}

void parse_model(const json& j, ModelConfig& mc) {
  const std::string where = "model";
  if (!j.is_object()) fail(where, "must be an object");
  reject_unknown(j, where,
                 {"tokens", "points", "focusing_dim", "cortex_dim", "focusing_repeats",
                  "cortex_depth", "heads", "ffn_expansion", "early_channels", "drop_path",
                  "classes", "offset_stats", "video"});
  take(j, where, "tokens", mc.tokens);
  take(j, where, "points", mc.points);
  take(j, where, "focusing_dim", mc.focusing_dim);
  take(j, where, "cortex_dim", mc.cortex_dim);
  take(j, where, "focusing_repeats", mc.focusing_repeats);
  take(j, where, "cortex_depth", mc.cortex_depth);
  take(j, where, "heads", mc.heads);
  take(j, where, "ffn_expansion", mc.ffn_expansion);
  take(j, where, "early_channels", mc.early_channels);
  take(j, where, "drop_path", mc.drop_path);
  take(j, where, "classes", mc.classes);
  if (j.contains("offset_stats")) {
    const auto s = j.at("offset_stats").get<std::string>();
    if (s == "joint") {
      mc.offset_stats = OffsetStats::joint;
    } else if (s == "per_axis") {
      mc.offset_stats = OffsetStats::per_axis;
    } else {
      fail(where, "offset_stats must be 'joint' or 'per_axis'");
    }
  }
  if (j.contains("video")) parse_video(j.at("video"), where + ".video", mc);
}

void parse_synthetic(const json& j, SyntheticSpec& s) {
  const std::string where = "train.synthetic";
  if (!j.is_object()) fail(where, "must be an object");
  reject_unknown(j, where,
                 {"canvas", "classes", "patch_min", "patch_max", "noise", "seed", "train_count",
                  "test_count"});
  take(j, where, "canvas", s.canvas);
  take(j, where, "classes", s.classes);
  take(j, where, "patch_min", s.patch_min);
  take(j, where, "patch_max", s.patch_max);
  take(j, where, "noise", s.noise);
  take(j, where, "seed", s.seed);
  take(j, where, "train_count", s.train_count);
  take(j, where, "test_count", s.test_count);
}

void parse_cifar_norm(const json& j, CifarNorm& n) {
  const std::string where = "train.cifar";
  if (!j.is_object()) fail(where, "must be an object");
  reject_unknown(j, where, {"mean", "stddev"});
  take(j, where, "mean", n.mean);
  take(j, where, "stddev", n.stddev);
}

void parse_train(const json& j, TrainConfig& tc) {
  const std::string where = "train";
  if (!j.is_object()) fail(where, "must be an object");
  reject_unknown(j, where,
                 {"epochs", "batch_size", "base_lr", "weight_decay", "warmup_epochs", "schedule",
                  "ema_decay", "label_smoothing", "seed", "dataset", "augment", "grad_clip",
                  "decay_exclusions", "threads", "synthetic", "cifar"});
  take(j, where, "epochs", tc.epochs);
  take(j, where, "batch_size", tc.batch_size);
  take(j, where, "base_lr", tc.base_lr);
  take(j, where, "weight_decay", tc.weight_decay);
  take(j, where, "warmup_epochs", tc.warmup_epochs);
  take(j, where, "schedule", tc.schedule);
  if (j.contains("ema_decay")) {
    if (j.at("ema_decay").is_null()) {
      tc.ema_decay = -1.0;
    } else {
      take(j, where, "ema_decay", tc.ema_decay);
      if (tc.ema_decay < 0.0) fail(where, "ema_decay must be in [0,1) or null");
    }
  }
  take(j, where, "label_smoothing", tc.label_smoothing);
  take(j, where, "seed", tc.seed);
  if (j.contains("dataset")) {
    const auto s = j.at("dataset").get<std::string>();
    if (s == "cifar10") {
      tc.dataset = DatasetKind::cifar10;
    } else if (s == "synthetic-patch") {
      tc.dataset = DatasetKind::synthetic_patch;
    } else {
      fail(where, "dataset must be 'cifar10' or 'synthetic-patch'");
    }
  }
  if (j.contains("augment")) {
    const auto s = j.at("augment").get<std::string>();
    if (s == "none") {
      tc.augment = AugmentKind::none;
    } else if (s == "flip-crop") {
      tc.augment = AugmentKind::flip_crop;
    } else {
      fail(where, "augment must be 'none' or 'flip-crop'");
    }
  }
  take(j, where, "grad_clip", tc.grad_clip);
  take(j, where, "decay_exclusions", tc.decay_exclusions);
  take(j, where, "threads", tc.threads);
  if (j.contains("synthetic")) parse_synthetic(j.at("synthetic"), tc.synthetic);
  if (j.contains("cifar")) parse_cifar_norm(j.at("cifar"), tc.cifar);
}

void parse_paths(const json& j, PathsConfig& p) {
  const std::string where = "paths";
  if (!j.is_object()) fail(where, "must be an object");
  reject_unknown(j, where, {"data", "checkpoints", "outputs"});
  take(j, where, "data", p.data);
  take(j, where, "checkpoints", p.checkpoints);
  take(j, where, "outputs", p.outputs);
}

// "--a.b.c=value" or "a.b.c=value" applied onto the JSON tree; values parse as
// JSON scalars when possible, otherwise as strings.
void apply_override(json& root, const std::string& spec) {
  std::string s = spec;
  if (s.rfind("--", 0) == 0) s = s.substr(2);
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) {
    fail("", "override '" + spec + "' must look like section.key=value");
  }
  const std::string path = s.substr(0, eq);
  const std::string value = s.substr(eq + 1);
  json* node = &root;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) fail("", "override '" + spec + "' has an empty path segment");
    parts.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  (*node)[parts.back()] = parsed;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, const std::vector<std::string>& overrides) {
  json j = json::parse(json_text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON");
  if (!j.is_object()) throw ConfigError("config root must be an object");
  for (const auto& o : overrides) apply_override(j, o);
  reject_unknown(j, "", {"task", "model", "train", "paths"});

  RunConfig rc;
  if (j.contains("task")) {
    const auto s = j.at("task").get<std::string>();
    if (s == "image") {
      rc.task = TaskKind::image;
    } else if (s == "video") {
      rc.task = TaskKind::video;
    } else {
      throw ConfigError("task must be 'image' or 'video'");
    }
  }
  if (j.contains("model")) parse_model(j.at("model"), rc.model);
  if (j.contains("train")) parse_train(j.at("train"), rc.train);
  if (j.contains("paths")) parse_paths(j.at("paths"), rc.paths);

  if (rc.task == TaskKind::video && !rc.model.video) {
    throw ConfigError("task 'video' requires model.video configuration");
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str(), overrides);
}

}  // namespace spf
