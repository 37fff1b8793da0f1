#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sparseformer/error.hpp"
#include "sparseformer/geometry.hpp"

namespace spf {

struct VideoConfig {
  int inflation = 1;  // temporal token replication factor
  int frames = 1;     // expected clip length
};

struct ModelConfig {
  int tokens = 49;            // latent tokens N (pre-inflation)
  int points = 36;            // sampling points per token P
  int focusing_dim = 256;     // focusing transformer width
  int cortex_dim = 512;       // cortex transformer width
  int focusing_repeats = 4;   // weight-shared focusing stages
  int cortex_depth = 8;       // cortex stages; only the first one samples
  int heads = 0;              // 0 = width/32 per transformer
  double ffn_expansion = 4.0;
  int early_channels = 96;    // feature channels produced by the stem
  double drop_path = 0.0;
  int classes = 10;
  OffsetStats offset_stats = OffsetStats::joint;
  std::optional<VideoConfig> video;

  int heads_for(int dim) const {
    int h = heads > 0 ? heads : std::max(1, dim / 32);
    if (heads > 0 && dim % h != 0) {
      throw ConfigError("width " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(h));
    }
    while (dim % h != 0) --h;
    return h;
  }

  // Latent token count after temporal inflation.
  int latent_tokens() const { return video ? tokens * video->inflation : tokens; }

  void validate() const {
    if (tokens < 1) throw ConfigError("tokens must be >= 1");
    if (points < 1) throw ConfigError("points must be >= 1");
    if (focusing_dim < 1 || cortex_dim < 1) throw ConfigError("widths must be >= 1");
    if (focusing_repeats < 1) throw ConfigError("focusing_repeats must be >= 1");
    if (cortex_depth < 1) throw ConfigError("cortex_depth must be >= 1");
    if (ffn_expansion <= 0.0) throw ConfigError("ffn_expansion must be positive");
    if (early_channels < 1) throw ConfigError("early_channels must be >= 1");
    if (drop_path < 0.0 || drop_path >= 1.0) throw ConfigError("drop_path must be in [0,1)");
    if (classes < 2) throw ConfigError("classes must be >= 2");
    heads_for(focusing_dim);
    heads_for(cortex_dim);
    if (video) {
      if (video->inflation < 1) throw ConfigError("video inflation must be >= 1");
      if (video->frames < 1) throw ConfigError("video frames must be >= 1");
    }
  }
};

struct SyntheticSpec {
  int canvas = 64;
  int classes = 4;
  int patch_min = 16;
  int patch_max = 28;
  double noise = 0.25;
  std::uint64_t seed = 0;
  int train_count = 3072;
  int test_count = 512;

  void validate() const {
    if (canvas < 8) throw ConfigError("synthetic canvas must be >= 8");
    if (classes < 2 || classes > 4) throw ConfigError("synthetic classes must be in [2,4]");
    if (patch_min < 4 || patch_max < patch_min || patch_max > canvas) {
      throw ConfigError("synthetic patch range invalid");
    }
    if (noise < 0.0 || noise > 0.5) throw ConfigError("synthetic noise must be in [0,0.5]");
    if (train_count < 1 || test_count < 1) throw ConfigError("synthetic counts must be >= 1");
  }
};

struct CifarNorm {
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> stddev{0.2470, 0.2435, 0.2616};
};

enum class DatasetKind { cifar10, synthetic_patch };
enum class AugmentKind { none, flip_crop };
enum class TaskKind { image, video };

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  int warmup_epochs = 1;
  std::string schedule = "cosine";
  double ema_decay = -1.0;  // < 0 disables the EMA shadow
  double label_smoothing = 0.0;
  std::uint64_t seed = 0;
  DatasetKind dataset = DatasetKind::synthetic_patch;
  AugmentKind augment = AugmentKind::none;
  double grad_clip = 0.0;  // 0 disables clipping
  bool decay_exclusions = true;
  int threads = 1;
  SyntheticSpec synthetic;
  CifarNorm cifar;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
    if (schedule != "cosine") throw ConfigError("unknown schedule: " + schedule);
    if (ema_decay >= 1.0) throw ConfigError("ema_decay must be < 1");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
      throw ConfigError("label_smoothing must be in [0,1)");
    }
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    synthetic.validate();
  }
};

struct PathsConfig {
  std::string data;
  std::string checkpoints = "outputs/checkpoints";
  std::string outputs = "outputs";
};

struct RunConfig {
  TaskKind task = TaskKind::image;
  ModelConfig model;
  TrainConfig train;
  PathsConfig paths;
};

// Strict JSON parsing: unknown keys are errors. Overrides are dotted
// "section.key=value" strings applied before validation.
RunConfig parse_run_config(const std::string& json_text,
                           const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides = {});

}  // namespace spf
