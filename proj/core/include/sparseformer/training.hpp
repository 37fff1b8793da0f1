#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sparseformer/checkpoint.hpp"
#include "sparseformer/config.hpp"
#include "sparseformer/data.hpp"
#include "sparseformer/model.hpp"
#include "sparseformer/train_ops.hpp"

namespace spf {

struct EpochMetrics {
  int epoch = 0;
  long long step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double acc1 = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  std::string checkpoint_path;
  std::string metrics_path;
};

// ---------------------------------------------------------------------------
// checkpoint <-> weights, EMA shadows stored under "ema/<name>"

template <typename T>
std::vector<NamedBlob> weights_to_blobs(const SparseFormerWeights<T>& w,
                                        const std::vector<Tensor<T>>* ema = nullptr) {
  std::vector<NamedBlob> blobs;
  blobs.reserve(w.params.size() * (ema ? 2 : 1));
  for (const auto& p : w.params) blobs.push_back(blob_from_tensor(p->name, p->value));
  if (ema) {
    for (std::size_t i = 0; i < w.params.size(); ++i) {
      blobs.push_back(blob_from_tensor("ema/" + w.params[i].name, (*ema)[i]));
    }
  }
  return blobs;
}

inline bool checkpoint_has_ema(const std::vector<NamedBlob>& blobs) {
  for (const auto& b : blobs) {
    if (b.name.rfind("ema/", 0) == 0) return true;
  }
  return false;
}

template <typename T>
void load_weights(SparseFormerWeights<T>& w, const std::vector<NamedBlob>& blobs,
                  bool use_ema = false) {
  if (use_ema && !checkpoint_has_ema(blobs)) {
    throw StateError("no EMA state in checkpoint");
  }
  for (auto& p : w.params) {
    const std::string want = use_ema ? "ema/" + p->name : p->name;
    const NamedBlob* found = nullptr;
    for (const auto& b : blobs) {
      if (b.name == want) {
        found = &b;
        break;
      }
    }
    if (!found) throw FormatError("checkpoint missing tensor '" + want + "'");
    if (static_cast<int>(found->dims.size()) != p->value.ndim()) {
      throw FormatError("checkpoint tensor '" + want + "' rank mismatch");
    }
    for (std::size_t i = 0; i < found->dims.size(); ++i) {
      if (static_cast<int>(found->dims[i]) != p->value.dim(static_cast<int>(i))) {
        throw FormatError("checkpoint tensor '" + want + "' shape mismatch");
      }
    }
    load_blob_into(*found, p->value);
  }
}

// ---------------------------------------------------------------------------

std::unique_ptr<Dataset> make_train_dataset(const TrainConfig& tc, const std::string& data_dir);
std::unique_ptr<Dataset> make_test_dataset(const TrainConfig& tc, const std::string& data_dir);

Tensor<float> augment_flip_crop(const Tensor<float>& image, RngStream& rng);

struct EvalResult {
  double loss = 0.0;
  double top1 = 0.0;
  std::size_t count = 0;
};

EvalResult evaluate(const SparseFormerWeights<float>& weights, const Dataset& ds,
                    std::size_t limit = 0);

// Runs the optimization loop, appends one CSV row per epoch
// (epoch,step,lr,loss,acc1) and rewrites the checkpoint after each completed
// epoch, so a non-finite loss aborts with the last good checkpoint intact.
// Deterministic under (config, seed) for a fixed thread count; thread counts
// only partition work, per-sample gradients are summed in sample order.
TrainResult train_loop(const ModelConfig& mc, const TrainConfig& tc, const PathsConfig& paths);

}  // namespace spf
