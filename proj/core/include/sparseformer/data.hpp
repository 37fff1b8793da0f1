#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "sparseformer/config.hpp"
#include "sparseformer/tensor.hpp"

namespace spf {

struct Sample {
  Tensor<float> image;  // [3 x H x W], standardized
  int label = 0;
  bool has_box = false;
  std::array<float, 4> box{};  // (x, y, w, h) normalized; evaluation-only metadata
};

// Pure datasets: get(i) returns bitwise-identical samples on every call.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual Sample get(std::size_t index) const = 0;
};

// CIFAR-10 binary files: records of 3073 bytes, 1 label byte followed by
// 32x32 R, G, B planes. Pixels scale to [0,1] and standardize with the fixed
// per-channel constants from the config.
class CifarDataset : public Dataset {
 public:
  CifarDataset(const std::vector<std::string>& files, const CifarNorm& norm);
  std::size_t size() const override { return records_.size() / kRecordBytes; }
  Sample get(std::size_t index) const override;

  static constexpr std::size_t kRecordBytes = 3073;

 private:
  std::vector<unsigned char> records_;
  CifarNorm norm_;
};

// Deterministic synthetic task: a noise canvas with one equal-area triangle
// whose orientation (up/down/left/right) is the label. The class is carried
// only by the patch geometry, so telling classes apart requires looking at
// the patch rather than at global statistics.
Sample synth_patch_sample(const SyntheticSpec& spec, std::uint64_t index);

class SyntheticPatchDataset : public Dataset {
 public:
  SyntheticPatchDataset(const SyntheticSpec& spec, std::size_t count,
                        std::uint64_t index_offset = 0)
      : spec_(spec), count_(count), offset_(index_offset) {
    spec_.validate();
  }
  std::size_t size() const override { return count_; }
  Sample get(std::size_t index) const override {
    return synth_patch_sample(spec_, offset_ + index);
  }

 private:
  SyntheticSpec spec_;
  std::size_t count_;
  std::uint64_t offset_;
};

std::vector<std::string> cifar_train_files(const std::string& dir);
std::vector<std::string> cifar_test_files(const std::string& dir);

}  // namespace spf
