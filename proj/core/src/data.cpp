#include "sparseformer/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sparseformer/rng.hpp"

namespace spf {

CifarDataset::CifarDataset(const std::vector<std::string>& files, const CifarNorm& norm)
    : norm_(norm) {
  if (files.empty()) throw DataError("no CIFAR-10 files given");
  for (const auto& f : files) {
    std::ifstream is(f, std::ios::binary | std::ios::ate);
    if (!is) throw FormatError("cannot open CIFAR-10 file: " + f);
    const auto bytes = static_cast<std::size_t>(is.tellg());
    if (bytes == 0 || bytes % kRecordBytes != 0) {
      throw FormatError("CIFAR-10 file size " + std::to_string(bytes) +
                        " is not a multiple of 3073: " + f);
    }
    is.seekg(0);
    const std::size_t old = records_.size();
    records_.resize(old + bytes);
    is.read(reinterpret_cast<char*>(records_.data() + old), static_cast<std::streamsize>(bytes));
    if (!is) throw FormatError("short read on CIFAR-10 file: " + f);
  }
  for (std::size_t i = 0; i < records_.size(); i += kRecordBytes) {
    if (records_[i] > 9) {
      throw DataError("CIFAR-10 label " + std::to_string(records_[i]) + " out of range at record " +
                      std::to_string(i / kRecordBytes));
    }
  }
}

Sample CifarDataset::get(std::size_t index) const {
  if (index >= size()) throw DataError("CIFAR-10 index out of range");
  const unsigned char* rec = records_.data() + index * kRecordBytes;
  Sample s;
  s.label = rec[0];
  s.image = Tensor<float>({3, 32, 32});
  float* img = s.image.raw();
  for (int c = 0; c < 3; ++c) {
    const float mean = static_cast<float>(norm_.mean[static_cast<std::size_t>(c)]);
    const float inv_std = 1.0f / static_cast<float>(norm_.stddev[static_cast<std::size_t>(c)]);
    const unsigned char* plane = rec + 1 + c * 1024;
    for (int i = 0; i < 1024; ++i) {
      img[c * 1024 + i] = (static_cast<float>(plane[i]) / 255.0f - mean) * inv_std;
    }
  }
  return s;
}

namespace {

// Class = stripe orientation inside the patch (horizontal, vertical, two
// diagonals). Duty cycle 1/2 keeps the lit area equal across classes, so
// global brightness carries no label information; only the patch's local
// texture does.
bool inside_stripes(int label, double u, double v, double periods) {
  double w;
  switch (label) {
    case 0: w = v; break;
    case 1: w = u; break;
    case 2: w = (u + v) * 0.7071067811865476; break;
    default: w = (u - v + 1.0) * 0.7071067811865476; break;
  }
  const double phase = w * periods;
  return phase - std::floor(phase) < 0.5;
}

}  // namespace

Sample synth_patch_sample(const SyntheticSpec& spec, std::uint64_t index) {
  RngStream rng(mix_seed(spec.seed, 0x70617463ULL, index));
  const int s = spec.canvas;
  Sample out;
  out.label = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.classes)));
  const int patch =
      spec.patch_min +
      static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.patch_max - spec.patch_min + 1)));
  const int x0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(s - patch + 1)));
  const int y0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(s - patch + 1)));

  out.image = Tensor<float>({3, s, s});
  float* img = out.image.raw();
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      img[c * plane + i] =
          static_cast<float>(0.5 + spec.noise * (2.0 * rng.next_uniform() - 1.0));
    }
  }
  const double periods = 2.0;
  for (int py = 0; py < patch; ++py) {
    for (int px = 0; px < patch; ++px) {
      const double u = (px + 0.5) / patch;
      const double v = (py + 0.5) / patch;
      const std::size_t at = static_cast<std::size_t>(y0 + py) * s + (x0 + px);
      const float value = inside_stripes(out.label, u, v, periods) ? 0.95f : 0.05f;
      for (int c = 0; c < 3; ++c) img[c * plane + at] = value;
    }
  }
  out.has_box = true;
  out.box = {static_cast<float>((x0 + 0.5 * patch) / s), static_cast<float>((y0 + 0.5 * patch) / s),
             static_cast<float>(static_cast<double>(patch) / s),
             static_cast<float>(static_cast<double>(patch) / s)};
  return out;
}

std::vector<std::string> cifar_train_files(const std::string& dir) {
  std::vector<std::string> files;
  for (int i = 1; i <= 5; ++i) {
    const auto path = std::filesystem::path(dir) / ("data_batch_" + std::to_string(i) + ".bin");
    files.push_back(path.string());
  }
  return files;
}

std::vector<std::string> cifar_test_files(const std::string& dir) {
  return {(std::filesystem::path(dir) / "test_batch.bin").string()};
}

}  // namespace spf
