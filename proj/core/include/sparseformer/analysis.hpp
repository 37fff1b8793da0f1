#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sparseformer/config.hpp"
#include "sparseformer/log.hpp"
#include "sparseformer/tensor.hpp"

namespace spf {

// Analytic cost model in multiply-accumulates. Components cover the dominant
// terms; the tiny per-stage RoI/offset generation layers (N*d*(2P+4) MACs)
// are outside the model. Every latent component is independent of the input
// resolution by construction; only early_conv scales with H*W.
struct FlopReport {
  std::uint64_t early_conv = 0;
  std::uint64_t sampling = 0;
  std::uint64_t decode = 0;
  std::uint64_t attention = 0;
  std::uint64_t ffn = 0;
  std::uint64_t bridge = 0;
  std::uint64_t classifier = 0;
  int height = 0;
  int width = 0;

  std::uint64_t total() const {
    return early_conv + sampling + decode + attention + ffn + bridge + classifier;
  }
  static const std::array<const char*, 7>& component_names();
  std::uint64_t component(std::size_t i) const;
  std::string to_csv() const;  // "component,macs" rows plus total
};

// Per-stage closed forms, also exposed for direct checking. The bilinear
// sampling constant is 8 MACs per point per channel: four corner weights
// applied in a fused multiply-add plus the weight arithmetic, amortized.
constexpr std::uint64_t kBilinearMacsPerPoint = 8;

std::uint64_t sampling_macs_per_stage(int tokens, int points, int channels);
std::uint64_t decode_macs_per_stage(int tokens, int points, int channels, int dim);
std::uint64_t attention_macs_per_stage(int tokens, int dim);
std::uint64_t ffn_macs_per_stage(int tokens, int dim, double expansion);

FlopReport flop_count(const ModelConfig& cfg, int height, int width);

// ---------------------------------------------------------------------------
// sampling-density map: each cell counts the points within Euclidean radius r
// of its center, in normalized coordinates (top-hat kernel)

struct DensityMap {
  int rows = 0;
  int cols = 0;
  double radius = 0.0;
  int stage = 0;
  std::vector<double> cells;  // row-major [rows x cols]

  double mass() const;
  double max_value() const;
  double mean_value() const;
};

DensityMap density_map_xy(const double* xy, std::size_t n_points, int rows, int cols,
                          double radius, int stage);

template <typename T>
DensityMap density_map(const Tensor<T>& points, int rows, int cols, double radius,
                       int stage = 0) {
  if (points.ndim() != 3 || points.dim(2) < 2) {
    throw DimError("density_map expects [N x P x D>=2] points, got " + shape_str(points.shape()));
  }
  if (radius <= 0.0) throw ConfigError("density radius must be positive");
  const std::size_t n = static_cast<std::size_t>(points.dim(0)) * points.dim(1);
  const int d = points.dim(2);
  std::vector<double> xy(n * 2);
  const T* pp = points.data();
  for (std::size_t i = 0; i < n; ++i) {
    xy[2 * i] = static_cast<double>(pp[i * d]);
    xy[2 * i + 1] = static_cast<double>(pp[i * d + 1]);
  }
  return density_map_xy(xy.data(), n, rows, cols, radius, stage);
}

// Fraction of sampling points inside a normalized (x, y, w, h) box.
double focus_score_xy(const double* xy, std::size_t n_points, const std::array<double, 4>& box);

template <typename T>
double focus_score(const Tensor<T>& points, const std::array<double, 4>& box) {
  if (points.ndim() != 3 || points.dim(2) < 2) {
    throw DimError("focus_score expects [N x P x D>=2] points, got " + shape_str(points.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(points.dim(0)) * points.dim(1);
  const int d = points.dim(2);
  std::vector<double> xy(n * 2);
  const T* pp = points.data();
  for (std::size_t i = 0; i < n; ++i) {
    xy[2 * i] = static_cast<double>(pp[i * d]);
    xy[2 * i + 1] = static_cast<double>(pp[i * d + 1]);
  }
  return focus_score_xy(xy.data(), n, box);
}

// 8-bit binary PGM (P5). Values scale by 255/max when the map maximum
// exceeds 255; the applied scale lands in "<path>.scale.txt".
void write_pgm(const std::string& path, const DensityMap& map);

// ---------------------------------------------------------------------------
// forward-only throughput measurement

struct BenchReport {
  double images_per_sec = 0.0;  // median over timed repeats
  double p50_ms = 0.0;          // per-image latency percentiles
  double p90_ms = 0.0;
  int threads = 1;
  int resolution = 0;
  int batch = 0;
  int repeats = 0;

  std::string to_csv() const;
};

BenchReport throughput_bench(const ModelConfig& cfg, int resolution, int batch, int repeats,
                             int threads = 1);

}  // namespace spf
