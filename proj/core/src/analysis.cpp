#include "sparseformer/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "sparseformer/model.hpp"

namespace spf {

const std::array<const char*, 7>& FlopReport::component_names() {
  static const std::array<const char*, 7> names = {
      "early_conv", "sampling", "decode", "attention", "ffn", "bridge", "classifier"};
  return names;
}

std::uint64_t FlopReport::component(std::size_t i) const {
  switch (i) {
    case 0: return early_conv;
    case 1: return sampling;
    case 2: return decode;
    case 3: return attention;
    case 4: return ffn;
    case 5: return bridge;
    default: return classifier;
  }
}

std::string FlopReport::to_csv() const {
  std::ostringstream os;
  os << "component,macs\n";
  for (std::size_t i = 0; i < 7; ++i) {
    os << component_names()[i] << ',' << component(i) << '\n';
  }
  os << "total," << total() << '\n';
  return os.str();
}

std::uint64_t sampling_macs_per_stage(int tokens, int points, int channels) {
  return static_cast<std::uint64_t>(tokens) * points * channels * kBilinearMacsPerPoint;
}

std::uint64_t decode_macs_per_stage(int tokens, int points, int channels, int dim) {
  const std::uint64_t n = static_cast<std::uint64_t>(tokens);
  const std::uint64_t p = static_cast<std::uint64_t>(points);
  const std::uint64_t c = static_cast<std::uint64_t>(channels);
  const std::uint64_t d = static_cast<std::uint64_t>(dim);
  const std::uint64_t hidden = std::max<std::uint64_t>(1, d / 4);
  const std::uint64_t generator = d * hidden + hidden * (c * c + p * p);
  return n * (generator + p * c * c + p * p * c + p * c * d);
}

std::uint64_t attention_macs_per_stage(int tokens, int dim) {
  const std::uint64_t n = static_cast<std::uint64_t>(tokens);
  const std::uint64_t d = static_cast<std::uint64_t>(dim);
  return 4 * n * d * d + 2 * n * n * d;
}

std::uint64_t ffn_macs_per_stage(int tokens, int dim, double expansion) {
  const std::uint64_t n = static_cast<std::uint64_t>(tokens);
  const std::uint64_t d = static_cast<std::uint64_t>(dim);
  const auto hidden = static_cast<std::uint64_t>(std::llround(expansion * dim));
  return 2 * n * d * std::max<std::uint64_t>(1, hidden);
}

FlopReport flop_count(const ModelConfig& cfg, int height, int width) {
  cfg.validate();
  if (height < 8 || width < 8) throw ConfigError("flop_count resolution must be >= 8");
  FlopReport r;
  r.height = height;
  r.width = width;
  const int n = cfg.latent_tokens();
  // stem: 7x7 stride-2 convolution over 3 input channels
  r.early_conv = static_cast<std::uint64_t>(height / 2) * (width / 2) * cfg.early_channels * 3 * 49;
  const int sampling_stages = cfg.focusing_repeats + 1;
  r.sampling = static_cast<std::uint64_t>(sampling_stages) *
               sampling_macs_per_stage(n, cfg.points, cfg.early_channels);
  r.decode = static_cast<std::uint64_t>(cfg.focusing_repeats) *
                 decode_macs_per_stage(n, cfg.points, cfg.early_channels, cfg.focusing_dim) +
             decode_macs_per_stage(n, cfg.points, cfg.early_channels, cfg.cortex_dim);
  r.attention = static_cast<std::uint64_t>(cfg.focusing_repeats) *
                    attention_macs_per_stage(n, cfg.focusing_dim) +
                static_cast<std::uint64_t>(cfg.cortex_depth) *
                    attention_macs_per_stage(n, cfg.cortex_dim);
  r.ffn = static_cast<std::uint64_t>(cfg.focusing_repeats) *
              ffn_macs_per_stage(n, cfg.focusing_dim, cfg.ffn_expansion) +
          static_cast<std::uint64_t>(cfg.cortex_depth) *
              ffn_macs_per_stage(n, cfg.cortex_dim, cfg.ffn_expansion);
  r.bridge = static_cast<std::uint64_t>(n) * cfg.focusing_dim * cfg.cortex_dim;
  r.classifier = static_cast<std::uint64_t>(cfg.cortex_dim) * cfg.classes;
  return r;
}

// ---------------------------------------------------------------------------

double DensityMap::mass() const {
  double s = 0.0;
  for (double v : cells) s += v;
  return s;
}

double DensityMap::max_value() const {
  double m = 0.0;
  for (double v : cells) m = std::max(m, v);
  return m;
}

double DensityMap::mean_value() const {
  return cells.empty() ? 0.0 : mass() / static_cast<double>(cells.size());
}

DensityMap density_map_xy(const double* xy, std::size_t n_points, int rows, int cols,
                          double radius, int stage) {
  if (rows < 1 || cols < 1) throw ConfigError("density grid extents must be >= 1");
  if (radius <= 0.0) throw ConfigError("density radius must be positive");
  DensityMap m;
  m.rows = rows;
  m.cols = cols;
  m.radius = radius;
  m.stage = stage;
  m.cells.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  const double r2 = radius * radius;
  for (int cy = 0; cy < rows; ++cy) {
    const double yc = (cy + 0.5) / rows;
    for (int cx = 0; cx < cols; ++cx) {
      const double xc = (cx + 0.5) / cols;
      double count = 0.0;
      for (std::size_t i = 0; i < n_points; ++i) {
        const double dx = xy[2 * i] - xc;
        const double dy = xy[2 * i + 1] - yc;
        if (dx * dx + dy * dy <= r2) count += 1.0;
      }
      m.cells[static_cast<std::size_t>(cy) * cols + cx] = count;
    }
  }
  return m;
}

double focus_score_xy(const double* xy, std::size_t n_points, const std::array<double, 4>& box) {
  if (n_points == 0) {
    log::warn("focus_score over an empty point set; defining score as 0");
    return 0.0;
  }
  const double x0 = box[0] - 0.5 * box[2], x1 = box[0] + 0.5 * box[2];
  const double y0 = box[1] - 0.5 * box[3], y1 = box[1] + 0.5 * box[3];
  std::size_t inside = 0;
  for (std::size_t i = 0; i < n_points; ++i) {
    const double x = xy[2 * i], y = xy[2 * i + 1];
    if (x >= x0 && x <= x1 && y >= y0 && y <= y1) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(n_points);
}

void write_pgm(const std::string& path, const DensityMap& map) {
  const double mx = map.max_value();
  const double scale = mx > 255.0 ? 255.0 / mx : 1.0;
  const int maxval = std::max(1, static_cast<int>(std::lround(std::min(mx, 255.0))));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open PGM for writing: " + path);
  os << "P5\n" << map.cols << ' ' << map.rows << '\n' << maxval << '\n';
  for (double v : map.cells) {
    const int q = std::min(255, static_cast<int>(std::lround(v * scale)));
    const unsigned char byte = static_cast<unsigned char>(std::max(0, q));
    os.write(reinterpret_cast<const char*>(&byte), 1);
  }
  if (!os) throw FormatError("write failure on PGM: " + path);
  std::ofstream sidecar(path + ".scale.txt", std::ios::trunc);
  sidecar << scale << '\n';
}

// ---------------------------------------------------------------------------

std::string BenchReport::to_csv() const {
  std::ostringstream os;
  os << "images_per_sec,p50_ms,p90_ms,threads,resolution,batch,repeats\n";
  os << images_per_sec << ',' << p50_ms << ',' << p90_ms << ',' << threads << ',' << resolution
     << ',' << batch << ',' << repeats << '\n';
  return os.str();
}

namespace {

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return 0.0;
  const double pos = q * (static_cast<double>(v.size()) - 1.0);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace

BenchReport throughput_bench(const ModelConfig& cfg, int resolution, int batch, int repeats,
                             int threads) {
  if (repeats < 3) throw ConfigError("bench repeats must be >= 3 (first is warmup)");
  if (batch < 1) throw ConfigError("bench batch must be >= 1");
  if (threads < 1) throw ConfigError("bench threads must be >= 1");
  auto weights = init_model<float>(cfg, 0);
  RngStream rng(mix_seed(7, 0x62656e63ULL));
  std::vector<Tensor<float>> inputs;
  inputs.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    Tensor<float> img({3, resolution, resolution});
    float* p = img.raw();
    for (long long j = 0; j < img.numel(); ++j) {
      p[j] = static_cast<float>(rng.next_uniform(-1.0, 1.0));
    }
    inputs.push_back(std::move(img));
  }

  std::vector<double> repeat_imgs_per_sec;
  std::vector<double> latencies_ms;
  for (int rep = 0; rep < repeats; ++rep) {
    const auto rep_start = std::chrono::steady_clock::now();
    std::vector<double> rep_lat(static_cast<std::size_t>(batch), 0.0);
    auto run_range = [&](int lo, int hi) {
      for (int i = lo; i < hi; ++i) {
        ForwardCtx<float> ctx;  // eval mode, no tape
        const auto t0 = std::chrono::steady_clock::now();
        forward(inputs[static_cast<std::size_t>(i)], weights, ctx);
        const auto t1 = std::chrono::steady_clock::now();
        rep_lat[static_cast<std::size_t>(i)] =
            std::chrono::duration<double, std::milli>(t1 - t0).count();
      }
    };
    if (threads == 1) {
      run_range(0, batch);
    } else {
      std::vector<std::thread> pool;
      const int chunk = (batch + threads - 1) / threads;
      for (int t = 0; t < threads; ++t) {
        const int lo = t * chunk, hi = std::min(batch, lo + chunk);
        if (lo < hi) pool.emplace_back(run_range, lo, hi);
      }
      for (auto& th : pool) th.join();
    }
    const auto rep_end = std::chrono::steady_clock::now();
    if (rep == 0) continue;  // warmup
    const double secs = std::chrono::duration<double>(rep_end - rep_start).count();
    repeat_imgs_per_sec.push_back(static_cast<double>(batch) / secs);
    latencies_ms.insert(latencies_ms.end(), rep_lat.begin(), rep_lat.end());
  }

  BenchReport r;
  r.images_per_sec = percentile(repeat_imgs_per_sec, 0.5);
  r.p50_ms = percentile(latencies_ms, 0.5);
  r.p90_ms = percentile(latencies_ms, 0.9);
  r.threads = threads;
  r.resolution = resolution;
  r.batch = batch;
  r.repeats = repeats;
  return r;
}

}  // namespace spf
