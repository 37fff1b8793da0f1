#include "sparseformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

namespace spf {

std::unique_ptr<Dataset> make_train_dataset(const TrainConfig& tc, const std::string& data_dir) {
  if (tc.dataset == DatasetKind::cifar10) {
    return std::make_unique<CifarDataset>(cifar_train_files(data_dir), tc.cifar);
  }
  return std::make_unique<SyntheticPatchDataset>(tc.synthetic,
                                                 static_cast<std::size_t>(tc.synthetic.train_count));
}

std::unique_ptr<Dataset> make_test_dataset(const TrainConfig& tc, const std::string& data_dir) {
  if (tc.dataset == DatasetKind::cifar10) {
    return std::make_unique<CifarDataset>(cifar_test_files(data_dir), tc.cifar);
  }
  return std::make_unique<SyntheticPatchDataset>(
      tc.synthetic, static_cast<std::size_t>(tc.synthetic.test_count),
      static_cast<std::uint64_t>(tc.synthetic.train_count));
}

// Pad-4 zero border, random crop back to the original extent, horizontal flip
// with probability one half.
Tensor<float> augment_flip_crop(const Tensor<float>& image, RngStream& rng) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  constexpr int kPad = 4;
  const int dy = static_cast<int>(rng.next_below(2 * kPad + 1));
  const int dx = static_cast<int>(rng.next_below(2 * kPad + 1));
  const bool flip = rng.next_uniform() < 0.5;
  Tensor<float> out({c, h, w});
  float* o = out.raw();
  const float* src = image.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      const int sy = y + dy - kPad;
      for (int x = 0; x < w; ++x) {
        const int sx0 = x + dx - kPad;
        const int sx = flip ? w - 1 - sx0 : sx0;
        const bool in = sy >= 0 && sy < h && sx >= 0 && sx < w && sx0 >= 0 && sx0 < w;
        o[(static_cast<std::size_t>(ch) * h + y) * w + x] =
            in ? src[(static_cast<std::size_t>(ch) * h + sy) * w + sx] : 0.0f;
      }
    }
  }
  return out;
}

EvalResult evaluate(const SparseFormerWeights<float>& weights, const Dataset& ds,
                    std::size_t limit) {
  EvalResult r;
  const std::size_t n = limit == 0 ? ds.size() : std::min(limit, ds.size());
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample s = ds.get(i);
    ForwardCtx<float> ctx;  // eval: no tape, no stochastic depth
    const Tensor<float> logits = forward(s.image, weights, ctx);
    const float* lp = logits.data();
    int best = 0;
    for (int k = 1; k < logits.dim(0); ++k) {
      if (lp[k] > lp[best]) best = k;
    }
    if (best == s.label) ++correct;
    loss_sum += static_cast<double>(
        cross_entropy<float>(nullptr, logits, s.label, 0.0f).item());
  }
  r.count = n;
  r.top1 = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  r.loss = n ? loss_sum / static_cast<double>(n) : 0.0;
  return r;
}

namespace {

struct SampleRun {
  Tape<float> tape;
  double loss = 0.0;
  bool correct = false;
};

void run_sample(const SparseFormerWeights<float>& weights, const TrainConfig& tc,
                const Sample& sample, std::uint64_t rng_seed, SampleRun& out) {
  RngStream rng(rng_seed);
  ForwardCtx<float> ctx;
  ctx.tape = &out.tape;
  ctx.training = true;
  ctx.rng = &rng;
  const Tensor<float> logits = forward(sample.image, weights, ctx);
  const Tensor<float> loss = cross_entropy(&out.tape, logits, sample.label,
                                           static_cast<float>(tc.label_smoothing));
  out.loss = static_cast<double>(loss.item());
  const float* lp = logits.data();
  int best = 0;
  for (int k = 1; k < logits.dim(0); ++k) {
    if (lp[k] > lp[best]) best = k;
  }
  out.correct = best == sample.label;
  out.tape.backward(loss);
}

void append_metrics_row(std::ofstream& os, const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%lld,%.10g,%.10g,%.10g\n", m.epoch, m.step, m.lr, m.loss,
                m.acc1);
  os << buf;
  os.flush();
}

}  // namespace

TrainResult train_loop(const ModelConfig& mc, const TrainConfig& tc, const PathsConfig& paths) {
  mc.validate();
  tc.validate();
  std::filesystem::create_directories(paths.outputs);
  std::filesystem::create_directories(paths.checkpoints);

  auto train_ds = make_train_dataset(tc, paths.data);
  auto weights = init_model<float>(mc, tc.seed);

  const bool use_ema = tc.ema_decay >= 0.0;
  std::vector<Tensor<float>> ema;
  if (use_ema) {
    ema.reserve(weights.params.size());
    for (const auto& p : weights.params) ema.push_back(p->value.clone());
  }
  std::vector<AdamState<float>> opt_state(weights.params.size());
  const AdamConfig adam_cfg;

  TrainResult result;
  result.checkpoint_path = (std::filesystem::path(paths.checkpoints) / "model.spfm").string();
  result.metrics_path = (std::filesystem::path(paths.outputs) / "metrics.csv").string();

  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics) throw FormatError("cannot open metrics log: " + result.metrics_path);
  metrics << "epoch,step,lr,loss,acc1\n";
  metrics.flush();

  auto save = [&]() {
    write_checkpoint(result.checkpoint_path,
                     weights_to_blobs(weights, use_ema ? &ema : nullptr));
  };
  save();  // zero-epoch runs leave the initialization checkpoint behind

  const std::size_t n_train = train_ds->size();
  const long long steps_per_epoch =
      static_cast<long long>((n_train + tc.batch_size - 1) / tc.batch_size);
  const long long total_steps = steps_per_epoch * tc.epochs;
  const long long warmup_steps = steps_per_epoch * tc.warmup_epochs;

  std::vector<std::size_t> order(n_train);
  long long global_step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    RngStream shuffle_rng(mix_seed(tc.seed, 0x657063ULL, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n_train; i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
    }

    double loss_sum = 0.0;
    std::size_t correct = 0;
    double last_lr = 0.0;
    for (std::size_t start = 0; start < n_train; start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t bsz = std::min<std::size_t>(tc.batch_size, n_train - start);
      std::vector<SampleRun> runs(bsz);
      auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
          Sample s = train_ds->get(order[start + i]);
          if (tc.augment == AugmentKind::flip_crop) {
            RngStream aug_rng(mix_seed(tc.seed ^ 0xa06ULL, static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(order[start + i])));
            s.image = augment_flip_crop(s.image, aug_rng);
          }
          const std::uint64_t drop_seed =
              mix_seed(tc.seed ^ 0xd309ULL, static_cast<std::uint64_t>(global_step),
                       static_cast<std::uint64_t>(i));
          run_sample(weights, tc, s, drop_seed, runs[i]);
        }
      };
      if (tc.threads == 1 || bsz == 1) {
        work(0, bsz);
      } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (bsz + tc.threads - 1) / static_cast<std::size_t>(tc.threads);
        for (int t = 0; t < tc.threads; ++t) {
          const std::size_t lo = static_cast<std::size_t>(t) * chunk;
          const std::size_t hi = std::min(bsz, lo + chunk);
          if (lo < hi) pool.emplace_back(work, lo, hi);
        }
        for (auto& th : pool) th.join();
      }

      // Sum per-sample gradients in sample order; identical for any thread count.
      double batch_loss = 0.0;
      for (auto& p : weights.params) {
        p->grad.thaw();
        float* g = p->grad.raw();
        std::fill(g, g + p->grad.numel(), 0.0f);
      }
      const float inv_b = 1.0f / static_cast<float>(bsz);
      for (std::size_t i = 0; i < bsz; ++i) {
        batch_loss += runs[i].loss;
        if (runs[i].correct) ++correct;
        for (auto& p : weights.params) {
          const auto* g = runs[i].tape.find_grad(p->value);
          if (!g) continue;
          float* acc = p->grad.raw();
          for (std::size_t j = 0; j < g->size(); ++j) acc[j] += (*g)[j] * inv_b;
        }
      }
      batch_loss /= static_cast<double>(bsz);
      loss_sum += batch_loss * static_cast<double>(bsz);
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite loss at step " + std::to_string(global_step) +
                           "; last completed epoch checkpoint retained");
      }

      if (tc.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& p : weights.params) {
          const float* g = p->grad.data();
          for (long long j = 0; j < p->grad.numel(); ++j) {
            sq += static_cast<double>(g[j]) * static_cast<double>(g[j]);
          }
        }
        const double norm = std::sqrt(sq);
        if (norm > tc.grad_clip) {
          const float s = static_cast<float>(tc.grad_clip / (norm + 1e-12));
          for (auto& p : weights.params) {
            float* g = p->grad.raw();
            for (long long j = 0; j < p->grad.numel(); ++j) g[j] *= s;
          }
        }
      }

      ++global_step;  // optimizer steps are 1-based
      last_lr = lr_at(global_step, warmup_steps, total_steps, tc.base_lr);
      for (std::size_t pi = 0; pi < weights.params.size(); ++pi) {
        auto& p = weights.params[pi];
        const double wd = (tc.decay_exclusions && !p.decay) ? 0.0 : tc.weight_decay;
        adamw_step(p, opt_state[pi], global_step, last_lr, adam_cfg, wd);
      }
      if (use_ema) ema_update(ema, weights.params, tc.ema_decay);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.step = global_step;
    m.lr = last_lr;
    m.loss = loss_sum / static_cast<double>(n_train);
    m.acc1 = static_cast<double>(correct) / static_cast<double>(n_train);
    result.metrics.push_back(m);
    append_metrics_row(metrics, m);
    save();
  }
  return result;
}

}  // namespace spf
