#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sparseformer/fsum.hpp"
#include "sparseformer/rng.hpp"
#include "sparseformer/tensor.hpp"

namespace spf {

// Cross entropy with label smoothing against a 1-D logits vector.
// q_k = (1 - smoothing) * onehot_k + smoothing / K
template <typename T>
Tensor<T> cross_entropy(Tape<T>* tape, const Tensor<T>& logits, int label, T smoothing = T(0)) {
  if (logits.ndim() != 1) {
    throw DimError("cross_entropy expects 1-D logits, got " + shape_str(logits.shape()));
  }
  const int k = logits.dim(0);
  if (label < 0 || label >= k) {
    throw DataError("label " + std::to_string(label) + " out of range [0," +
                    std::to_string(k) + ")");
  }
  if (smoothing < T(0) || smoothing >= T(1)) {
    throw ConfigError("label smoothing must be in [0,1)");
  }
  const T* lp = logits.data();
  T m = lp[0];
  for (int i = 1; i < k; ++i) m = std::max(m, lp[i]);
  T lse = T(0);
  for (int i = 0; i < k; ++i) lse += std::exp(lp[i] - m);
  lse = std::log(lse) + m;
  const T uni = smoothing / T(k);
  T loss = T(0);
  for (int i = 0; i < k; ++i) {
    const T q = uni + (i == label ? T(1) - smoothing : T(0));
    loss += q * (lse - lp[i]);
  }
  Tensor<T> out = Tensor<T>::scalar(loss);
  if (tape && logits.requires_grad()) {
    out.set_requires_grad(true);
    logits.freeze();
    out.freeze();
    tape->record([tape, logits, out, k, label, smoothing, lse]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gl = tape->grad(logits);
      const T g = (*go)[0];
      const T uni = smoothing / T(k);
      const T* lp = logits.data();
      for (int i = 0; i < k; ++i) {
        const T p = std::exp(lp[i] - lse);
        const T q = uni + (i == label ? T(1) - smoothing : T(0));
        gl[static_cast<std::size_t>(i)] += g * (p - q);
      }
    });
  }
  return out;
}

// Stochastic depth on a residual branch: training keeps the branch with
// probability 1 - rate and rescales by 1/(1 - rate); eval is the identity.
template <typename T>
Tensor<T> drop_path(Tape<T>* tape, const Tensor<T>& branch, double rate, bool training,
                    RngStream* rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("drop_path rate must be in [0,1)");
  if (!training || rate == 0.0) return branch;
  if (!rng) throw StateError("drop_path in training mode needs an RNG stream");
  const bool keep = rng->next_uniform() >= rate;
  const T factor = keep ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
  return scale(tape, branch, factor);
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
};

// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p), step is 1-based.
template <typename T>
void adamw_step(Param<T>& param, AdamState<T>& state, long long step, double lr,
                const AdamConfig& cfg, double weight_decay) {
  const std::size_t n = static_cast<std::size_t>(param.value.numel());
  if (state.m.empty()) {
    state.m.assign(n, T(0));
    state.v.assign(n, T(0));
  }
  if (state.m.size() != n || param.grad.numel() != param.value.numel()) {
    throw StateError("optimizer state shape mismatch for " + param.name);
  }
  const T* g = param.grad.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(g[i]))) {
      throw NumericError("non-finite gradient in " + param.name);
    }
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const double wd = weight_decay;
  param.value.thaw();
  T* p = param.value.raw();
  for (std::size_t i = 0; i < n; ++i) {
    state.m[i] = static_cast<T>(cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i]);
    state.v[i] = static_cast<T>(cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    p[i] = static_cast<T>(p[i] - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * p[i]));
  }
}

// ---------------------------------------------------------------------------
// schedule: linear warmup then cosine decay to zero

inline double lr_at(long long step, long long warmup_steps, long long total_steps,
                    double base_lr) {
  if (step < 0) throw ConfigError("lr_at step must be >= 0");
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return base_lr;
  double progress = static_cast<double>(step - warmup_steps) /
                    static_cast<double>(total_steps - warmup_steps);
  progress = std::min(1.0, std::max(0.0, progress));
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// EMA shadow: s <- decay * s + (1 - decay) * p

template <typename T>
void ema_update(std::vector<Tensor<T>>& shadow, const ParamStore<T>& params, double decay) {
  if (decay < 0.0 || decay >= 1.0) throw ConfigError("ema decay must be in [0,1)");
  if (shadow.size() != params.size()) throw StateError("EMA shadow count mismatch");
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    const auto& p = params[i].value;
    if (shadow[i].shape() != p.shape()) {
      throw StateError("EMA shadow shape mismatch for " + params[i].name);
    }
    shadow[i].thaw();
    T* s = shadow[i].raw();
    const T* v = p.data();
    const std::size_t n = static_cast<std::size_t>(p.numel());
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = static_cast<T>(decay * s[j] + (1.0 - decay) * v[j]);
    }
  }
}

}  // namespace spf
