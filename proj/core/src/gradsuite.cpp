#include "sparseformer/gradsuite.hpp"

#include <cmath>

#include "sparseformer/geometry.hpp"
#include "sparseformer/model.hpp"
#include "sparseformer/ops.hpp"
#include "sparseformer/rng.hpp"
#include "sparseformer/train_ops.hpp"

namespace spf {

namespace {

Tensor<double> rnd(RngStream& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  double* p = t.raw();
  for (long long i = 0; i < t.numel(); ++i) p[i] = rng.next_uniform(lo, hi);
  return t;
}

// Test-only loss head: sum(x .* w) with distinct constant weights, so every
// output coordinate contributes its own gradient path.
Tensor<double> weighted_sum(Tape<double>* tape, const Tensor<double>& x,
                            const Tensor<double>& w) {
  double s = 0.0;
  const double* xp = x.data();
  const double* wp = w.data();
  for (long long i = 0; i < x.numel(); ++i) s += xp[i] * wp[i];
  Tensor<double> out = Tensor<double>::scalar(s);
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, w, out]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      const double* wp = w.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*go)[0] * wp[i];
    });
  }
  return out;
}

// Sampling points whose pixel-space coordinates stay at least margin away
// from the interpolation gridlines (the interpolant is piecewise linear).
Tensor<double> off_grid_points(RngStream& rng, int n, int p, int dims,
                               const std::vector<int>& extents) {
  Tensor<double> pts({n, p, dims});
  double* d = pts.raw();
  for (long long i = 0; i < pts.numel(); ++i) {
    const int ext = extents[static_cast<std::size_t>(i % dims)];
    const double cell = rng.next_uniform(0.0, static_cast<double>(ext - 1));
    const double u = std::floor(cell) + rng.next_uniform(0.1, 0.9);
    d[i] = (u + 0.5) / static_cast<double>(ext);
  }
  return pts;
}

}  // namespace

std::vector<GradCheckRow> primitive_gradchecks() {
  std::vector<GradCheckRow> rows;
  const double tol = 1e-5;
  RngStream rng(20240517);

  {
    Tensor<double> a = rnd(rng, {3, 4}), b = rnd(rng, {4, 2});
    const Tensor<double> r = rnd(rng, {3, 2});
    rows.push_back({"matmul",
                    finite_difference_check(
                        [&](Tape<double>* t) { return weighted_sum(t, matmul(t, a, b), r); },
                        {a, b}),
                    tol});
  }
  {
    Tensor<double> x = rnd(rng, {2, 5}), w = rnd(rng, {5, 3}), b = rnd(rng, {3});
    const Tensor<double> r = rnd(rng, {2, 3});
    rows.push_back({"linear",
                    finite_difference_check(
                        [&](Tape<double>* t) { return weighted_sum(t, linear(t, x, w, b), r); },
                        {x, w, b}),
                    tol});
  }
  {
    Tensor<double> x = rnd(rng, {3, 6}), g = rnd(rng, {6}, 0.5, 1.5), b = rnd(rng, {6});
    const Tensor<double> r = rnd(rng, {3, 6});
    rows.push_back(
        {"layer_norm",
         finite_difference_check(
             [&](Tape<double>* t) { return weighted_sum(t, layer_norm(t, x, g, b), r); },
             {x, g, b}),
         tol});
  }
  {
    Tensor<double> x = rnd(rng, {2, 7}, -2.0, 2.0);
    const Tensor<double> r = rnd(rng, {2, 7});
    rows.push_back({"gelu",
                    finite_difference_check(
                        [&](Tape<double>* t) { return weighted_sum(t, gelu(t, x), r); }, {x}),
                    tol});
  }
  {
    Tensor<double> x = rnd(rng, {3, 5}, -2.0, 2.0);
    const Tensor<double> r = rnd(rng, {3, 5});
    rows.push_back(
        {"softmax",
         finite_difference_check(
             [&](Tape<double>* t) { return weighted_sum(t, softmax(t, x, -1), r); }, {x}),
         tol});
  }
  {
    const int d = 8;
    Tensor<double> x = rnd(rng, {3, d});
    AttentionWeights<double> w{rnd(rng, {d, d}, -0.4, 0.4), rnd(rng, {d}),
                               rnd(rng, {d, d}, -0.4, 0.4),
                               rnd(rng, {d, d}, -0.4, 0.4), rnd(rng, {d}),
                               rnd(rng, {d, d}, -0.4, 0.4), rnd(rng, {d})};
    const Tensor<double> r = rnd(rng, {3, d});
    rows.push_back({"multi_head_self_attention",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, multi_head_self_attention(t, x, w, 2), r);
                        },
                        {x, w.wq, w.bq, w.wk, w.wv, w.bv, w.wo, w.bo}),
                    tol});
  }
  {
    Tensor<double> x = rnd(rng, {3, 6});
    FeedForwardWeights<double> w{rnd(rng, {6, 12}, -0.4, 0.4), rnd(rng, {12}),
                                 rnd(rng, {12, 6}, -0.4, 0.4), rnd(rng, {6})};
    const Tensor<double> r = rnd(rng, {3, 6});
    rows.push_back(
        {"feed_forward",
         finite_difference_check(
             [&](Tape<double>* t) { return weighted_sum(t, feed_forward(t, x, w), r); },
             {x, w.w1, w.b1, w.w2, w.b2}),
         tol});
  }
  {
    Tensor<double> x = rnd(rng, {2, 5, 5});
    Tensor<double> k = rnd(rng, {3, 2, 3, 3}, -0.5, 0.5);
    const Tensor<double> r = rnd(rng, {3, 5, 5});
    rows.push_back({"conv2d",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, conv2d(t, x, k, 1, 1), r);
                        },
                        {x, k}),
                    tol});
  }
  {
    Tensor<double> x = rnd(rng, {1, 4, 4});
    const Tensor<double> r = rnd(rng, {1, 2, 2});
    rows.push_back({"maxpool2d",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, maxpool2d(t, x, 3, 2, 1), r);
                        },
                        {x}),
                    tol});
  }
  {
    Tensor<double> feats = rnd(rng, {3, 5, 6});
    Tensor<double> pts = off_grid_points(rng, 2, 4, 2, {6, 5});
    const Tensor<double> r = rnd(rng, {2, 4, 3});
    rows.push_back({"bilinear_sample",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, bilinear_sample(t, feats, pts), r);
                        },
                        {feats, pts}),
                    tol});
  }
  {
    Tensor<double> feats = rnd(rng, {2, 3, 4, 5});
    Tensor<double> pts = off_grid_points(rng, 2, 3, 3, {5, 4, 3});
    const Tensor<double> r = rnd(rng, {2, 3, 2});
    rows.push_back({"trilinear_sample",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, trilinear_sample(t, feats, pts), r);
                        },
                        {feats, pts}),
                    tol});
  }
  {
    Tensor<double> raw = rnd(rng, {2, 3, 2});
    const Tensor<double> r = rnd(rng, {2, 3, 2});
    rows.push_back({"normalize_offsets",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, normalize_offsets(t, raw, OffsetStats::joint), r);
                        },
                        {raw}),
                    tol});
  }
  {
    Tensor<double> off = rnd(rng, {2, 3, 2});
    Tensor<double> rois = rnd(rng, {2, 4}, 0.2, 0.8);
    const Tensor<double> r = rnd(rng, {2, 3, 2});
    rows.push_back({"offsets_to_points",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, offsets_to_points(t, off, rois), r);
                        },
                        {off, rois}),
                    tol});
  }
  {
    Tensor<double> rois = rnd(rng, {3, 4}, 0.2, 0.8);
    Tensor<double> deltas = rnd(rng, {3, 4}, -0.5, 0.5);
    const Tensor<double> r = rnd(rng, {3, 4});
    rows.push_back({"adjust_roi",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, adjust_roi(t, rois, deltas), r);
                        },
                        {rois, deltas}),
                    tol});
  }
  {
    Tensor<double> tubes = rnd(rng, {2, 6}, 0.2, 0.8);
    Tensor<double> deltas = rnd(rng, {2, 6}, -0.5, 0.5);
    const Tensor<double> r = rnd(rng, {2, 6});
    rows.push_back({"adjust_tube",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, adjust_tube(t, tubes, deltas), r);
                        },
                        {tubes, deltas}),
                    tol});
  }
  {
    const int p = 3, c = 4;
    Tensor<double> sampled = rnd(rng, {2, p, c});
    Tensor<double> gen = rnd(rng, {2, c * c + p * p}, -0.5, 0.5);
    Tensor<double> bc = rnd(rng, {c}), bs = rnd(rng, {p});
    const Tensor<double> r = rnd(rng, {2, p, c});
    rows.push_back({"adaptive_mix",
                    finite_difference_check(
                        [&](Tape<double>* t) {
                          return weighted_sum(t, adaptive_mix(t, sampled, gen, bc, bs), r);
                        },
                        {sampled, gen, bc, bs}),
                    tol});
  }
  {
    Tensor<double> x = rnd(rng, {4, 3});
    const Tensor<double> r = rnd(rng, {3});
    rows.push_back({"mean_rows",
                    finite_difference_check(
                        [&](Tape<double>* t) { return weighted_sum(t, mean_rows(t, x), r); },
                        {x}),
                    tol});
  }
  {
    Tensor<double> logits = rnd(rng, {5}, -2.0, 2.0);
    rows.push_back({"cross_entropy",
                    finite_difference_check(
                        [&](Tape<double>* t) { return cross_entropy(t, logits, 2, 0.1); },
                        {logits}),
                    tol});
  }
  return rows;
}

ModelConfig micro_model_config() {
  ModelConfig mc;
  mc.tokens = 9;
  mc.points = 4;
  mc.focusing_dim = 16;
  mc.cortex_dim = 32;
  mc.focusing_repeats = 2;
  mc.cortex_depth = 2;
  mc.heads = 0;
  mc.ffn_expansion = 4.0;
  mc.early_channels = 8;
  mc.drop_path = 0.0;
  mc.classes = 4;
  return mc;
}

// Full-model check over every parameter. Coordinates whose float64 central
// difference is dominated by evaluation rounding (the loss changes by a few
// ulps only) are re-measured with an 80-bit forward evaluation; the analytic
// float64 gradients under test are unchanged, only the reference sharpens.
GradCheckRow micro_model_gradcheck() {
  const ModelConfig cfg = micro_model_config();
  auto weights = init_model<double>(cfg, 42);
  auto weights_hi = init_model<long double>(cfg, 42);  // identical draws by seed
  RngStream rng(99);
  const Tensor<double> image = rnd(rng, {3, 8, 8}, -1.0, 1.0);
  const Tensor<long double> image_hi = image.astype<long double>();

  Tape<double> tape;
  for (auto& p : weights.params) p->value.set_requires_grad(true);
  {
    ForwardCtx<double> ctx;
    ctx.tape = &tape;
    const Tensor<double> loss = cross_entropy(&tape, forward(image, weights, ctx), 1, 0.0);
    tape.backward(loss);
  }
  auto eval = [&]() -> double {
    ForwardCtx<double> ctx;
    return cross_entropy<double>(nullptr, forward(image, weights, ctx), 1, 0.0).item();
  };
  auto eval_hi = [&]() -> long double {
    ForwardCtx<long double> ctx;
    return cross_entropy<long double>(nullptr, forward(image_hi, weights_hi, ctx), 1, 0.0L)
        .item();
  };

  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t pi = 0; pi < weights.params.size(); ++pi) {
    auto& p = weights.params[pi];
    auto& p_hi = weights_hi.params[pi];
    const auto* g = tape.find_grad(p.value);
    p.value.thaw();
    p_hi.value.thaw();
    double* data = p.value.raw();
    long double* data_hi = p_hi.value.raw();
    for (long long i = 0; i < p.value.numel(); ++i) {
      const double saved = data[i];
      const double a = g ? (*g)[static_cast<std::size_t>(i)] : 0.0;
      data[i] = saved + h;
      const double up = eval();
      data[i] = saved - h;
      const double dn = eval();
      data[i] = saved;
      double numeric = (up - dn) / (2.0 * h);
      double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      if (rel >= 1e-5) {
        data_hi[i] = static_cast<long double>(saved + h);
        const long double up_hi = eval_hi();
        data_hi[i] = static_cast<long double>(saved - h);
        const long double dn_hi = eval_hi();
        data_hi[i] = static_cast<long double>(saved);
        numeric = static_cast<double>((up_hi - dn_hi) / (2.0L * static_cast<long double>(h)));
        rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      }
      worst = std::max(worst, rel);
    }
  }
  return {"micro_model", worst, 1e-4};
}

GradCheckRow constant_feature_roi_gradcheck() {
  auto weights = init_model<double>(micro_model_config(), 7);
  {
    // shrink extents so every sampling point stays strictly inside the map
    weights.token_roi.thaw();
    double* r = weights.token_roi.raw();
    for (int i = 0; i < weights.token_roi.dim(0); ++i) {
      r[i * 4 + 2] = 0.15;
      r[i * 4 + 3] = 0.15;
    }
  }
  const Tensor<double> features({micro_model_config().early_channels, 16, 16}, 0.37);
  Tape<double> tape;
  ForwardCtx<double> ctx;
  ctx.tape = &tape;
  const Tensor<double> loss = sum_all(&tape, latent_pipeline(features, weights, ctx));
  tape.backward(loss);
  double worst = 0.0;
  const auto* g = tape.find_grad(weights.token_roi);
  if (g) {
    for (double v : *g) worst = std::max(worst, std::fabs(v));
  }
  return {"constant_features_roi_grad", worst, 0.0};
}

}  // namespace spf
