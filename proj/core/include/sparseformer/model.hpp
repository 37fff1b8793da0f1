#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sparseformer/config.hpp"
#include "sparseformer/geometry.hpp"
#include "sparseformer/ops.hpp"
#include "sparseformer/rng.hpp"
#include "sparseformer/tensor.hpp"
#include "sparseformer/train_ops.hpp"

// SparseFormer: latent tokens with RoIs, iteratively refined by a
// weight-shared focusing transformer, then encoded by a cortex transformer
// whose first stage also samples. Classification is mean pooling over tokens
// plus a linear head; no positional information is injected.

namespace spf {

template <typename T>
struct LinearW {
  Tensor<T> w, b;
};

template <typename T>
struct LayerNormW {
  Tensor<T> gamma, beta;
};

template <typename T>
struct AttnBlockW {
  LayerNormW<T> ln;
  AttentionWeights<T> attn;
};

template <typename T>
struct FfnBlockW {
  LayerNormW<T> ln;
  FeedForwardWeights<T> ffn;
};

template <typename T>
struct DecodeW {
  LayerNormW<T> ln;
  LinearW<T> gen1, gen2;     // embedding -> d/4 -> C*C + P*P, no activation
  Tensor<T> bias_c, bias_s;  // learnable biases inside the two mixes
  LinearW<T> out;            // P*C -> d residual update
};

template <typename T>
struct SamplingStageW {
  LayerNormW<T> adjust_ln;
  LinearW<T> adjust;  // d -> 4 spatial deltas
  LayerNormW<T> offset_ln;
  LinearW<T> offset;    // d -> 2P
  LinearW<T> adjust_t;  // video: d -> 2 temporal deltas, zero-initialized
  LinearW<T> offset_t;  // video: d -> P temporal offsets, zero-initialized
  DecodeW<T> decode;
  AttnBlockW<T> attn;
  FfnBlockW<T> ffn;
};

template <typename T>
struct EncoderStageW {
  AttnBlockW<T> attn;
  FfnBlockW<T> ffn;
};

template <typename T>
struct LatentState {
  Tensor<T> embeddings;  // [N x d]
  Tensor<T> rois;        // [N x 4] or [N x 6] for tubes
};

template <typename T>
struct SparseFormerWeights {
  ModelConfig config;
  LinearW<T> early;       // stem: 7x7 stride-2 kernel [C x 3 x 7 x 7] + channel bias
  Tensor<T> token_embed;  // [N' x d_f], learnable
  Tensor<T> token_roi;    // [N' x 4] (or [N' x 6]), learnable
  SamplingStageW<T> focusing;  // one parameter set shared by all repeats
  LinearW<T> bridge;           // d_f -> d_c
  SamplingStageW<T> cortex_first;
  std::vector<EncoderStageW<T>> cortex_rest;
  LayerNormW<T> head_ln;
  LinearW<T> classifier;
  ParamStore<T> params;
};

template <typename T>
struct StageTrace {
  std::vector<Tensor<T>> points;  // per sampling stage, [N x P x D]
  std::vector<Tensor<T>> rois;    // per sampling stage, post-adjustment
};

template <typename T>
struct ForwardCtx {
  Tape<T>* tape = nullptr;
  bool training = false;
  RngStream* rng = nullptr;  // for stochastic depth
  StageTrace<T>* trace = nullptr;
};

// ---------------------------------------------------------------------------
// initialization

inline int exact_sqrt(int n) {
  const int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : -1;
}

namespace detail {

template <typename T>
struct InitCtx {
  RngStream rng;
  ParamStore<T>* params;

  void trunc_normal(Tensor<T>& t, double stddev) {
    T* p = t.raw();
    const long long n = t.numel();
    for (long long i = 0; i < n; ++i) p[i] = static_cast<T>(rng.next_trunc_normal(stddev, 2.0));
  }

  LinearW<T> make_linear(const std::string& name, int in, int out, bool zero_weight = false) {
    LinearW<T> l{Tensor<T>({in, out}), Tensor<T>({out})};
    if (!zero_weight) trunc_normal(l.w, 0.02);
    params->add(name + ".w", l.w);
    params->add(name + ".b", l.b);
    return l;
  }

  LayerNormW<T> make_ln(const std::string& name, int d) {
    LayerNormW<T> ln{Tensor<T>({d}, T(1)), Tensor<T>({d})};
    params->add(name + ".g", ln.gamma, /*decay=*/false);
    params->add(name + ".b", ln.beta, /*decay=*/false);
    return ln;
  }
};

// Mesh of g x g cell centers in (-1, 1), mean exactly zero.
template <typename T>
void fill_offset_grid_bias(Tensor<T>& bias, int grid) {
  T* b = bias.raw();
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      const int p = r * grid + c;
      b[2 * p + 0] = static_cast<T>((2.0 * c + 1.0) / grid - 1.0);
      b[2 * p + 1] = static_cast<T>((2.0 * r + 1.0) / grid - 1.0);
    }
  }
}

template <typename T>
SamplingStageW<T> make_sampling_stage(InitCtx<T>& ctx, const std::string& name, int d,
                                      const ModelConfig& cfg) {
  SamplingStageW<T> s;
  s.adjust_ln = ctx.make_ln(name + ".adjust_ln", d);
  s.adjust = ctx.make_linear(name + ".adjust", d, 4);
  s.offset_ln = ctx.make_ln(name + ".offset_ln", d);
  s.offset = ctx.make_linear(name + ".offset", d, 2 * cfg.points, /*zero_weight=*/true);
  fill_offset_grid_bias(s.offset.b, exact_sqrt(cfg.points));
  if (cfg.video) {
    // Zero weights and biases: a single-frame clip reproduces the image path
    // exactly until training moves these.
    s.adjust_t = ctx.make_linear(name + ".adjust_t", d, 2, /*zero_weight=*/true);
    s.offset_t = ctx.make_linear(name + ".offset_t", d, cfg.points, /*zero_weight=*/true);
  }

  const int c = cfg.early_channels;
  const int p = cfg.points;
  s.decode.ln = ctx.make_ln(name + ".decode_ln", d);
  const int hidden = std::max(1, d / 4);
  s.decode.gen1 = ctx.make_linear(name + ".gen1", d, hidden);
  s.decode.gen2 = ctx.make_linear(name + ".gen2", hidden, c * c + p * p, /*zero_weight=*/true);
  {
    // Zero generator weights plus a dense bias make the initial decode an
    // embedding-independent mixing with Xavier-scaled matrices.
    T* b = s.decode.gen2.b.raw();
    const double lim_c = std::sqrt(3.0 / c);
    for (int i = 0; i < c * c; ++i) b[i] = static_cast<T>(ctx.rng.next_uniform(-lim_c, lim_c));
    const double lim_s = std::sqrt(3.0 / p);
    for (int i = 0; i < p * p; ++i) {
      b[c * c + i] = static_cast<T>(ctx.rng.next_uniform(-lim_s, lim_s));
    }
  }
  s.decode.bias_c = Tensor<T>({c});
  ctx.params->add(name + ".mix_bc", s.decode.bias_c);
  s.decode.bias_s = Tensor<T>({p});
  ctx.params->add(name + ".mix_bs", s.decode.bias_s);
  s.decode.out = ctx.make_linear(name + ".decode_out", p * c, d);

  s.attn.ln = ctx.make_ln(name + ".attn_ln", d);
  LinearW<T> q = ctx.make_linear(name + ".q", d, d);
  Tensor<T> kw({d, d});
  ctx.trunc_normal(kw, 0.02);
  ctx.params->add(name + ".k.w", kw);
  LinearW<T> v = ctx.make_linear(name + ".v", d, d);
  LinearW<T> o = ctx.make_linear(name + ".o", d, d);
  s.attn.attn = AttentionWeights<T>{q.w, q.b, kw, v.w, v.b, o.w, o.b};

  s.ffn.ln = ctx.make_ln(name + ".ffn_ln", d);
  const int ff = std::max(1, static_cast<int>(std::lround(cfg.ffn_expansion * d)));
  LinearW<T> f1 = ctx.make_linear(name + ".ffn1", d, ff);
  LinearW<T> f2 = ctx.make_linear(name + ".ffn2", ff, d);
  s.ffn.ffn = FeedForwardWeights<T>{f1.w, f1.b, f2.w, f2.b};
  return s;
}

template <typename T>
EncoderStageW<T> make_encoder_stage(InitCtx<T>& ctx, const std::string& name, int d,
                                    const ModelConfig& cfg) {
  EncoderStageW<T> s;
  s.attn.ln = ctx.make_ln(name + ".attn_ln", d);
  LinearW<T> q = ctx.make_linear(name + ".q", d, d);
  Tensor<T> kw({d, d});
  ctx.trunc_normal(kw, 0.02);
  ctx.params->add(name + ".k.w", kw);
  LinearW<T> v = ctx.make_linear(name + ".v", d, d);
  LinearW<T> o = ctx.make_linear(name + ".o", d, d);
  s.attn.attn = AttentionWeights<T>{q.w, q.b, kw, v.w, v.b, o.w, o.b};
  s.ffn.ln = ctx.make_ln(name + ".ffn_ln", d);
  const int ff = std::max(1, static_cast<int>(std::lround(cfg.ffn_expansion * d)));
  LinearW<T> f1 = ctx.make_linear(name + ".ffn1", d, ff);
  LinearW<T> f2 = ctx.make_linear(name + ".ffn2", ff, d);
  s.ffn.ffn = FeedForwardWeights<T>{f1.w, f1.b, f2.w, f2.b};
  return s;
}

}  // namespace detail

// Builds and initializes all weights, deterministically under the seed.
// Token RoI centers form a sqrt(N) x sqrt(N) grid with 0.5 x 0.5 extents;
// sampling offsets start as a sqrt(P) x sqrt(P) grid via the offset bias.
// Video configs inflate tokens temporally with tubes tiling [0,1].
template <typename T>
SparseFormerWeights<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int grid_n = exact_sqrt(cfg.tokens);
  if (grid_n < 0) {
    throw ConfigError("token count " + std::to_string(cfg.tokens) +
                      " must be a perfect square for grid initialization");
  }
  if (exact_sqrt(cfg.points) < 0) {
    throw ConfigError("sampling point count " + std::to_string(cfg.points) +
                      " must be a perfect square for grid initialization");
  }

  SparseFormerWeights<T> w;
  w.config = cfg;
  detail::InitCtx<T> ctx{RngStream(mix_seed(seed, 0x73706672ULL)), &w.params};

  w.early.w = Tensor<T>({cfg.early_channels, 3, 7, 7});
  ctx.trunc_normal(w.early.w, std::sqrt(2.0 / (3.0 * 7.0 * 7.0)));
  w.early.b = Tensor<T>({cfg.early_channels});
  w.params.add("early.w", w.early.w);
  w.params.add("early.b", w.early.b);

  const int nt = cfg.video ? cfg.video->inflation : 1;
  const int n_total = cfg.latent_tokens();
  {
    Tensor<T> base({cfg.tokens, cfg.focusing_dim});
    ctx.trunc_normal(base, 1.0);
    if (nt == 1) {
      w.token_embed = base;
    } else {
      w.token_embed = Tensor<T>({n_total, cfg.focusing_dim});
      T* dst = w.token_embed.raw();
      const T* src = base.data();
      for (int k = 0; k < cfg.tokens; ++k) {
        for (int j = 0; j < nt; ++j) {
          for (int col = 0; col < cfg.focusing_dim; ++col) {
            dst[(static_cast<std::size_t>(k) * nt + j) * cfg.focusing_dim + col] =
                src[static_cast<std::size_t>(k) * cfg.focusing_dim + col];
          }
        }
      }
    }
    w.params.add("tokens.embed", w.token_embed);
  }
  {
    const int cols = cfg.video ? 6 : 4;
    w.token_roi = Tensor<T>({n_total, cols});
    T* r = w.token_roi.raw();
    for (int k = 0; k < cfg.tokens; ++k) {
      const int gy = k / grid_n, gx = k % grid_n;
      const T cx = static_cast<T>((2.0 * gx + 1.0) / (2.0 * grid_n));
      const T cy = static_cast<T>((2.0 * gy + 1.0) / (2.0 * grid_n));
      for (int j = 0; j < nt; ++j) {
        T* row = r + (static_cast<std::size_t>(k) * nt + j) * cols;
        row[0] = cx;
        row[1] = cy;
        row[2] = T(0.5);
        row[3] = T(0.5);
        if (cfg.video) {
          row[4] = static_cast<T>((2.0 * j + 1.0) / (2.0 * nt));  // tube center
          row[5] = static_cast<T>(1.0 / nt);                      // tube length
        }
      }
    }
    w.params.add("tokens.roi", w.token_roi, /*decay=*/false);
  }

  w.focusing = detail::make_sampling_stage(ctx, "focusing", cfg.focusing_dim, cfg);
  w.bridge = ctx.make_linear("bridge", cfg.focusing_dim, cfg.cortex_dim);
  w.cortex_first = detail::make_sampling_stage(ctx, "cortex0", cfg.cortex_dim, cfg);
  w.cortex_rest.reserve(static_cast<std::size_t>(cfg.cortex_depth - 1));
  for (int i = 1; i < cfg.cortex_depth; ++i) {
    w.cortex_rest.push_back(
        detail::make_encoder_stage(ctx, "cortex" + std::to_string(i), cfg.cortex_dim, cfg));
  }
  w.head_ln = ctx.make_ln("head_ln", cfg.cortex_dim);
  w.classifier = ctx.make_linear("classifier", cfg.cortex_dim, cfg.classes);
  return w;
}

// ---------------------------------------------------------------------------
// forward pieces

// Stem: 7x7 stride-2 convolution, ReLU, 3x3 stride-2 max pooling. Overall
// stride 4; inputs must be at least 8x8.
template <typename T>
Tensor<T> early_conv(Tape<T>* tape, const Tensor<T>& image, const LinearW<T>& stem) {
  if (image.ndim() != 3 || image.dim(0) != stem.w.dim(1)) {
    throw DimError("early_conv expects [3 x H x W] input, got " + shape_str(image.shape()));
  }
  if (image.dim(1) < 8 || image.dim(2) < 8) {
    throw DimError("early_conv input must be at least 8x8, got " + shape_str(image.shape()));
  }
  Tensor<T> x = conv2d(tape, image, stem.w, /*stride=*/2, /*pad=*/3);
  x = add_channel_bias(tape, x, stem.b);
  x = relu(tape, x);
  return maxpool2d(tape, x, 3, 2, 1);
}

// Token-wise adaptive mixing: x1 = gelu(x0*Mc + bc), x2 = gelu(Ms*x1 + bs),
// with [Mc | Ms] unpacked per token from the generator output.
template <typename T>
Tensor<T> adaptive_mix(Tape<T>* tape, const Tensor<T>& sampled, const Tensor<T>& gen,
                       const Tensor<T>& bias_c, const Tensor<T>& bias_s) {
  if (sampled.ndim() != 3 || gen.ndim() != 2 || sampled.dim(0) != gen.dim(0)) {
    throw DimError("adaptive_mix shape mismatch: sampled " + shape_str(sampled.shape()) +
                   ", gen " + shape_str(gen.shape()));
  }
  const int n = sampled.dim(0), p = sampled.dim(1), c = sampled.dim(2);
  if (gen.dim(1) != c * c + p * p || bias_c.numel() != c || bias_s.numel() != p) {
    throw DimError("adaptive_mix generator width " + std::to_string(gen.dim(1)) +
                   " incompatible with P=" + std::to_string(p) + ", C=" + std::to_string(c));
  }
  Tensor<T> out({n, p, c});
  std::vector<T> pre1(static_cast<std::size_t>(n) * p * c);  // x0*Mc + bc
  std::vector<T> pre2(static_cast<std::size_t>(n) * p * c);  // Ms*x1 + bs
  const T* sp = sampled.data();
  const T* gp = gen.data();
  const T* bc = bias_c.data();
  const T* bs = bias_s.data();
  T* o = out.raw();
  const std::size_t tok_stride = static_cast<std::size_t>(p) * c;
  std::vector<T> x1(tok_stride);
  for (int tok = 0; tok < n; ++tok) {
    const T* x0 = sp + tok * tok_stride;
    const T* mc = gp + static_cast<std::size_t>(tok) * (c * c + p * p);
    const T* ms = mc + static_cast<std::size_t>(c) * c;
    T* a = pre1.data() + tok * tok_stride;
    T* b = pre2.data() + tok * tok_stride;
    T* orow = o + tok * tok_stride;
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < c; ++j) a[static_cast<std::size_t>(i) * c + j] = bc[j];
    }
    detail::mm_acc(x0, mc, a, p, c, c);
    for (std::size_t i = 0; i < tok_stride; ++i) x1[i] = a[i] * detail::gauss_cdf(a[i]);
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < c; ++j) b[static_cast<std::size_t>(i) * c + j] = bs[i];
    }
    detail::mm_acc(ms, x1.data(), b, p, p, c);
    for (std::size_t i = 0; i < tok_stride; ++i) orow[i] = b[i] * detail::gauss_cdf(b[i]);
  }

  const bool rec = tape && (sampled.requires_grad() || gen.requires_grad() ||
                            bias_c.requires_grad() || bias_s.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    sampled.freeze();
    gen.freeze();
    bias_c.freeze();
    bias_s.freeze();
    out.freeze();
    tape->record([tape, sampled, gen, bias_c, bias_s, out, n, p, c, pre1 = std::move(pre1),
                  pre2 = std::move(pre2)]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      std::vector<T>* gs = sampled.requires_grad() ? &tape->grad(sampled) : nullptr;
      std::vector<T>* gg = gen.requires_grad() ? &tape->grad(gen) : nullptr;
      std::vector<T>* gbc = bias_c.requires_grad() ? &tape->grad(bias_c) : nullptr;
      std::vector<T>* gbs = bias_s.requires_grad() ? &tape->grad(bias_s) : nullptr;
      const T* sp = sampled.data();
      const T* gp = gen.data();
      const std::size_t tok_stride = static_cast<std::size_t>(p) * c;
      std::vector<T> x1(tok_stride), g2(tok_stride), g1(tok_stride), dx1(tok_stride);
      std::vector<T> mst(static_cast<std::size_t>(p) * p),
          mct(static_cast<std::size_t>(c) * c), x0t(tok_stride), x1t(tok_stride);
      for (int tok = 0; tok < n; ++tok) {
        const T* x0 = sp + tok * tok_stride;
        const T* mc = gp + static_cast<std::size_t>(tok) * (c * c + p * p);
        const T* ms = mc + static_cast<std::size_t>(c) * c;
        const T* a = pre1.data() + tok * tok_stride;
        const T* b = pre2.data() + tok * tok_stride;
        const T* grow = go->data() + tok * tok_stride;
        for (std::size_t i = 0; i < tok_stride; ++i) {
          x1[i] = a[i] * detail::gauss_cdf(a[i]);
          g2[i] = grow[i] * (detail::gauss_cdf(b[i]) + b[i] * detail::gauss_pdf(b[i]));
        }
        if (gbs) {
          for (int i = 0; i < p; ++i) {
            T s = T(0);
            for (int j = 0; j < c; ++j) s += g2[static_cast<std::size_t>(i) * c + j];
            (*gbs)[static_cast<std::size_t>(i)] += s;
          }
        }
        if (gg) {
          // dMs = g2 * x1^T
          detail::transpose_into(x1.data(), x1t.data(), p, c);
          detail::mm_acc(g2.data(), x1t.data(),
                         gg->data() + static_cast<std::size_t>(tok) * (c * c + p * p) + c * c,
                         p, c, p);
        }
        // dx1 = Ms^T * g2
        detail::transpose_into(ms, mst.data(), p, p);
        std::fill(dx1.begin(), dx1.end(), T(0));
        detail::mm_acc(mst.data(), g2.data(), dx1.data(), p, p, c);
        for (std::size_t i = 0; i < tok_stride; ++i) {
          g1[i] = dx1[i] * (detail::gauss_cdf(a[i]) + a[i] * detail::gauss_pdf(a[i]));
        }
        if (gbc) {
          for (int j = 0; j < c; ++j) {
            T s = T(0);
            for (int i = 0; i < p; ++i) s += g1[static_cast<std::size_t>(i) * c + j];
            (*gbc)[static_cast<std::size_t>(j)] += s;
          }
        }
        if (gg) {
          // dMc = x0^T * g1
          detail::transpose_into(x0, x0t.data(), p, c);
          detail::mm_acc(x0t.data(), g1.data(),
                         gg->data() + static_cast<std::size_t>(tok) * (c * c + p * p), c, p, c);
        }
        if (gs) {
          // dx0 = g1 * Mc^T
          detail::transpose_into(mc, mct.data(), c, c);
          detail::mm_acc(g1.data(), mct.data(), gs->data() + tok * tok_stride, p, c, c);
        }
      }
    });
  }
  return out;
}

// Adaptive feature decoding: generator -> per-token channel/spatial mixing ->
// linear to width d. Returns the residual update; the caller adds it back.
template <typename T>
Tensor<T> adaptive_decode(Tape<T>* tape, const Tensor<T>& embeddings, const Tensor<T>& sampled,
                          const DecodeW<T>& w) {
  const int n = embeddings.dim(0);
  const int p = sampled.dim(1), c = sampled.dim(2);
  Tensor<T> normed = layer_norm(tape, embeddings, w.ln.gamma, w.ln.beta);
  Tensor<T> gen = linear(tape, linear(tape, normed, w.gen1.w, w.gen1.b), w.gen2.w, w.gen2.b);
  Tensor<T> mixed = adaptive_mix(tape, sampled, gen, w.bias_c, w.bias_s);
  return linear(tape, mixed.reshaped({n, p * c}), w.out.w, w.out.b);
}

namespace detail {

template <typename T>
Tensor<T> transformer_blocks(const Tensor<T>& emb_in, const AttnBlockW<T>& ab,
                             const FfnBlockW<T>& fb, const ModelConfig& cfg,
                             ForwardCtx<T>& ctx) {
  Tape<T>* tape = ctx.tape;
  const int heads = cfg.heads_for(emb_in.dim(1));
  Tensor<T> emb = emb_in;
  {
    Tensor<T> a = multi_head_self_attention(
        tape, layer_norm(tape, emb, ab.ln.gamma, ab.ln.beta), ab.attn, heads);
    emb = add(tape, emb, drop_path(tape, a, cfg.drop_path, ctx.training, ctx.rng));
  }
  {
    Tensor<T> f = feed_forward(tape, layer_norm(tape, emb, fb.ln.gamma, fb.ln.beta), fb.ffn);
    emb = add(tape, emb, drop_path(tape, f, cfg.drop_path, ctx.training, ctx.rng));
  }
  return emb;
}

}  // namespace detail

// One sampling-equipped stage: RoI adjustment first, then sampling points
// from the current embedding, bilinear (or trilinear) sampling, adaptive
// decoding as a residual (never dropped), then attention and FFN blocks.
template <typename T>
LatentState<T> sampling_stage(const LatentState<T>& state, const Tensor<T>& features,
                              const SamplingStageW<T>& w, const ModelConfig& cfg,
                              ForwardCtx<T>& ctx) {
  Tape<T>* tape = ctx.tape;
  const bool video = state.rois.dim(1) == 6;
  const int n = state.embeddings.dim(0);

  Tensor<T> adj_in = layer_norm(tape, state.embeddings, w.adjust_ln.gamma, w.adjust_ln.beta);
  Tensor<T> deltas = linear(tape, adj_in, w.adjust.w, w.adjust.b);
  Tensor<T> rois;
  if (video) {
    Tensor<T> tdeltas = linear(tape, adj_in, w.adjust_t.w, w.adjust_t.b);
    rois = adjust_tube(tape, state.rois, concat_cols(tape, {deltas, tdeltas}));
  } else {
    rois = adjust_roi(tape, state.rois, deltas);
  }

  Tensor<T> offsets = generate_offsets(tape, state.embeddings, w.offset_ln.gamma,
                                       w.offset_ln.beta, w.offset.w, w.offset.b, cfg.points, 2,
                                       cfg.offset_stats);
  if (video) {
    Tensor<T> toff = generate_offsets(tape, state.embeddings, w.offset_ln.gamma,
                                      w.offset_ln.beta, w.offset_t.w, w.offset_t.b, cfg.points,
                                      1, cfg.offset_stats);
    Tensor<T> flat = concat_cols(
        tape, {offsets.reshaped({n * cfg.points, 2}), toff.reshaped({n * cfg.points, 1})});
    offsets = flat.reshaped({n, cfg.points, 3});
  }
  Tensor<T> points = offsets_to_points(tape, offsets, rois);
  if (ctx.trace) {
    ctx.trace->points.push_back(points);
    ctx.trace->rois.push_back(rois);
  }

  Tensor<T> sampled = video ? trilinear_sample(tape, features, points)
                            : bilinear_sample(tape, features, points);
  Tensor<T> emb =
      add(tape, state.embeddings, adaptive_decode(tape, state.embeddings, sampled, w.decode));
  emb = detail::transformer_blocks(emb, w.attn, w.ffn, cfg, ctx);
  return LatentState<T>{emb, rois};
}

// Cortex: first stage samples with its own (unshared) weights, the remaining
// stages are attention + FFN only and never read image features.
template <typename T>
Tensor<T> cortex_forward(const LatentState<T>& state, const Tensor<T>& features,
                         const SparseFormerWeights<T>& w, ForwardCtx<T>& ctx) {
  LatentState<T> st = sampling_stage(state, features, w.cortex_first, w.config, ctx);
  Tensor<T> emb = st.embeddings;
  for (const auto& stage : w.cortex_rest) {
    emb = detail::transformer_blocks(emb, stage.attn, stage.ffn, w.config, ctx);
  }
  return emb;
}

// Shared latent path: focusing repeats -> bridge -> cortex -> mean pooling ->
// head. Exposed separately so tests can drive it with synthetic feature maps.
template <typename T>
Tensor<T> latent_pipeline(const Tensor<T>& features, const SparseFormerWeights<T>& w,
                          ForwardCtx<T>& ctx) {
  Tape<T>* tape = ctx.tape;
  LatentState<T> st{w.token_embed, w.token_roi};
  for (int i = 0; i < w.config.focusing_repeats; ++i) {
    st = sampling_stage(st, features, w.focusing, w.config, ctx);
  }
  st.embeddings = linear(tape, st.embeddings, w.bridge.w, w.bridge.b);
  Tensor<T> emb = cortex_forward(st, features, w, ctx);
  Tensor<T> pooled = mean_rows(tape, emb);
  pooled = layer_norm(tape, pooled, w.head_ln.gamma, w.head_ln.beta);
  return linear(tape, pooled, w.classifier.w, w.classifier.b);
}

// Image classification forward; returns logits [K].
template <typename T>
Tensor<T> forward(const Tensor<T>& image, const SparseFormerWeights<T>& w, ForwardCtx<T>& ctx) {
  if (w.config.video) {
    throw ConfigError("image forward on a video-configured model; use video_forward");
  }
  Tensor<T> features = early_conv(ctx.tape, image, w.early);
  return latent_pipeline(features, w, ctx);
}

namespace detail {

// Stacks per-frame maps [C x H x W] into [C x T x H x W].
template <typename T>
Tensor<T> stack_time(Tape<T>* tape, const std::vector<Tensor<T>>& frames) {
  const int t = static_cast<int>(frames.size());
  const int c = frames[0].dim(0), h = frames[0].dim(1), w = frames[0].dim(2);
  Tensor<T> out({c, t, h, w});
  T* o = out.raw();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  bool needs = false;
  for (int f = 0; f < t; ++f) {
    if (frames[f].shape() != frames[0].shape()) {
      throw DimError("stack_time frame shape mismatch");
    }
    needs = needs || frames[f].requires_grad();
    const T* src = frames[f].data();
    for (int ch = 0; ch < c; ++ch) {
      T* dst = o + (static_cast<std::size_t>(ch) * t + f) * plane;
      const T* s = src + static_cast<std::size_t>(ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = s[i];
    }
  }
  if (tape && needs) {
    out.set_requires_grad(true);
    for (const auto& f : frames) f.freeze();
    out.freeze();
    tape->record([tape, frames, out, t, c, plane]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      for (int f = 0; f < t; ++f) {
        if (!frames[static_cast<std::size_t>(f)].requires_grad()) continue;
        auto& gf = tape->grad(frames[static_cast<std::size_t>(f)]);
        for (int ch = 0; ch < c; ++ch) {
          const T* src = go->data() + (static_cast<std::size_t>(ch) * t + f) * plane;
          T* dst = gf.data() + static_cast<std::size_t>(ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

// Copies frame f of a clip [3 x T x H x W] into [3 x H x W]. Clips are leaf
// inputs, so no gradient path is needed here.
template <typename T>
Tensor<T> clip_frame(const Tensor<T>& clip, int f) {
  const int c = clip.dim(0), t = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
  Tensor<T> out({c, h, w});
  T* o = out.raw();
  const T* src = clip.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const T* s = src + (static_cast<std::size_t>(ch) * t + f) * plane;
    for (std::size_t i = 0; i < plane; ++i) o[ch * plane + i] = s[i];
  }
  return out;
}

}  // namespace detail

// Video classification forward over a clip [3 x T x H x W]: per-frame early
// convolution, trilinear sampling through tube RoIs, shared latent path.
template <typename T>
Tensor<T> video_forward(const Tensor<T>& clip, const SparseFormerWeights<T>& w,
                        ForwardCtx<T>& ctx) {
  if (!w.config.video) {
    throw ConfigError("video forward requires a video-configured model");
  }
  if (clip.ndim() != 4 || clip.dim(0) != 3) {
    throw DimError("video forward expects [3 x T x H x W], got " + shape_str(clip.shape()));
  }
  const int t = clip.dim(1);
  std::vector<Tensor<T>> frame_feats;
  frame_feats.reserve(static_cast<std::size_t>(t));
  for (int f = 0; f < t; ++f) {
    frame_feats.push_back(early_conv(ctx.tape, detail::clip_frame(clip, f), w.early));
  }
  Tensor<T> features = detail::stack_time(ctx.tape, frame_feats);
  return latent_pipeline(features, w, ctx);
}

}  // namespace spf
