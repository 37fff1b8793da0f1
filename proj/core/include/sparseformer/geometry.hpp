#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sparseformer/log.hpp"
#include "sparseformer/ops.hpp"
#include "sparseformer/tensor.hpp"

// RoI descriptors and differentiable sampling.
//
// Conventions, fixed and tested:
//   - RoI rows are (x, y, w, h), tube rows (x, y, w, h, t, l); all components
//     normalized by the image (or clip) size. Extents stay positive because
//     updates are multiplicative in exp().
//   - Sample coordinates use pixel-center alignment: u = x * W - 0.5, so
//     normalized 0.5 lands on the image center at any resolution.
//   - Out-of-range neighbors contribute zeros (no clamping); a fully
//     out-of-image point yields a zero feature and a zero coordinate gradient.

namespace spf {

enum class OffsetStats { joint, per_axis };

constexpr double kDegenerateOffsetStd = 1e-6;

// Standardizes raw offsets per token to mean 0 / std 1/3 so most sampling
// points stay inside the RoI. `joint` pools all P*D scalars of a token;
// `per_axis` keeps per-coordinate statistics. Groups with std below
// kDegenerateOffsetStd produce zero offsets (and zero gradient).
template <typename T>
Tensor<T> normalize_offsets(Tape<T>* tape, const Tensor<T>& raw, OffsetStats stats) {
  if (raw.ndim() != 3) {
    throw DimError("normalize_offsets expects [N x P x D], got " + shape_str(raw.shape()));
  }
  const int n = raw.dim(0), p = raw.dim(1), d = raw.dim(2);
  const int groups = stats == OffsetStats::joint ? 1 : d;
  const int group_len = stats == OffsetStats::joint ? p * d : p;

  Tensor<T> out(raw.shape());
  std::vector<T> sigma(static_cast<std::size_t>(n) * groups);
  const T* rp = raw.data();
  T* o = out.raw();
  for (int tok = 0; tok < n; ++tok) {
    const T* row = rp + static_cast<std::size_t>(tok) * p * d;
    T* orow = o + static_cast<std::size_t>(tok) * p * d;
    for (int g = 0; g < groups; ++g) {
      const int stride = stats == OffsetStats::joint ? 1 : d;
      const int first = stats == OffsetStats::joint ? 0 : g;
      T mean = T(0);
      for (int i = 0; i < group_len; ++i) mean += row[first + i * stride];
      mean /= T(group_len);
      T var = T(0);
      for (int i = 0; i < group_len; ++i) {
        const T dv = row[first + i * stride] - mean;
        var += dv * dv;
      }
      var /= T(group_len);
      const T sd = std::sqrt(var);
      sigma[static_cast<std::size_t>(tok) * groups + g] = sd;
      if (static_cast<double>(sd) < kDegenerateOffsetStd) {
        log::warn_once("degenerate-offsets",
                       "offset std below 1e-6 for token " + std::to_string(tok) +
                           "; emitting zero offsets");
        for (int i = 0; i < group_len; ++i) orow[first + i * stride] = T(0);
      } else {
        const T inv = T(1) / (T(3) * sd);
        for (int i = 0; i < group_len; ++i) {
          orow[first + i * stride] = (row[first + i * stride] - mean) * inv;
        }
      }
    }
  }

  if (tape && raw.requires_grad()) {
    out.set_requires_grad(true);
    raw.freeze();
    out.freeze();
    tape->record([tape, raw, out, n, p, d, groups, group_len, stats,
                  sigma = std::move(sigma)]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gr = tape->grad(raw);
      const T* y = out.data();
      for (int tok = 0; tok < n; ++tok) {
        const std::size_t base = static_cast<std::size_t>(tok) * p * d;
        for (int g = 0; g < groups; ++g) {
          const T sd = sigma[static_cast<std::size_t>(tok) * groups + g];
          if (static_cast<double>(sd) < kDegenerateOffsetStd) continue;
          const int stride = stats == OffsetStats::joint ? 1 : d;
          const int first = stats == OffsetStats::joint ? 0 : g;
          // y = (v - mean) / (3 sd), z = 3 y:
          // dv_j = (g_j - mean(g) - z_j * mean(g.z)) / (3 sd)
          T gmean = T(0), gz_mean = T(0);
          for (int i = 0; i < group_len; ++i) {
            const std::size_t at = base + first + static_cast<std::size_t>(i) * stride;
            const T z = T(3) * y[at];
            gmean += (*go)[at];
            gz_mean += (*go)[at] * z;
          }
          gmean /= T(group_len);
          gz_mean /= T(group_len);
          const T inv = T(1) / (T(3) * sd);
          for (int i = 0; i < group_len; ++i) {
            const std::size_t at = base + first + static_cast<std::size_t>(i) * stride;
            const T z = T(3) * y[at];
            gr[at] += inv * ((*go)[at] - gmean - z * gz_mean);
          }
        }
      }
    });
  }
  return out;
}

// Offset head: standardized offsets from a layer-normalized embedding.
template <typename T>
Tensor<T> generate_offsets(Tape<T>* tape, const Tensor<T>& embeddings,
                           const Tensor<T>& ln_gamma, const Tensor<T>& ln_beta,
                           const Tensor<T>& w, const Tensor<T>& b, int points, int coord_dims,
                           OffsetStats stats) {
  if (w.dim(1) != points * coord_dims) {
    throw DimError("offset layer emits " + std::to_string(w.dim(1)) + " values, expected " +
                   std::to_string(points * coord_dims));
  }
  const int n = embeddings.dim(0);
  Tensor<T> raw = linear(tape, layer_norm(tape, embeddings, ln_gamma, ln_beta), w, b);
  return normalize_offsets(tape, raw.reshaped({n, points, coord_dims}), stats);
}

namespace detail {
inline int roi_center_col(int axis) { return axis < 2 ? axis : 4; }
inline int roi_extent_col(int axis) { return axis < 2 ? axis + 2 : 5; }
}  // namespace detail

// Absolute sampling locations from offsets and RoIs:
//   pt_axis = center_axis + 0.5 * offset_axis * extent_axis
template <typename T>
Tensor<T> offsets_to_points(Tape<T>* tape, const Tensor<T>& offsets, const Tensor<T>& rois) {
  if (offsets.ndim() != 3 || rois.ndim() != 2 || offsets.dim(0) != rois.dim(0)) {
    throw DimError("offsets_to_points shape mismatch: offsets " + shape_str(offsets.shape()) +
                   ", rois " + shape_str(rois.shape()));
  }
  const int n = offsets.dim(0), p = offsets.dim(1), d = offsets.dim(2);
  if ((d == 2 && rois.dim(1) != 4) || (d == 3 && rois.dim(1) != 6) || d < 2 || d > 3) {
    throw DimError("offsets " + shape_str(offsets.shape()) + " incompatible with rois " +
                   shape_str(rois.shape()));
  }
  const int rc = rois.dim(1);
  Tensor<T> out(offsets.shape());
  const T* op = offsets.data();
  const T* rp = rois.data();
  T* pt = out.raw();
  for (int tok = 0; tok < n; ++tok) {
    const T* roi = rp + static_cast<std::size_t>(tok) * rc;
    for (int i = 0; i < p; ++i) {
      for (int a = 0; a < d; ++a) {
        const std::size_t at = (static_cast<std::size_t>(tok) * p + i) * d + a;
        pt[at] = roi[detail::roi_center_col(a)] +
                 T(0.5) * op[at] * roi[detail::roi_extent_col(a)];
      }
    }
  }
  const bool rec = tape && (offsets.requires_grad() || rois.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    offsets.freeze();
    rois.freeze();
    out.freeze();
    tape->record([tape, offsets, rois, out, n, p, d, rc]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      std::vector<T>* goff = offsets.requires_grad() ? &tape->grad(offsets) : nullptr;
      std::vector<T>* groi = rois.requires_grad() ? &tape->grad(rois) : nullptr;
      const T* op = offsets.data();
      const T* rp = rois.data();
      for (int tok = 0; tok < n; ++tok) {
        const T* roi = rp + static_cast<std::size_t>(tok) * rc;
        for (int i = 0; i < p; ++i) {
          for (int a = 0; a < d; ++a) {
            const std::size_t at = (static_cast<std::size_t>(tok) * p + i) * d + a;
            const T g = (*go)[at];
            if (goff) (*goff)[at] += g * T(0.5) * roi[detail::roi_extent_col(a)];
            if (groi) {
              (*groi)[static_cast<std::size_t>(tok) * rc + detail::roi_center_col(a)] += g;
              (*groi)[static_cast<std::size_t>(tok) * rc + detail::roi_extent_col(a)] +=
                  g * T(0.5) * op[at];
            }
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

template <typename T>
void check_points_finite(const Tensor<T>& points) {
  const T* pp = points.data();
  const int n = points.dim(0), p = points.dim(1), d = points.dim(2);
  for (int tok = 0; tok < n; ++tok) {
    for (int i = 0; i < p; ++i) {
      for (int a = 0; a < d; ++a) {
        if (!std::isfinite(static_cast<double>(pp[(static_cast<std::size_t>(tok) * p + i) * d + a]))) {
          throw NumericError("non-finite sampling point at token " + std::to_string(tok) +
                             ", point " + std::to_string(i));
        }
      }
    }
  }
}

}  // namespace detail

// Bilinear interpolation of features [C x H x W] at points [N x P x 2].
// Gradients flow to the feature map and to the point coordinates.
template <typename T>
Tensor<T> bilinear_sample(Tape<T>* tape, const Tensor<T>& features, const Tensor<T>& points) {
  if (features.ndim() != 3 || points.ndim() != 3 || points.dim(2) != 2) {
    throw DimError("bilinear_sample expects features [CxHxW] and points [NxPx2], got " +
                   shape_str(features.shape()) + " and " + shape_str(points.shape()));
  }
  detail::check_points_finite(points);
  const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
  const int n = points.dim(0), p = points.dim(1);
  Tensor<T> out({n, p, c});
  T* o = out.raw();
  const T* fp = features.data();
  const T* pp = points.data();
  for (int tok = 0; tok < n; ++tok) {
    for (int i = 0; i < p; ++i) {
      const std::size_t pt = (static_cast<std::size_t>(tok) * p + i) * 2;
      const T u = pp[pt] * T(w) - T(0.5);
      const T v = pp[pt + 1] * T(h) - T(0.5);
      const int x0 = static_cast<int>(std::floor(u));
      const int y0 = static_cast<int>(std::floor(v));
      const T fx = u - T(x0);
      const T fy = v - T(y0);
      T* orow = o + (static_cast<std::size_t>(tok) * p + i) * c;
      for (int ch = 0; ch < c; ++ch) {
        const T* plane = fp + static_cast<std::size_t>(ch) * h * w;
        auto pick = [&](int yy, int xx) -> T {
          return (yy < 0 || yy >= h || xx < 0 || xx >= w)
                     ? T(0)
                     : plane[static_cast<std::size_t>(yy) * w + xx];
        };
        const T f00 = pick(y0, x0), f10 = pick(y0, x0 + 1);
        const T f01 = pick(y0 + 1, x0), f11 = pick(y0 + 1, x0 + 1);
        orow[ch] = (T(1) - fy) * ((T(1) - fx) * f00 + fx * f10) +
                   fy * ((T(1) - fx) * f01 + fx * f11);
      }
    }
  }

  const bool rec = tape && (features.requires_grad() || points.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    features.freeze();
    points.freeze();
    out.freeze();
    tape->record([tape, features, points, out, c, h, w, n, p]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      std::vector<T>* gf = features.requires_grad() ? &tape->grad(features) : nullptr;
      std::vector<T>* gp = points.requires_grad() ? &tape->grad(points) : nullptr;
      const T* fp = features.data();
      const T* pp = points.data();
      for (int tok = 0; tok < n; ++tok) {
        for (int i = 0; i < p; ++i) {
          const std::size_t pt = (static_cast<std::size_t>(tok) * p + i) * 2;
          const T u = pp[pt] * T(w) - T(0.5);
          const T v = pp[pt + 1] * T(h) - T(0.5);
          const int x0 = static_cast<int>(std::floor(u));
          const int y0 = static_cast<int>(std::floor(v));
          const T fx = u - T(x0);
          const T fy = v - T(y0);
          const T w00 = (T(1) - fx) * (T(1) - fy), w10 = fx * (T(1) - fy);
          const T w01 = (T(1) - fx) * fy, w11 = fx * fy;
          const T* grow = go->data() + (static_cast<std::size_t>(tok) * p + i) * c;
          T du = T(0), dv = T(0);
          for (int ch = 0; ch < c; ++ch) {
            const T* plane = fp + static_cast<std::size_t>(ch) * h * w;
            auto in_range = [&](int yy, int xx) { return yy >= 0 && yy < h && xx >= 0 && xx < w; };
            auto pick = [&](int yy, int xx) -> T {
              return in_range(yy, xx) ? plane[static_cast<std::size_t>(yy) * w + xx] : T(0);
            };
            const T g = grow[ch];
            if (gf) {
              T* gplane = gf->data() + static_cast<std::size_t>(ch) * h * w;
              if (in_range(y0, x0)) gplane[static_cast<std::size_t>(y0) * w + x0] += g * w00;
              if (in_range(y0, x0 + 1)) gplane[static_cast<std::size_t>(y0) * w + x0 + 1] += g * w10;
              if (in_range(y0 + 1, x0)) gplane[static_cast<std::size_t>(y0 + 1) * w + x0] += g * w01;
              if (in_range(y0 + 1, x0 + 1)) gplane[static_cast<std::size_t>(y0 + 1) * w + x0 + 1] += g * w11;
            }
            if (gp) {
              const T f00 = pick(y0, x0), f10 = pick(y0, x0 + 1);
              const T f01 = pick(y0 + 1, x0), f11 = pick(y0 + 1, x0 + 1);
              du += g * ((T(1) - fy) * (f10 - f00) + fy * (f11 - f01));
              dv += g * ((T(1) - fx) * (f01 - f00) + fx * (f11 - f10));
            }
          }
          if (gp) {
            (*gp)[pt] += du * T(w);
            (*gp)[pt + 1] += dv * T(h);
          }
        }
      }
    });
  }
  return out;
}

// Trilinear interpolation of features [C x Tm x H x W] at points [N x P x 3]
// with point layout (x, y, z); z indexes the temporal axis.
template <typename T>
Tensor<T> trilinear_sample(Tape<T>* tape, const Tensor<T>& features, const Tensor<T>& points) {
  if (features.ndim() != 4 || points.ndim() != 3 || points.dim(2) != 3) {
    throw DimError("trilinear_sample expects features [CxTxHxW] and points [NxPx3], got " +
                   shape_str(features.shape()) + " and " + shape_str(points.shape()));
  }
  detail::check_points_finite(points);
  const int c = features.dim(0), tm = features.dim(1), h = features.dim(2), w = features.dim(3);
  const int n = points.dim(0), p = points.dim(1);
  Tensor<T> out({n, p, c});
  T* o = out.raw();
  const T* fp = features.data();
  const T* pp = points.data();

  auto corners = [&](T u, T v, T t, int& x0, int& y0, int& z0, T& fx, T& fy, T& fz) {
    x0 = static_cast<int>(std::floor(u));
    y0 = static_cast<int>(std::floor(v));
    z0 = static_cast<int>(std::floor(t));
    fx = u - T(x0);
    fy = v - T(y0);
    fz = t - T(z0);
  };

  for (int tok = 0; tok < n; ++tok) {
    for (int i = 0; i < p; ++i) {
      const std::size_t pt = (static_cast<std::size_t>(tok) * p + i) * 3;
      const T u = pp[pt] * T(w) - T(0.5);
      const T v = pp[pt + 1] * T(h) - T(0.5);
      const T t = pp[pt + 2] * T(tm) - T(0.5);
      int x0, y0, z0;
      T fx, fy, fz;
      corners(u, v, t, x0, y0, z0, fx, fy, fz);
      T* orow = o + (static_cast<std::size_t>(tok) * p + i) * c;
      for (int ch = 0; ch < c; ++ch) {
        const T* vol = fp + static_cast<std::size_t>(ch) * tm * h * w;
        auto pick = [&](int zz, int yy, int xx) -> T {
          return (zz < 0 || zz >= tm || yy < 0 || yy >= h || xx < 0 || xx >= w)
                     ? T(0)
                     : vol[(static_cast<std::size_t>(zz) * h + yy) * w + xx];
        };
        T acc = T(0);
        for (int zi = 0; zi < 2; ++zi) {
          const T wz = zi ? fz : T(1) - fz;
          for (int yi = 0; yi < 2; ++yi) {
            const T wy = yi ? fy : T(1) - fy;
            for (int xi = 0; xi < 2; ++xi) {
              const T wx = xi ? fx : T(1) - fx;
              acc += wz * wy * wx * pick(z0 + zi, y0 + yi, x0 + xi);
            }
          }
        }
        orow[ch] = acc;
      }
    }
  }

  const bool rec = tape && (features.requires_grad() || points.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    features.freeze();
    points.freeze();
    out.freeze();
    tape->record([tape, features, points, out, c, tm, h, w, n, p, corners]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      std::vector<T>* gf = features.requires_grad() ? &tape->grad(features) : nullptr;
      std::vector<T>* gp = points.requires_grad() ? &tape->grad(points) : nullptr;
      const T* fp = features.data();
      const T* pp = points.data();
      for (int tok = 0; tok < n; ++tok) {
        for (int i = 0; i < p; ++i) {
          const std::size_t pt = (static_cast<std::size_t>(tok) * p + i) * 3;
          const T u = pp[pt] * T(w) - T(0.5);
          const T v = pp[pt + 1] * T(h) - T(0.5);
          const T t = pp[pt + 2] * T(tm) - T(0.5);
          int x0, y0, z0;
          T fx, fy, fz;
          corners(u, v, t, x0, y0, z0, fx, fy, fz);
          const T* grow = go->data() + (static_cast<std::size_t>(tok) * p + i) * c;
          T du = T(0), dv = T(0), dt = T(0);
          for (int ch = 0; ch < c; ++ch) {
            const T* vol = fp + static_cast<std::size_t>(ch) * tm * h * w;
            auto in_range = [&](int zz, int yy, int xx) {
              return zz >= 0 && zz < tm && yy >= 0 && yy < h && xx >= 0 && xx < w;
            };
            auto pick = [&](int zz, int yy, int xx) -> T {
              return in_range(zz, yy, xx) ? vol[(static_cast<std::size_t>(zz) * h + yy) * w + xx]
                                          : T(0);
            };
            const T g = grow[ch];
            for (int zi = 0; zi < 2; ++zi) {
              const T wz = zi ? fz : T(1) - fz;
              const T sz = zi ? T(1) : T(-1);
              for (int yi = 0; yi < 2; ++yi) {
                const T wy = yi ? fy : T(1) - fy;
                const T sy = yi ? T(1) : T(-1);
                for (int xi = 0; xi < 2; ++xi) {
                  const T wx = xi ? fx : T(1) - fx;
                  const T sx = xi ? T(1) : T(-1);
                  const T f = pick(z0 + zi, y0 + yi, x0 + xi);
                  if (gf && in_range(z0 + zi, y0 + yi, x0 + xi)) {
                    (*gf)[static_cast<std::size_t>(ch) * tm * h * w +
                          (static_cast<std::size_t>(z0 + zi) * h + (y0 + yi)) * w + (x0 + xi)] +=
                        g * wz * wy * wx;
                  }
                  du += g * sx * wz * wy * f;
                  dv += g * sy * wz * wx * f;
                  dt += g * sz * wy * wx * f;
                }
              }
            }
          }
          if (gp) {
            (*gp)[pt] += du * T(w);
            (*gp)[pt + 1] += dv * T(h);
            (*gp)[pt + 2] += dt * T(tm);
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

// Shared update for RoIs and tubes over (center, extent) column pairs:
//   center' = center + delta_c * extent;  extent' = extent * exp(delta_e)
template <typename T>
Tensor<T> adjust_regions(Tape<T>* tape, const Tensor<T>& rois, const Tensor<T>& deltas,
                         int cols) {
  if (rois.ndim() != 2 || deltas.ndim() != 2 || rois.dim(1) != cols ||
      deltas.dim(1) != cols || rois.dim(0) != deltas.dim(0)) {
    throw DimError("adjust shape mismatch: rois " + shape_str(rois.shape()) + ", deltas " +
                   shape_str(deltas.shape()));
  }
  const int n = rois.dim(0);
  const int pairs = cols / 2;
  Tensor<T> out(rois.shape());
  const T* rp = rois.data();
  const T* dp = deltas.data();
  T* o = out.raw();
  for (int tok = 0; tok < n; ++tok) {
    const std::size_t base = static_cast<std::size_t>(tok) * cols;
    for (int pr = 0; pr < pairs; ++pr) {
      const int cc = roi_center_col(pr);
      const int ce = roi_extent_col(pr);
      o[base + cc] = rp[base + cc] + dp[base + cc] * rp[base + ce];
      o[base + ce] = rp[base + ce] * std::exp(dp[base + ce]);
    }
  }
  const bool rec = tape && (rois.requires_grad() || deltas.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    rois.freeze();
    deltas.freeze();
    out.freeze();
    tape->record([tape, rois, deltas, out, n, cols, pairs]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      std::vector<T>* gr = rois.requires_grad() ? &tape->grad(rois) : nullptr;
      std::vector<T>* gd = deltas.requires_grad() ? &tape->grad(deltas) : nullptr;
      const T* rp = rois.data();
      const T* dp = deltas.data();
      for (int tok = 0; tok < n; ++tok) {
        const std::size_t base = static_cast<std::size_t>(tok) * cols;
        for (int pr = 0; pr < pairs; ++pr) {
          const int cc = roi_center_col(pr);
          const int ce = roi_extent_col(pr);
          const T gc = (*go)[base + cc];
          const T ge = (*go)[base + ce];
          const T ex = std::exp(dp[base + ce]);
          if (gr) {
            (*gr)[base + cc] += gc;
            (*gr)[base + ce] += gc * dp[base + cc] + ge * ex;
          }
          if (gd) {
            (*gd)[base + cc] += gc * rp[base + ce];
            (*gd)[base + ce] += ge * rp[base + ce] * ex;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> adjust_roi(Tape<T>* tape, const Tensor<T>& rois, const Tensor<T>& deltas) {
  return detail::adjust_regions(tape, rois, deltas, 4);
}

template <typename T>
Tensor<T> adjust_tube(Tape<T>* tape, const Tensor<T>& tubes, const Tensor<T>& deltas) {
  return detail::adjust_regions(tape, tubes, deltas, 6);
}

}  // namespace spf
