#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sparseformer/fsum.hpp"
#include "sparseformer/tensor.hpp"

// Neural primitives over the tape. Every op computes its output eagerly and,
// when a tape is present and an input requires grad, records one closure that
// accumulates input gradients from the output gradient. Reduction loops are
// sequential row-major, so repeated runs are bitwise identical; reductions
// over the token axis additionally use ExactSum, making them independent of
// token order.

namespace spf {

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void mm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::size_t>(i) * n;
    const T* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void transpose_into(const T* a, T* at, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      at[static_cast<std::size_t>(j) * rows + i] = a[static_cast<std::size_t>(i) * cols + j];
    }
  }
}

template <typename T>
inline T gauss_cdf(T x) {
  return T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
}

template <typename T>
inline T gauss_pdf(T x) {
  return std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

template <typename T>
inline int rows_of(const Tensor<T>& x, int trailing) {
  return static_cast<int>(x.numel() / trailing);
}

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                   shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  detail::mm_acc(a.data(), b.data(), out.raw(), m, k, n);

  const bool rec = tape && (a.requires_grad() || b.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    a.freeze();
    b.freeze();
    out.freeze();
    tape->record([tape, a, b, out, m, k, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      if (a.requires_grad()) {
        // dA += G * B^T
        std::vector<T> bt(static_cast<std::size_t>(k) * n);
        detail::transpose_into(b.data(), bt.data(), k, n);
        detail::mm_acc(go->data(), bt.data(), tape->grad(a).data(), m, n, k);
      }
      if (b.requires_grad()) {
        // dB += A^T * G
        std::vector<T> at(static_cast<std::size_t>(m) * k);
        detail::transpose_into(a.data(), at.data(), m, k);
        detail::mm_acc(at.data(), go->data(), tape->grad(b).data(), k, m, n);
      }
    });
  }
  return out;
}

// Variant whose reduction over the inner axis is order-independent; used for
// the attention-weights x values product where the inner axis is the token axis.
template <typename T>
Tensor<T> matmul_stable(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                   shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  T* o = out.raw();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      if constexpr (kUseExactSums<T>) {
        o[static_cast<std::size_t>(i) * n + j] = static_cast<T>(
            exact_dot(a.data() + static_cast<std::size_t>(i) * k, b.data() + j,
                      static_cast<std::size_t>(k), static_cast<std::size_t>(n)));
      } else {
        T acc = T(0);
        for (int t = 0; t < k; ++t) {
          acc += a.data()[static_cast<std::size_t>(i) * k + t] *
                 b.data()[static_cast<std::size_t>(t) * n + j];
        }
        o[static_cast<std::size_t>(i) * n + j] = acc;
      }
    }
  }
  const bool rec = tape && (a.requires_grad() || b.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    a.freeze();
    b.freeze();
    out.freeze();
    tape->record([tape, a, b, out, m, k, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      if (a.requires_grad()) {
        std::vector<T> bt(static_cast<std::size_t>(k) * n);
        detail::transpose_into(b.data(), bt.data(), k, n);
        detail::mm_acc(go->data(), bt.data(), tape->grad(a).data(), m, n, k);
      }
      if (b.requires_grad()) {
        std::vector<T> at(static_cast<std::size_t>(m) * k);
        detail::transpose_into(a.data(), at.data(), m, k);
        detail::mm_acc(at.data(), go->data(), tape->grad(b).data(), k, m, n);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// transpose (2-D)

template <typename T>
Tensor<T> transpose(Tape<T>* tape, const Tensor<T>& x) {
  if (x.ndim() != 2) throw DimError("transpose expects 2-D, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor<T> out({n, m});
  detail::transpose_into(x.data(), out.raw(), m, n);
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, out, m, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
          gx[static_cast<std::size_t>(j) * n + i] += (*go)[static_cast<std::size_t>(i) * m + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear: x[...,k] * w[k,n] + b[n], broadcast over leading dims

template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.ndim() != 2 || x.dim(-1) != w.dim(0) || b.ndim() != 1 || b.dim(0) != w.dim(1)) {
    throw DimError("linear shape mismatch: x " + shape_str(x.shape()) + ", w " +
                   shape_str(w.shape()) + ", b " + shape_str(b.shape()));
  }
  const int k = w.dim(0), n = w.dim(1);
  const int rows = rows_of(x, k);
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  T* o = out.raw();
  detail::mm_acc(x.data(), w.data(), o, rows, k, n);
  for (int r = 0; r < rows; ++r) {
    T* orow = o + static_cast<std::size_t>(r) * n;
    const T* bp = b.data();
    for (int j = 0; j < n; ++j) orow[j] += bp[j];
  }

  const bool rec = tape && (x.requires_grad() || w.requires_grad() || b.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    x.freeze();
    w.freeze();
    b.freeze();
    out.freeze();
    tape->record([tape, x, w, b, out, rows, k, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      if (x.requires_grad()) {
        std::vector<T> wt(static_cast<std::size_t>(k) * n);
        detail::transpose_into(w.data(), wt.data(), k, n);
        detail::mm_acc(go->data(), wt.data(), tape->grad(x).data(), rows, n, k);
      }
      if (w.requires_grad()) {
        std::vector<T> xt(static_cast<std::size_t>(rows) * k);
        detail::transpose_into(x.data(), xt.data(), rows, k);
        detail::mm_acc(xt.data(), go->data(), tape->grad(w).data(), k, rows, n);
      }
      if (b.requires_grad()) {
        auto& gb = tape->grad(b);
        for (int r = 0; r < rows; ++r) {
          const T* grow = go->data() + static_cast<std::size_t>(r) * n;
          for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += grow[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis, affine

template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const int d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimError("layer_norm affine shape mismatch: x " + shape_str(x.shape()) +
                   ", gamma " + shape_str(gamma.shape()));
  }
  if (eps <= T(0)) throw ConfigError("layer_norm eps must be positive");
  const int rows = rows_of(x, d);
  Tensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(rows) * d);
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  const T* xp = x.data();
  T* o = out.raw();
  const T* g = gamma.data();
  const T* bt = beta.data();
  for (int r = 0; r < rows; ++r) {
    const T* row = xp + static_cast<std::size_t>(r) * d;
    T mean = T(0);
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= T(d);
    T var = T(0);
    for (int c = 0; c < d; ++c) {
      const T dv = row[c] - mean;
      var += dv * dv;
    }
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    T* xh = xhat.data() + static_cast<std::size_t>(r) * d;
    T* orow = o + static_cast<std::size_t>(r) * d;
    for (int c = 0; c < d; ++c) {
      xh[c] = (row[c] - mean) * is;
      orow[c] = g[c] * xh[c] + bt[c];
    }
  }

  const bool rec = tape && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    x.freeze();
    gamma.freeze();
    beta.freeze();
    out.freeze();
    tape->record([tape, x, gamma, beta, out, rows, d, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      const T* g = gamma.data();
      std::vector<T>* gg = gamma.requires_grad() ? &tape->grad(gamma) : nullptr;
      std::vector<T>* gb = beta.requires_grad() ? &tape->grad(beta) : nullptr;
      if (gg || gb) {
        for (int r = 0; r < rows; ++r) {
          const T* grow = go->data() + static_cast<std::size_t>(r) * d;
          const T* xh = xhat.data() + static_cast<std::size_t>(r) * d;
          for (int c = 0; c < d; ++c) {
            if (gg) (*gg)[static_cast<std::size_t>(c)] += grow[c] * xh[c];
            if (gb) (*gb)[static_cast<std::size_t>(c)] += grow[c];
          }
        }
      }
      if (x.requires_grad()) {
        auto& gx = tape->grad(x);
        for (int r = 0; r < rows; ++r) {
          const T* grow = go->data() + static_cast<std::size_t>(r) * d;
          const T* xh = xhat.data() + static_cast<std::size_t>(r) * d;
          const T is = inv_std[static_cast<std::size_t>(r)];
          T mean_dxh = T(0), mean_dxh_xh = T(0);
          for (int c = 0; c < d; ++c) {
            const T dxh = grow[c] * g[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
          }
          mean_dxh /= T(d);
          mean_dxh_xh /= T(d);
          T* gxr = gx.data() + static_cast<std::size_t>(r) * d;
          for (int c = 0; c < d; ++c) {
            const T dxh = grow[c] * g[c];
            gxr[c] += is * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// GELU, exact erf form: x * Phi(x)

template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xp = x.data();
  T* o = out.raw();
  const long long n = x.numel();
  for (long long i = 0; i < n; ++i) o[i] = xp[i] * detail::gauss_cdf(xp[i]);
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, out, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      const T* xp = x.data();
      for (long long i = 0; i < n; ++i) {
        const T v = xp[i];
        gx[static_cast<std::size_t>(i)] +=
            (*go)[static_cast<std::size_t>(i)] *
            (detail::gauss_cdf(v) + v * detail::gauss_pdf(v));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xp = x.data();
  T* o = out.raw();
  const long long n = x.numel();
  for (long long i = 0; i < n; ++i) o[i] = xp[i] > T(0) ? xp[i] : T(0);
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, out, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      const T* xp = x.data();
      for (long long i = 0; i < n; ++i) {
        if (xp[i] > T(0)) gx[static_cast<std::size_t>(i)] += (*go)[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax along an axis, max-subtracted; the lane sum is order-independent

template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, int axis = -1) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw DimError("softmax axis out of range");
  const int n = x.dim(axis);
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);

  Tensor<T> out(x.shape());
  const T* xp = x.data();
  T* o = out.raw();
  ExactSum acc;
  for (long long ou = 0; ou < outer; ++ou) {
    for (long long in = 0; in < inner; ++in) {
      const long long base = ou * n * inner + in;
      T m = xp[base];
      for (int j = 1; j < n; ++j) m = std::max(m, xp[base + j * inner]);
      T denom;
      if constexpr (kUseExactSums<T>) {
        acc.reset();
        for (int j = 0; j < n; ++j) {
          const T e = std::exp(xp[base + j * inner] - m);
          o[base + j * inner] = e;
          acc.add(static_cast<double>(e));
        }
        denom = static_cast<T>(acc.result());
      } else {
        denom = T(0);
        for (int j = 0; j < n; ++j) {
          const T e = std::exp(xp[base + j * inner] - m);
          o[base + j * inner] = e;
          denom += e;
        }
      }
      for (int j = 0; j < n; ++j) o[base + j * inner] /= denom;
    }
  }

  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, out, outer, inner, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      const T* y = out.data();
      for (long long ou = 0; ou < outer; ++ou) {
        for (long long in = 0; in < inner; ++in) {
          const long long base = ou * n * inner + in;
          T dot = T(0);
          for (int j = 0; j < n; ++j) {
            dot += (*go)[static_cast<std::size_t>(base + j * inner)] * y[base + j * inner];
          }
          for (int j = 0; j < n; ++j) {
            const std::size_t at = static_cast<std::size_t>(base + j * inner);
            gx[at] += y[base + j * inner] * ((*go)[at] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise add / constant scale

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  const T* ap = a.data();
  const T* bp = b.data();
  T* o = out.raw();
  const long long n = a.numel();
  for (long long i = 0; i < n; ++i) o[i] = ap[i] + bp[i];
  const bool rec = tape && (a.requires_grad() || b.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    a.freeze();
    b.freeze();
    out.freeze();
    tape->record([tape, a, b, out, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      if (a.requires_grad()) {
        auto& ga = tape->grad(a);
        for (long long i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += (*go)[static_cast<std::size_t>(i)];
      }
      if (b.requires_grad()) {
        auto& gb = tape->grad(b);
        for (long long i = 0; i < n; ++i) gb[static_cast<std::size_t>(i)] += (*go)[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* xp = x.data();
  T* o = out.raw();
  const long long n = x.numel();
  for (long long i = 0; i < n; ++i) o[i] = xp[i] * c;
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, out, c, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      for (long long i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += c * (*go)[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// column slice / concat over the trailing axis of a 2-D tensor

template <typename T>
Tensor<T> slice_cols(Tape<T>* tape, const Tensor<T>& x, int c0, int c1) {
  if (x.ndim() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1) {
    throw DimError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                   ") invalid for " + shape_str(x.shape()));
  }
  const int rows = x.dim(0), cols = x.dim(1), w = c1 - c0;
  Tensor<T> out({rows, w});
  const T* xp = x.data();
  T* o = out.raw();
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < w; ++c) {
      o[static_cast<std::size_t>(r) * w + c] = xp[static_cast<std::size_t>(r) * cols + c0 + c];
    }
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, out, rows, cols, w, c0]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < w; ++c) {
          gx[static_cast<std::size_t>(r) * cols + c0 + c] += (*go)[static_cast<std::size_t>(r) * w + c];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimError("concat_cols needs at least one part");
  const int rows = parts[0].dim(0);
  int total = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != rows) {
      throw DimError("concat_cols row mismatch at " + shape_str(p.shape()));
    }
    total += p.dim(1);
    needs = needs || p.requires_grad();
  }
  Tensor<T> out({rows, total});
  T* o = out.raw();
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    const T* pp = p.data();
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < w; ++c) {
        o[static_cast<std::size_t>(r) * total + off + c] = pp[static_cast<std::size_t>(r) * w + c];
      }
    }
    off += w;
  }
  if (tape && needs) {
    out.set_requires_grad(true);
    for (const auto& p : parts) p.freeze();
    out.freeze();
    tape->record([tape, parts, out, rows, total]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      int off = 0;
      for (const auto& p : parts) {
        const int w = p.dim(1);
        if (p.requires_grad()) {
          auto& gp = tape->grad(p);
          for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < w; ++c) {
              gp[static_cast<std::size_t>(r) * w + c] += (*go)[static_cast<std::size_t>(r) * total + off + c];
            }
          }
        }
        off += w;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
  T s = T(0);
  const T* xp = x.data();
  const long long n = x.numel();
  for (long long i = 0; i < n; ++i) s += xp[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, out, n]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      const T g = (*go)[0];
      for (long long i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g;
    });
  }
  return out;
}

// Mean over rows of [N x d] -> [d]; the row reduction is order-independent.
template <typename T>
Tensor<T> mean_rows(Tape<T>* tape, const Tensor<T>& x) {
  if (x.ndim() != 2) throw DimError("mean_rows expects 2-D, got " + shape_str(x.shape()));
  const int rows = x.dim(0), d = x.dim(1);
  Tensor<T> out({d});
  T* o = out.raw();
  const T* xp = x.data();
  ExactSum acc;
  for (int c = 0; c < d; ++c) {
    if constexpr (kUseExactSums<T>) {
      acc.reset();
      for (int r = 0; r < rows; ++r) acc.add(static_cast<double>(xp[static_cast<std::size_t>(r) * d + c]));
      o[c] = static_cast<T>(acc.result() / static_cast<double>(rows));
    } else {
      T sum = T(0);
      for (int r = 0; r < rows; ++r) sum += xp[static_cast<std::size_t>(r) * d + c];
      o[c] = sum / T(rows);
    }
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, out, rows, d]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      const T inv = T(1) / T(rows);
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < d; ++c) {
          gx[static_cast<std::size_t>(r) * d + c] += (*go)[static_cast<std::size_t>(c)] * inv;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d, direct loops: x[Cin x H x W], kernel [Cout x Cin x k x k]

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& kernel, int stride,
                 int pad) {
  if (x.ndim() != 3 || kernel.ndim() != 4 || kernel.dim(1) != x.dim(0) ||
      kernel.dim(2) != kernel.dim(3)) {
    throw DimError("conv2d shape mismatch: x " + shape_str(x.shape()) + ", kernel " +
                   shape_str(kernel.shape()));
  }
  const int kh = kernel.dim(2);
  if (kh % 2 == 0) throw ConfigError("conv2d kernel extent must be odd");
  if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = kernel.dim(0);
  const int oh = detail::conv_out_extent(h, kh, stride, pad);
  const int ow = detail::conv_out_extent(w, kh, stride, pad);
  if (oh < 1 || ow < 1) {
    throw DimError("conv2d output extent < 1 for input " + shape_str(x.shape()));
  }

  Tensor<T> out({cout, oh, ow});
  T* o = out.raw();
  const T* xp = x.data();
  const T* kp = kernel.data();
  for (int co = 0; co < cout; ++co) {
    for (int oy = 0; oy < oh; ++oy) {
      T* orow = o + (static_cast<std::size_t>(co) * oh + oy) * ow;
      for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* irow = xp + (static_cast<std::size_t>(ci) * h + iy) * w;
          const T* krow = kp + ((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kh;
          for (int kx = 0; kx < kh; ++kx) {
            const T kv = krow[kx];
            const int lo = (pad - kx) > 0 ? (pad - kx + stride - 1) / stride : 0;
            const int hi = std::min(ow - 1, (w - 1 + pad - kx) / stride);
            for (int ox = lo; ox <= hi; ++ox) orow[ox] += kv * irow[ox * stride + kx - pad];
          }
        }
      }
    }
  }

  const bool rec = tape && (x.requires_grad() || kernel.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    x.freeze();
    kernel.freeze();
    out.freeze();
    tape->record([tape, x, kernel, out, stride, pad, cin, h, w, cout, oh, ow, kh]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      const T* xp = x.data();
      const T* kp = kernel.data();
      std::vector<T>* gx = x.requires_grad() ? &tape->grad(x) : nullptr;
      std::vector<T>* gk = kernel.requires_grad() ? &tape->grad(kernel) : nullptr;
      for (int co = 0; co < cout; ++co) {
        for (int oy = 0; oy < oh; ++oy) {
          const T* grow = go->data() + (static_cast<std::size_t>(co) * oh + oy) * ow;
          for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              const T* irow = xp + (static_cast<std::size_t>(ci) * h + iy) * w;
              const std::size_t kbase = ((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kh;
              for (int kx = 0; kx < kh; ++kx) {
                const int lo = (pad - kx) > 0 ? (pad - kx + stride - 1) / stride : 0;
                const int hi = std::min(ow - 1, (w - 1 + pad - kx) / stride);
                if (gk) {
                  T s = T(0);
                  for (int ox = lo; ox <= hi; ++ox) s += grow[ox] * irow[ox * stride + kx - pad];
                  (*gk)[kbase + kx] += s;
                }
                if (gx) {
                  const T kv = kp[kbase + kx];
                  T* gxrow = gx->data() + (static_cast<std::size_t>(ci) * h + iy) * w;
                  for (int ox = lo; ox <= hi; ++ox) gxrow[ox * stride + kx - pad] += kv * grow[ox];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_channel_bias(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& b) {
  if (x.ndim() != 3 || b.numel() != x.dim(0)) {
    throw DimError("add_channel_bias shape mismatch: x " + shape_str(x.shape()) + ", b " +
                   shape_str(b.shape()));
  }
  const int c = x.dim(0);
  const long long plane = static_cast<long long>(x.dim(1)) * x.dim(2);
  Tensor<T> out(x.shape());
  T* o = out.raw();
  const T* xp = x.data();
  const T* bp = b.data();
  for (int ch = 0; ch < c; ++ch) {
    const T bv = bp[ch];
    for (long long i = 0; i < plane; ++i) o[ch * plane + i] = xp[ch * plane + i] + bv;
  }
  const bool rec = tape && (x.requires_grad() || b.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    x.freeze();
    b.freeze();
    out.freeze();
    tape->record([tape, x, b, out, c, plane]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      if (x.requires_grad()) {
        auto& gx = tape->grad(x);
        const long long n = c * plane;
        for (long long i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += (*go)[static_cast<std::size_t>(i)];
      }
      if (b.requires_grad()) {
        auto& gb = tape->grad(b);
        for (int ch = 0; ch < c; ++ch) {
          T s = T(0);
          for (long long i = 0; i < plane; ++i) s += (*go)[static_cast<std::size_t>(ch * plane + i)];
          gb[static_cast<std::size_t>(ch)] += s;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2d; backward routes to the first maximum in row-major window order

template <typename T>
Tensor<T> maxpool2d(Tape<T>* tape, const Tensor<T>& x, int k = 3, int stride = 2,
                    int pad = 1) {
  if (x.ndim() != 3) throw DimError("maxpool2d expects 3-D, got " + shape_str(x.shape()));
  if (k % 2 == 0) throw ConfigError("maxpool2d kernel extent must be odd");
  if (stride < 1) throw ConfigError("maxpool2d stride must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = detail::conv_out_extent(h, k, stride, pad);
  const int ow = detail::conv_out_extent(w, k, stride, pad);
  if (oh < 1 || ow < 1) {
    throw DimError("maxpool2d output extent < 1 for input " + shape_str(x.shape()));
  }
  Tensor<T> out({c, oh, ow});
  std::vector<long long> argmax(static_cast<std::size_t>(c) * oh * ow);
  T* o = out.raw();
  const T* xp = x.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T best = T(0);
        long long best_idx = -1;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            const long long idx = (static_cast<long long>(ch) * h + iy) * w + ix;
            if (best_idx < 0 || xp[idx] > best) {
              best = xp[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t oidx = (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
        o[oidx] = best;
        argmax[oidx] = best_idx;
      }
    }
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    x.freeze();
    out.freeze();
    tape->record([tape, x, out, argmax = std::move(argmax)]() {
      const auto* go = tape->find_grad(out);
      if (!go) return;
      auto& gx = tape->grad(x);
      for (std::size_t i = 0; i < argmax.size(); ++i) {
        if (argmax[i] >= 0) gx[static_cast<std::size_t>(argmax[i])] += (*go)[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention / feed-forward blocks (pre-norm wrapping is the caller's job)

// The key projection carries no bias: a per-key constant adds the same value
// to every score in a row and cancels exactly in the softmax.
template <typename T>
struct AttentionWeights {
  Tensor<T> wq, bq, wk, wv, bv, wo, bo;
};

template <typename T>
Tensor<T> multi_head_self_attention(Tape<T>* tape, const Tensor<T>& x,
                                    const AttentionWeights<T>& w, int heads) {
  if (x.ndim() != 2) throw DimError("attention expects [N x d], got " + shape_str(x.shape()));
  const int d = x.dim(1);
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const int dk = d / heads;
  const Tensor<T> q = linear(tape, x, w.wq, w.bq);
  const Tensor<T> k = matmul(tape, x, w.wk);
  const Tensor<T> v = linear(tape, x, w.wv, w.bv);
  std::vector<Tensor<T>> ctx;
  ctx.reserve(static_cast<std::size_t>(heads));
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
  for (int hh = 0; hh < heads; ++hh) {
    const Tensor<T> qh = slice_cols(tape, q, hh * dk, (hh + 1) * dk);
    const Tensor<T> kh = slice_cols(tape, k, hh * dk, (hh + 1) * dk);
    const Tensor<T> vh = slice_cols(tape, v, hh * dk, (hh + 1) * dk);
    const Tensor<T> scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
    const Tensor<T> attn = softmax(tape, scores, -1);
    ctx.push_back(matmul_stable(tape, attn, vh));
  }
  const Tensor<T> merged = heads == 1 ? ctx[0] : concat_cols(tape, ctx);
  return linear(tape, merged, w.wo, w.bo);
}

template <typename T>
struct FeedForwardWeights {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
Tensor<T> feed_forward(Tape<T>* tape, const Tensor<T>& x, const FeedForwardWeights<T>& w) {
  return linear(tape, gelu(tape, linear(tape, x, w.w1, w.b1)), w.w2, w.b2);
}

}  // namespace spf
