#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace spf {

// Correctly rounded summation over error-free partials (Shewchuk / fsum).
// The result is a pure function of the multiset of inputs, independent of
// addition order. Token-axis reductions use this so that permuting latent
// tokens leaves forward outputs bit-identical.
class ExactSum {
 public:
  void reset() { count_ = 0; }

  void add(double x) {
    std::size_t keep = 0;
    for (std::size_t j = 0; j < count_; ++j) {
      double y = partials_[j];
      if (std::fabs(x) < std::fabs(y)) {
        double t = x;
        x = y;
        y = t;
      }
      double hi = x + y;
      double lo = y - (hi - x);
      if (lo != 0.0) partials_[keep++] = lo;
      x = hi;
    }
    if (keep == partials_.size()) {
      partials_.push_back(x);
    } else {
      partials_[keep] = x;
    }
    count_ = keep + 1;
  }

  double result() const {
    if (count_ == 0) return 0.0;
    // Partials are non-overlapping and ordered by magnitude; add from the top
    // and apply the half-ulp correction when the first inexact add ties.
    std::size_t n = count_;
    double hi = partials_[--n];
    double lo = 0.0;
    while (n > 0) {
      double x = hi;
      double y = partials_[--n];
      hi = x + y;
      double yr = hi - x;
      lo = y - yr;
      if (lo != 0.0) break;
    }
    if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) ||
                  (lo > 0.0 && partials_[n - 1] > 0.0))) {
      double y = lo * 2.0;
      double x = hi + y;
      if (y == x - hi) hi = x;
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
  std::size_t count_ = 0;
};

// Order-independent dot product; terms are exact in double for float inputs.
template <typename T>
double exact_dot(const T* a, const T* b, std::size_t n, std::size_t stride_b = 1) {
  ExactSum acc;
  for (std::size_t i = 0; i < n; ++i) {
    acc.add(static_cast<double>(a[i]) * static_cast<double>(b[i * stride_b]));
  }
  return acc.result();
}

// Scalar types wider than double (extended-precision evaluation) skip the
// double-based exact summation and accumulate natively instead.
template <typename T>
inline constexpr bool kUseExactSums = sizeof(T) <= 8;

}  // namespace spf
