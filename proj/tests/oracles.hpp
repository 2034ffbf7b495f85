#pragma once

// Independent reference computations for the test suites. Everything here
// recomputes results through a different route than the library (dense
// matrices, direct per-window sums, finite differences) so the two sides
// can check each other.

#include <cmath>
#include <functional>
#include <vector>

#include "luser/tensor.hpp"

namespace oracles {

using luser::Shape;
using luser::Tensor;

/// Central finite differences of a scalar-valued function at x.
template <typename T>
Tensor<T> finite_difference_grad(
    const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
    T h = static_cast<T>(1e-4)) {
  Tensor<T> g(x.shape());
  T* gp = g.mutable_data();
  Tensor<T> probe = x;
  T* pp = probe.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = pp[i];
    pp[i] = orig + h;
    const T fp = f(probe);
    pp[i] = orig - h;
    const T fm = f(probe);
    pp[i] = orig;
    gp[i] = (fp - fm) / (2 * h);
  }
  return g;
}

/// Convolution materialized as an explicit dense matrix (im2col style):
/// out[row] = sum_col M[row,col] * in[col], rows indexing [co,ho,wo] and
/// cols indexing [ci,h,w] of one sample.
template <typename T>
std::vector<T> conv_as_matrix(const Tensor<T>& weight, std::size_t h,
                              std::size_t w, int pad) {
  const std::size_t co = weight.dim(0), ci = weight.dim(1),
                    kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t ho = h + 2 * pad - kh + 1, wo = w + 2 * pad - kw + 1;
  const std::size_t rows = co * ho * wo, cols = ci * h * w;
  std::vector<T> m(rows * cols, T(0));
  for (std::size_t oc = 0; oc < co; ++oc) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t row = (oc * ho + oy) * wo + ox;
        for (std::size_t icn = 0; icn < ci; ++icn) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long iy = static_cast<long>(oy + ky) - pad;
              const long ix = static_cast<long>(ox + kx) - pad;
              if (iy < 0 || iy >= static_cast<long>(h) || ix < 0 ||
                  ix >= static_cast<long>(w)) {
                continue;
              }
              const std::size_t col =
                  (icn * h + static_cast<std::size_t>(iy)) * w +
                  static_cast<std::size_t>(ix);
              m[row * cols + col] = weight.at4(oc, icn, ky, kx);
            }
          }
        }
      }
    }
  }
  return m;
}

/// Dense gaussian elimination (own copy; the library keeps its own).
template <typename T>
std::vector<T> solve_linear(std::vector<T> a, std::vector<T> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    }
    for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
    std::swap(b[col], b[piv]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const T f = a[r * n + col] / a[col * n + col];
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  for (std::size_t r = n; r-- > 0;) {
    T acc = b[r];
    for (std::size_t c = r + 1; c < n; ++c) acc -= a[r * n + c] * b[c];
    b[r] = acc / a[r * n + r];
  }
  return b;
}

/// Largest singular value via cyclic Jacobi on the Gram matrix.
template <typename T>
T largest_singular_value(const std::vector<T>& m, std::size_t rows,
                         std::size_t cols) {
  // gram = m^T m (cols x cols) when cols <= rows, else m m^T
  const bool use_cols = cols <= rows;
  const std::size_t n = use_cols ? cols : rows;
  std::vector<double> a(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      if (use_cols) {
        for (std::size_t k = 0; k < rows; ++k) {
          acc += static_cast<double>(m[k * cols + i]) *
                 static_cast<double>(m[k * cols + j]);
        }
      } else {
        for (std::size_t k = 0; k < cols; ++k) {
          acc += static_cast<double>(m[i * cols + k]) *
                 static_cast<double>(m[j * cols + k]);
        }
      }
      a[i * n + j] = acc;
    }
  }
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    }
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-30) continue;
        const double app = a[p * n + p], aqq = a[q * n + q];
        const double phi = 0.5 * std::atan2(2 * apq, aqq - app);
        const double c = std::cos(phi), s = std::sin(phi);
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
    }
  }
  double lmax = 0;
  for (std::size_t i = 0; i < n; ++i) lmax = std::max(lmax, a[i * n + i]);
  return static_cast<T>(std::sqrt(std::max(0.0, lmax)));
}

template <typename T>
T relative_error(const Tensor<T>& got, const Tensor<T>& want) {
  T num = 0, den = 0;
  const T* g = got.data();
  const T* w = want.data();
  for (std::size_t i = 0; i < got.size(); ++i) {
    num += (g[i] - w[i]) * (g[i] - w[i]);
    den += w[i] * w[i];
  }
  return std::sqrt(num) / (std::sqrt(den) + static_cast<T>(1e-30));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  T m = 0;
  const T* p = a.data();
  const T* q = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(p[i] - q[i]));
  }
  return m;
}

}  // namespace oracles
