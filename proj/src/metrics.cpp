#include "luser/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace luser {

namespace {

constexpr std::size_t kWindow = 11;
constexpr double kWindowSigma = 1.5;

template <typename T>
std::vector<T> gaussian_window_1d() {
  std::vector<T> w(kWindow);
  const double c = (kWindow - 1) / 2.0;
  double sum = 0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double d = static_cast<double>(i) - c;
    const double v = std::exp(-d * d / (2.0 * kWindowSigma * kWindowSigma));
    w[i] = static_cast<T>(v);
    sum += v;
  }
  for (auto& v : w) v = static_cast<T>(static_cast<double>(v) / sum);
  return w;
}

// Separable windowed local mean over valid positions.
template <typename T>
std::vector<T> local_mean(const T* img, std::size_t h, std::size_t w,
                          const std::vector<T>& win) {
  const std::size_t oh = h - kWindow + 1, ow = w - kWindow + 1;
  std::vector<T> rows(oh * w, T(0));
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      T acc = 0;
      for (std::size_t k = 0; k < kWindow; ++k) {
        acc += win[k] * img[(r + k) * w + c];
      }
      rows[r * w + c] = acc;
    }
  }
  std::vector<T> out(oh * ow, T(0));
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      T acc = 0;
      for (std::size_t k = 0; k < kWindow; ++k) {
        acc += win[k] * rows[r * w + c + k];
      }
      out[r * ow + c] = acc;
    }
  }
  return out;
}

}  // namespace

template <typename T>
T psnr(const Tensor<T>& x_true, const Tensor<T>& x_hat) {
  check_same_shape(x_true, x_hat, "psnr");
  const T* a = x_true.data();
  const T* b = x_hat.data();
  const std::size_t n = x_true.size();
  T peak = a[0];
  T err = 0;
  for (std::size_t i = 0; i < n; ++i) {
    peak = std::max(peak, a[i]);
    const T d = a[i] - b[i];
    err += d * d;
  }
  err /= static_cast<T>(n);
  if (err <= T(0)) return T(100);
  const T val = T(10) * std::log10(peak * peak / err);
  return std::min(val, T(100));
}

template <typename T>
T ssim(const Tensor<T>& x_true, const Tensor<T>& x_hat) {
  check_same_shape(x_true, x_hat, "ssim");
  if (x_true.rank() != 4) {
    throw ShapeError("ssim: expected [B,C,H,W], got " +
                     shape_str(x_true.shape()));
  }
  const std::size_t B = x_true.dim(0), C = x_true.dim(1), H = x_true.dim(2),
                    W = x_true.dim(3);
  if (H < kWindow || W < kWindow) {
    throw ShapeError("ssim: image " + std::to_string(H) + "x" +
                     std::to_string(W) + " smaller than the 11x11 window");
  }
  // symmetric peak estimate keeps ssim(a,b) == ssim(b,a)
  const T* pa = x_true.data();
  const T* pb = x_hat.data();
  T peak = static_cast<T>(1e-12);
  for (std::size_t i = 0; i < x_true.size(); ++i) {
    peak = std::max(peak, std::max(pa[i], pb[i]));
  }
  const T L = peak;
  const T c1 = static_cast<T>(0.01) * L * static_cast<T>(0.01) * L;
  const T c2 = static_cast<T>(0.03) * L * static_cast<T>(0.03) * L;
  const auto win = gaussian_window_1d<T>();
  const std::size_t hw = H * W;

  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* xa = x_true.data() + (b * C + c) * hw;
      const T* xb = x_hat.data() + (b * C + c) * hw;
      std::vector<T> aa(hw), bb(hw), ab(hw);
      for (std::size_t i = 0; i < hw; ++i) {
        aa[i] = xa[i] * xa[i];
        bb[i] = xb[i] * xb[i];
        ab[i] = xa[i] * xb[i];
      }
      const auto mu_a = local_mean(xa, H, W, win);
      const auto mu_b = local_mean(xb, H, W, win);
      const auto m_aa = local_mean(aa.data(), H, W, win);
      const auto m_bb = local_mean(bb.data(), H, W, win);
      const auto m_ab = local_mean(ab.data(), H, W, win);
      double acc = 0;
      for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const T ma = mu_a[i], mb = mu_b[i];
        const T va = m_aa[i] - ma * ma;
        const T vb = m_bb[i] - mb * mb;
        const T cov = m_ab[i] - ma * mb;
        const T num = (T(2) * ma * mb + c1) * (T(2) * cov + c2);
        const T den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        acc += static_cast<double>(num / den);
      }
      total += acc / static_cast<double>(mu_a.size());
    }
  }
  return static_cast<T>(total / static_cast<double>(B * C));
}

template float psnr(const Tensor<float>&, const Tensor<float>&);
template double psnr(const Tensor<double>&, const Tensor<double>&);
template float ssim(const Tensor<float>&, const Tensor<float>&);
template double ssim(const Tensor<double>&, const Tensor<double>&);

}  // namespace luser
