#pragma once

#include "luser/tensor.hpp"

namespace luser {

/// 10*log10(max(x_true)^2 / MSE) in dB, clamped at 100 for vanishing MSE.
template <typename T>
T psnr(const Tensor<T>& x_true, const Tensor<T>& x_hat);

/// Windowed structural similarity: 11x11 Gaussian window (sigma 1.5),
/// C1=(0.01 L)^2, C2=(0.03 L)^2 with L = max(x_true), averaged over valid
/// windows (per-channel mean for multi-channel input). Throws when the
/// image is smaller than the window.
template <typename T>
T ssim(const Tensor<T>& x_true, const Tensor<T>& x_hat);

extern template float psnr(const Tensor<float>&, const Tensor<float>&);
extern template double psnr(const Tensor<double>&, const Tensor<double>&);
extern template float ssim(const Tensor<float>&, const Tensor<float>&);
extern template double ssim(const Tensor<double>&, const Tensor<double>&);

}  // namespace luser
