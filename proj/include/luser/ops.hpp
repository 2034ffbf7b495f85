#pragma once

#include "luser/tape.hpp"
#include "luser/tensor.hpp"

namespace luser {

/// Running statistics for batch normalization. Updated in train mode under
/// NoGrad; never part of the differentiated graph.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static BatchNormState init(std::size_t channels) {
    BatchNormState s;
    s.running_mean = Tensor<T>::zeros({channels});
    s.running_var = Tensor<T>::full({channels}, T(1));
    return s;
  }
};

// ---- convolution --------------------------------------------------------

/// 2-d cross-correlation, stride 1. input [B,Cin,H,W], weight
/// [Cout,Cin,kh,kw], bias [Cout] or empty. Output spatial extent is
/// H + 2*pad - kh + 1. Differentiable in input, weight, and bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int pad);

/// Non-recording kernels, shared with the measurement operators.
template <typename T>
Tensor<T> conv2d_raw(const Tensor<T>& input, const Tensor<T>& weight,
                     const Tensor<T>& bias, int pad);
template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& weight,
                            int pad, std::size_t in_h, std::size_t in_w);
template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& input,
                             int pad, std::size_t kh, std::size_t kw);

// ---- activations and normalization --------------------------------------

/// Elementwise max(x, slope*x); slope must lie in (0,1).
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Per (sample, group) zero-mean unit-variance normalization followed by the
/// per-channel affine gamma*x + beta. Channel count must divide by groups.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups,
                     const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

/// Train mode normalizes with batch statistics and updates the running
/// state; eval mode normalizes with the running state.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormState<T>& state,
                     bool train, T momentum, T eps);

/// weight / sigma_hat where sigma_hat = u^T mat(W) v; u and v are treated as
/// constants (their power-iteration update happens outside recording).
template <typename T>
Tensor<T> spectral_scale(const Tensor<T>& weight, const Tensor<T>& u,
                         const Tensor<T>& v);

// ---- structure ----------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Channels [c0, c1) of a [B,C,H,W] tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t c0, std::size_t c1);

// ---- arithmetic ----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

/// a + c*b for a constant c.
template <typename T>
Tensor<T> add_scaled(const Tensor<T>& a, const Tensor<T>& b, T c);

/// Constant scale.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c);

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// x scaled by a single-element tensor (a learnable scalar such as a step
/// size); differentiable in both.
template <typename T>
Tensor<T> mul_scalar_param(const Tensor<T>& x, const Tensor<T>& s);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

/// Mean squared error over all elements, as a single-element tensor.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

// ---- misc ----------------------------------------------------------------

/// Fan-in scaled uniform init for a conv weight [Cout,Cin,kh,kw].
template <typename T>
Tensor<T> conv_weight_init(std::size_t cout, std::size_t cin, std::size_t k,
                           std::mt19937_64& rng);

#define LUSER_OPS_EXTERN(T)                                                   \
  extern template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,        \
                                   const Tensor<T>&, int);                    \
  extern template Tensor<T> conv2d_raw(const Tensor<T>&, const Tensor<T>&,    \
                                       const Tensor<T>&, int);                \
  extern template Tensor<T> conv2d_grad_input(const Tensor<T>&,               \
                                              const Tensor<T>&, int,          \
                                              std::size_t, std::size_t);      \
  extern template Tensor<T> conv2d_grad_weight(const Tensor<T>&,              \
                                               const Tensor<T>&, int,         \
                                               std::size_t, std::size_t);     \
  extern template Tensor<T> leaky_relu(const Tensor<T>&, T);                  \
  extern template Tensor<T> relu(const Tensor<T>&);                           \
  extern template Tensor<T> group_norm(const Tensor<T>&, std::size_t,         \
                                       const Tensor<T>&, const Tensor<T>&,    \
                                       T);                                    \
  extern template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&,    \
                                       const Tensor<T>&, BatchNormState<T>&,  \
                                       bool, T, T);                           \
  extern template Tensor<T> spectral_scale(const Tensor<T>&,                  \
                                           const Tensor<T>&,                  \
                                           const Tensor<T>&);                 \
  extern template Tensor<T> concat_channels(const Tensor<T>&,                 \
                                            const Tensor<T>&);                \
  extern template Tensor<T> slice_channels(const Tensor<T>&, std::size_t,     \
                                           std::size_t);                      \
  extern template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);          \
  extern template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);          \
  extern template Tensor<T> add_scaled(const Tensor<T>&, const Tensor<T>&,    \
                                       T);                                    \
  extern template Tensor<T> scale(const Tensor<T>&, T);                       \
  extern template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);          \
  extern template Tensor<T> mul_scalar_param(const Tensor<T>&,                \
                                             const Tensor<T>&);               \
  extern template Tensor<T> sum_all(const Tensor<T>&);                        \
  extern template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);          \
  extern template Tensor<T> conv_weight_init(std::size_t, std::size_t,        \
                                             std::size_t, std::mt19937_64&);

LUSER_OPS_EXTERN(float)
LUSER_OPS_EXTERN(double)
#undef LUSER_OPS_EXTERN

}  // namespace luser
