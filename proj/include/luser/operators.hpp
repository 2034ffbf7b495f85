#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "luser/tape.hpp"
#include "luser/tensor.hpp"

namespace luser {

enum class TaskKind { deblur, ct, mri };

std::string task_name(TaskKind k);

/// A measurement map and its exact adjoint. Operators are immutable after
/// construction; apply/adjoint only mutate the call counters.
template <typename T>
class LinearOperator {
 public:
  virtual ~LinearOperator() = default;

  Tensor<T> apply(const Tensor<T>& x) const {
    ++forward_calls_;
    return apply_impl(x);
  }
  Tensor<T> adjoint(const Tensor<T>& y) const {
    ++adjoint_calls_;
    return adjoint_impl(y);
  }

  const Shape& signal_shape() const { return signal_shape_; }
  const Shape& measurement_shape() const { return measurement_shape_; }
  TaskKind task() const { return task_; }
  virtual std::string describe() const = 0;

  std::uint64_t forward_calls() const { return forward_calls_; }
  std::uint64_t adjoint_calls() const { return adjoint_calls_; }
  void reset_counters() const { forward_calls_ = adjoint_calls_ = 0; }

 protected:
  LinearOperator(TaskKind task, Shape signal, Shape measurement)
      : task_(task),
        signal_shape_(std::move(signal)),
        measurement_shape_(std::move(measurement)) {}

  virtual Tensor<T> apply_impl(const Tensor<T>& x) const = 0;
  virtual Tensor<T> adjoint_impl(const Tensor<T>& y) const = 0;

  TaskKind task_;
  Shape signal_shape_;
  Shape measurement_shape_;

 private:
  mutable std::uint64_t forward_calls_ = 0;
  mutable std::uint64_t adjoint_calls_ = 0;
};

template <typename T>
using OperatorPtr = std::shared_ptr<const LinearOperator<T>>;

/// Gaussian blur: kernel sampled from the isotropic density at integer
/// offsets and normalized to sum 1, applied per channel with zero padding
/// and "same" output size. The forward pass flips the kernel (true
/// convolution); the adjoint correlates with the unflipped kernel, which is
/// the exact transpose under this boundary handling.
template <typename T>
OperatorPtr<T> build_gaussian_blur(std::size_t size, T variance,
                                   std::size_t channels, std::size_t height,
                                   std::size_t width);

/// Parallel-beam discrete Radon transform. Rays are sampled at half-pixel
/// steps with bilinear interpolation and accumulated into a sparse matrix;
/// the adjoint applies the exact transpose (unfiltered backprojection from
/// the same weights). Angles are every (full/selected)-th of a uniform grid
/// over [0, pi).
template <typename T>
OperatorPtr<T> build_radon(std::size_t image_side, std::size_t n_angles_full,
                           std::size_t n_selected, std::size_t n_detectors);

/// Masked orthonormal 2-d Fourier transform. The measurement is a 2-channel
/// (real, imaginary) tensor with non-kept lines zeroed; the adjoint zero
/// fills and applies the inverse transform. signal_channels is 1 (real
/// signal) or 2 (complex signal carried as two real channels).
enum class MaskAxis { rows, cols };

template <typename T>
OperatorPtr<T> build_fourier_mask(std::size_t height, std::size_t width,
                                  std::size_t acceleration, MaskAxis axis,
                                  std::uint64_t seed,
                                  std::size_t signal_channels,
                                  double center_fraction = 0.0);

/// Identity operator, for diagnostics and tests.
template <typename T>
OperatorPtr<T> build_identity(Shape shape);

/// Debug operator wrapping `inner` with an adjoint perturbed by `epsilon`;
/// the dot-product test must flag it.
template <typename T>
OperatorPtr<T> corrupt_adjoint(OperatorPtr<T> inner, T epsilon);

/// Zero-mean Gaussian measurement noise with reproducible draws.
template <typename T>
struct NoiseModel {
  T sigma = T(0.01);
  std::uint64_t seed = 0;
};

template <typename T>
Tensor<T> add_noise(const Tensor<T>& y, const NoiseModel<T>& model);

/// A^T y for ct/mri, y itself for deblurring.
template <typename T>
Tensor<T> initial_estimate(const LinearOperator<T>& op, const Tensor<T>& y);

/// Max over trials of |<Ax,y> - <x,A^T y>| / (|Ax||y| + eps).
template <typename T>
T adjoint_test(const LinearOperator<T>& op, int trials, std::uint64_t seed);

/// Recorded application of the operator: backward applies the adjoint.
template <typename T>
Tensor<T> apply_linop(const OperatorPtr<T>& op, const Tensor<T>& x);

/// Recorded application of the adjoint: backward applies the forward map.
template <typename T>
Tensor<T> apply_linop_adjoint(const OperatorPtr<T>& op, const Tensor<T>& y);

/// The blur kernel / fourier mask as a tensor, for export and inspection.
template <typename T>
Tensor<T> operator_stencil(const LinearOperator<T>& op);

#define LUSER_OPERATORS_EXTERN(T)                                             \
  extern template class LinearOperator<T>;                                    \
  extern template OperatorPtr<T> build_gaussian_blur(std::size_t, T,          \
                                                     std::size_t,             \
                                                     std::size_t,             \
                                                     std::size_t);            \
  extern template OperatorPtr<T> build_radon(std::size_t, std::size_t,        \
                                             std::size_t, std::size_t);       \
  extern template OperatorPtr<T> build_fourier_mask(                          \
      std::size_t, std::size_t, std::size_t, MaskAxis, std::uint64_t,         \
      std::size_t, double);                                                   \
  extern template OperatorPtr<T> build_identity(Shape);                       \
  extern template OperatorPtr<T> corrupt_adjoint(OperatorPtr<T>, T);          \
  extern template Tensor<T> add_noise(const Tensor<T>&,                       \
                                      const NoiseModel<T>&);                  \
  extern template Tensor<T> initial_estimate(const LinearOperator<T>&,        \
                                             const Tensor<T>&);               \
  extern template T adjoint_test(const LinearOperator<T>&, int,               \
                                 std::uint64_t);                              \
  extern template Tensor<T> apply_linop(const OperatorPtr<T>&,                \
                                        const Tensor<T>&);                    \
  extern template Tensor<T> apply_linop_adjoint(const OperatorPtr<T>&,        \
                                                const Tensor<T>&);            \
  extern template Tensor<T> operator_stencil(const LinearOperator<T>&);

LUSER_OPERATORS_EXTERN(float)
LUSER_OPERATORS_EXTERN(double)
#undef LUSER_OPERATORS_EXTERN

}  // namespace luser
