#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "luser/architectures.hpp"
#include "luser/metrics.hpp"

namespace luser {

// ---- losses -----------------------------------------------------------------

template <typename T>
Tensor<T> loss_final(const Tensor<T>& x_k, const Tensor<T>& x_true);

/// Uniformly weighted mean of per-stage reconstruction errors.
template <typename T>
Tensor<T> loss_aux(std::span<const Tensor<T>> intermediates,
                   const Tensor<T>& x_true);

// ---- datasets -----------------------------------------------------------------

template <typename T>
struct Sample {
  Tensor<T> x_true;  // [1,C,H,W]
  Tensor<T> y;
  Tensor<T> x0;
};

template <typename T>
using Dataset = std::vector<Sample<T>>;

/// Band-limited random field in [0,1]: white noise smoothed by a Gaussian
/// and renormalized to full range.
template <typename T>
Tensor<T> random_smooth_field(std::size_t h, std::size_t w, T smooth_sigma,
                              std::mt19937_64& rng);

/// Overlapping random ellipses on a dark background, clamped to [0,1].
template <typename T>
Tensor<T> ellipse_phantom(std::size_t n, int n_ellipses, std::mt19937_64& rng);

template <typename T>
struct SyntheticSpec {
  int count = 200;
  T noise_sigma = static_cast<T>(0.01);
  T field_sigma = static_cast<T>(1.5);
  int phantom_ellipses = 6;
  std::uint64_t seed = 0;
};

/// Ground truths drawn per the operator's task (fields for deblur/mri,
/// phantoms for ct), measured through the operator with seeded noise.
template <typename T>
Dataset<T> make_synthetic_dataset(const OperatorPtr<T>& op,
                                  const SyntheticSpec<T>& spec);

/// Ground truths from an image directory (resampled is not supported; images
/// must already match the operator's signal shape).
template <typename T>
Dataset<T> make_directory_dataset(const OperatorPtr<T>& op,
                                  const std::string& dir, T noise_sigma,
                                  std::uint64_t seed);

/// [1,C,H,W] items stacked along the batch axis.
template <typename T>
Tensor<T> stack_batch(const std::vector<const Tensor<T>*>& items);

// ---- optimizer -----------------------------------------------------------------

template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(T lr, T beta1, T beta2, T eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// In-place update of each param from its gradient (empty grad = skip).
  void step(const std::vector<Tensor<T>*>& params,
            const std::vector<Tensor<T>>& grads);

 private:
  T lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// ---- training -----------------------------------------------------------------

enum class LossMode { final_only, aux };

template <typename T>
struct TrainConfig {
  LossMode loss = LossMode::final_only;
  int epochs = 50;
  int batch_size = 10;
  T learning_rate = static_cast<T>(1e-4);
  T adam_beta1 = static_cast<T>(0.9);
  T adam_beta2 = static_cast<T>(0.999);
  T adam_eps = static_cast<T>(1e-8);
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw Error("train: negative epoch count");
    if (batch_size < 1) throw Error("train: batch size must be >= 1");
  }
};

template <typename T>
struct EpochLog {
  int epoch = 0;
  T train_loss = 0;
  T val_psnr = 0;
  T val_ssim = 0;
  std::uint64_t fwd_calls = 0;
  std::uint64_t adj_calls = 0;
};

template <typename T>
struct TrainResult {
  std::vector<EpochLog<T>> epochs;
};

/// Seeded-shuffle epoch loop: per batch, forward in train mode, loss per the
/// configured mode, reverse sweep, adaptive-moment update. Equilibrium-block
/// parameter gradients arrive through the implicit adjoint solve recorded by
/// the blocks themselves. Deterministic for a fixed seed on one thread.
template <typename T>
TrainResult<T> train(UnrolledModel<T>& model, const Dataset<T>& train_set,
                     const Dataset<T>& val_set, const TrainConfig<T>& cfg);

/// Mean validation metrics of a model in eval mode.
template <typename T>
std::pair<T, T> evaluate(UnrolledModel<T>& model, const Dataset<T>& set);

// ---- memory accounting -----------------------------------------------------------

/// Activation-storage accounting for one instrumented forward+backward:
/// every element recorded for the reverse sweep (tape saved values,
/// including what equilibrium layers retain), per stage, plus operator call
/// counts and parameter bookkeeping.
struct MemoryReport {
  std::size_t peak_recorded_elements = 0;
  std::vector<std::pair<std::string, std::size_t>> per_stage;
  std::uint64_t forward_calls = 0;
  std::uint64_t adjoint_calls = 0;
  std::size_t parameter_count = 0;
  std::size_t param_grad_elements = 0;
};

template <typename T>
MemoryReport memory_report(UnrolledModel<T>& model, const Tensor<T>& x0,
                           const Tensor<T>& y);

#define LUSER_TRAINING_EXTERN(T)                                              \
  extern template Tensor<T> loss_final(const Tensor<T>&, const Tensor<T>&);   \
  extern template Tensor<T> loss_aux(std::span<const Tensor<T>>,              \
                                     const Tensor<T>&);                       \
  extern template Tensor<T> random_smooth_field(std::size_t, std::size_t, T,  \
                                                std::mt19937_64&);            \
  extern template Tensor<T> ellipse_phantom(std::size_t, int,                 \
                                            std::mt19937_64&);               \
  extern template Dataset<T> make_synthetic_dataset(const OperatorPtr<T>&,    \
                                                    const SyntheticSpec<T>&); \
  extern template Dataset<T> make_directory_dataset(const OperatorPtr<T>&,    \
                                                    const std::string&, T,    \
                                                    std::uint64_t);           \
  extern template Tensor<T> stack_batch(const std::vector<const Tensor<T>*>&);\
  extern template class AdamOptimizer<T>;                                     \
  extern template TrainResult<T> train(UnrolledModel<T>&, const Dataset<T>&,  \
                                       const Dataset<T>&,                     \
                                       const TrainConfig<T>&);                \
  extern template std::pair<T, T> evaluate(UnrolledModel<T>&,                 \
                                           const Dataset<T>&);                \
  extern template MemoryReport memory_report(UnrolledModel<T>&,               \
                                             const Tensor<T>&,                \
                                             const Tensor<T>&);

LUSER_TRAINING_EXTERN(float)
LUSER_TRAINING_EXTERN(double)
#undef LUSER_TRAINING_EXTERN

}  // namespace luser
