#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "luser/fixed_point.hpp"
#include "luser/ops.hpp"
#include "luser/tensor.hpp"

namespace luser {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>*>>;

/// Convolution with optional spectral normalization. The persistent left and
/// right singular-vector estimates advance by one power iteration per
/// power_iterate() call; apply() itself never mutates them, so a fixed-point
/// solve sees one frozen map per forward pass.
template <typename T>
class SNConv {
 public:
  SNConv() = default;
  SNConv(std::size_t cin, std::size_t cout, std::size_t ksize, bool with_bias,
         bool with_sn, std::mt19937_64& rng);

  Tensor<T> apply(const Tensor<T>& x) const;
  void power_iterate(int steps = 1);

  void params(NamedTensors<T>& out, const std::string& prefix);
  void buffers(NamedTensors<T>& out, const std::string& prefix);
  std::size_t param_count() const;

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  bool spectral_normalized() const { return use_sn_; }
  /// Current estimate u^T W v (call after power_iterate).
  T sigma_estimate() const;
  /// The weight as applied (normalized when wrapped), detached.
  Tensor<T> effective_weight() const;

  void set_update_enabled(bool on) { update_enabled_ = on; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  Tensor<T> u_, v_;
  bool use_sn_ = false;
  bool update_enabled_ = true;
  int pad_ = 1;
};

/// Residual denoising CNN: first layer conv+ReLU, middle layers
/// conv+BatchNorm+ReLU, last layer conv only, plus a skip from input to
/// output. Convolutions carry no bias (the affine normalization supplies the
/// shift).
template <typename T>
struct DnCNNConfig {
  std::size_t channels = 1;
  std::size_t layers = 17;
  std::size_t width = 64;
  bool spectral_norm = false;  // wrapped when used as an equilibrium map
  T bn_momentum = static_cast<T>(0.1);
  T bn_eps = static_cast<T>(1e-5);
};

template <typename T>
class DnCNN {
 public:
  DnCNN() = default;
  DnCNN(const DnCNNConfig<T>& cfg, std::mt19937_64& rng);

  /// x + residual_branch(x). `train` selects batch-norm mode;
  /// `update_stats` gates the running-statistics update so an equilibrium
  /// solve can apply the map repeatedly without drift.
  Tensor<T> forward(const Tensor<T>& x, bool train, bool update_stats);

  void power_iterate_all();
  void params(NamedTensors<T>& out, const std::string& prefix);
  void buffers(NamedTensors<T>& out, const std::string& prefix);
  std::size_t param_count() const;
  void zero_output_layer();
  std::vector<Tensor<T>*> param_ptrs();

  const DnCNNConfig<T>& config() const { return cfg_; }

 private:
  DnCNNConfig<T> cfg_;
  std::vector<SNConv<T>> convs_;
  std::vector<Tensor<T>> bn_gamma_, bn_beta_;
  std::vector<BatchNormState<T>> bn_state_;
};

/// Equilibrium proximal block: two injection convolutions applied once per
/// call, then the residual fixed point of
///   r = MixLayer(DataLayer(r) (+) InjectLayer(d))
/// from r = 0, returned through the skip connection d + r. All convolutions
/// are spectrally normalized.
template <typename T>
struct ProximalBlockConfig {
  std::size_t channels = 1;
  std::size_t width = 32;  // injection/data width; the mix path sees 2x
  std::size_t gn_groups = 8;
  T leaky_slope = static_cast<T>(0.01);
  T gn_eps = static_cast<T>(1e-5);

  void validate() const {
    if (width % gn_groups != 0) {
      throw Error("proximal block: width " + std::to_string(width) +
                  " not divisible by " + std::to_string(gn_groups) +
                  " norm groups");
    }
  }
};

template <typename T>
class ProximalBlock {
 public:
  ProximalBlock() = default;
  ProximalBlock(const ProximalBlockConfig<T>& cfg, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& d, const EquilibriumOptions<T>& opts,
                    FixedPointResult<T>* stats);

  /// The injection features for d; counted so tests can assert it runs
  /// exactly once per forward regardless of solver iterations.
  Tensor<T> inject(const Tensor<T>& d);
  /// One application of the residual map at (r, e); the recordable core of
  /// the fixed point.
  Tensor<T> residual_map(const Tensor<T>& r, const Tensor<T>& e);

  void power_iterate_all();
  void params(NamedTensors<T>& out, const std::string& prefix);
  void buffers(NamedTensors<T>& out, const std::string& prefix);
  std::size_t param_count() const;
  void zero_output_layer();
  std::vector<Tensor<T>*> param_ptrs();

  std::uint64_t injection_calls() const { return injection_calls_; }
  const ProximalBlockConfig<T>& config() const { return cfg_; }

 private:
  ProximalBlockConfig<T> cfg_;
  SNConv<T> inject1_, inject2_;
  SNConv<T> data1_, data2_;
  SNConv<T> mix1_, mix2_, mix3_;
  Tensor<T> data1_gamma_, data1_beta_, data2_gamma_, data2_beta_;
  Tensor<T> mix1_gamma_, mix1_beta_, mix2_gamma_, mix2_beta_;
  std::uint64_t injection_calls_ = 0;
};

#define LUSER_NETWORKS_EXTERN(T)                                              \
  extern template class SNConv<T>;                                            \
  extern template class DnCNN<T>;                                             \
  extern template class ProximalBlock<T>;

LUSER_NETWORKS_EXTERN(float)
LUSER_NETWORKS_EXTERN(double)
#undef LUSER_NETWORKS_EXTERN

}  // namespace luser
