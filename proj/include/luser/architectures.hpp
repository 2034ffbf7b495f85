#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "luser/networks.hpp"
#include "luser/operators.hpp"

namespace luser {

enum class ModelKind { lu_dncnn, luser, deq4ip };
enum class ShareMode { sw, psw, dw };

std::string model_kind_name(ModelKind k);
std::string share_mode_name(ShareMode m);

/// Stage index -> block index. sw maps everything to block 0, dw is the
/// identity, psw repeats each of n_blocks blocks K/n_blocks times in order.
std::vector<int> make_weight_schedule(ShareMode mode, int stages,
                                      int n_blocks);

/// d = x + lambda * A^T(y - A x); differentiable in x and lambda.
template <typename T>
Tensor<T> gradient_step(const Tensor<T>& x, const Tensor<T>& y,
                        const OperatorPtr<T>& op, const Tensor<T>& lambda);

template <typename T>
struct ModelConfig {
  ModelKind kind = ModelKind::luser;
  ShareMode share = ShareMode::dw;
  int stages = 8;
  int psw_blocks = 4;
  T lambda_init = T(1);
  DnCNNConfig<T> dncnn;
  ProximalBlockConfig<T> block;
  EquilibriumOptions<T> solver;  // equilibrium solves (forward + backward)
};

template <typename T>
struct ForwardStats {
  std::uint64_t forward_calls = 0;
  std::uint64_t adjoint_calls = 0;
  /// Total equilibrium iterations (the deq4ip solve, or summed over stages).
  int solver_iterations = 0;
  std::vector<FixedPointResult<T>> stage_results;
  bool degraded = false;  // best-effort inference hit a non-converged solve
};

/// The three end-to-end reconstruction models over a fixed operator:
/// unrolled stages (lu_dncnn, luser) or a whole-model equilibrium (deq4ip).
template <typename T>
class UnrolledModel {
 public:
  UnrolledModel(const ModelConfig<T>& cfg, OperatorPtr<T> op,
                std::uint64_t seed);

  /// K alternating gradient/regularizer stages (lu kinds) or the equilibrium
  /// solve (deq4ip). x0 normally comes from initial_estimate.
  /// `intermediates`, when non-null and the model is an lu kind, receives
  /// x_1..x_K.
  Tensor<T> forward(const Tensor<T>& x0, const Tensor<T>& y, bool train,
                    std::vector<Tensor<T>>* intermediates = nullptr,
                    ForwardStats<T>* stats = nullptr);

  /// initial_estimate + forward, counters measured around the call.
  Tensor<T> reconstruct(const Tensor<T>& y, ForwardStats<T>* stats = nullptr);

  void params(NamedTensors<T>& out);
  void buffers(NamedTensors<T>& out);
  std::size_t param_count() const;

  /// Zeroes every block's output layer, turning each learned update into
  /// the identity (the model then runs plain data-consistency iterations).
  void zero_block_outputs();

  const ModelConfig<T>& config() const { return cfg_; }
  const std::vector<int>& schedule() const { return schedule_; }
  const OperatorPtr<T>& op() const { return op_; }
  int n_blocks() const;

  /// Inference behavior on non-converged equilibrium solves: throw (default)
  /// or return the last iterate and set the degraded flag.
  void set_best_effort(bool on) { best_effort_ = on; }

  EquilibriumOptions<T>& solver_options() { return cfg_.solver; }

  ProximalBlock<T>& proximal_block(int i) { return prox_blocks_.at(i); }
  DnCNN<T>& dncnn_block(int i) { return dncnn_blocks_.at(i); }

 private:
  Tensor<T> lu_forward(const Tensor<T>& x0, const Tensor<T>& y, bool train,
                       std::vector<Tensor<T>>* intermediates,
                       ForwardStats<T>* stats);
  Tensor<T> deq4ip_forward(const Tensor<T>& x0, const Tensor<T>& y,
                           bool train, ForwardStats<T>* stats);

  ModelConfig<T> cfg_;
  OperatorPtr<T> op_;
  std::vector<int> schedule_;
  std::vector<Tensor<T>> lambdas_;  // one per stage, or one shared (sw/deq4ip)
  std::vector<ProximalBlock<T>> prox_blocks_;
  std::vector<DnCNN<T>> dncnn_blocks_;
  bool best_effort_ = false;
};

extern template Tensor<float> gradient_step(const Tensor<float>&,
                                            const Tensor<float>&,
                                            const OperatorPtr<float>&,
                                            const Tensor<float>&);
extern template Tensor<double> gradient_step(const Tensor<double>&,
                                             const Tensor<double>&,
                                             const OperatorPtr<double>&,
                                             const Tensor<double>&);
extern template class UnrolledModel<float>;
extern template class UnrolledModel<double>;

}  // namespace luser
