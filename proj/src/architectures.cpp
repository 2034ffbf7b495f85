#include "luser/architectures.hpp"

namespace luser {

std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::lu_dncnn: return "lu_dncnn";
    case ModelKind::luser: return "luser";
    case ModelKind::deq4ip: return "deq4ip";
  }
  return "?";
}

std::string share_mode_name(ShareMode m) {
  switch (m) {
    case ShareMode::sw: return "sw";
    case ShareMode::psw: return "psw";
    case ShareMode::dw: return "dw";
  }
  return "?";
}

std::vector<int> make_weight_schedule(ShareMode mode, int stages,
                                      int n_blocks) {
  if (stages < 0) throw Error("schedule: negative stage count");
  std::vector<int> s(static_cast<std::size_t>(stages), 0);
  switch (mode) {
    case ShareMode::sw:
      break;
    case ShareMode::dw:
      for (int k = 0; k < stages; ++k) s[static_cast<std::size_t>(k)] = k;
      break;
    case ShareMode::psw: {
      if (n_blocks < 1 || stages % n_blocks != 0) {
        throw Error("schedule: " + std::to_string(n_blocks) +
                    " blocks do not divide " + std::to_string(stages) +
                    " stages");
      }
      const int rep = stages / n_blocks;
      for (int k = 0; k < stages; ++k) {
        s[static_cast<std::size_t>(k)] = k / rep;
      }
      break;
    }
  }
  return s;
}

template <typename T>
Tensor<T> gradient_step(const Tensor<T>& x, const Tensor<T>& y,
                        const OperatorPtr<T>& op, const Tensor<T>& lambda) {
  Tensor<T> ax = apply_linop(op, x);
  check_same_shape(ax, y, "gradient_step measurement");
  Tensor<T> residual = sub(y, ax);
  Tensor<T> correction = apply_linop_adjoint(op, residual);
  Tensor<T> step = mul_scalar_param(correction, lambda);
  return add(x, step);
}

template <typename T>
UnrolledModel<T>::UnrolledModel(const ModelConfig<T>& cfg, OperatorPtr<T> op,
                                std::uint64_t seed)
    : cfg_(cfg), op_(std::move(op)) {
  if (cfg_.kind == ModelKind::deq4ip) {
    schedule_ = {0};
  } else {
    const int nb = cfg_.share == ShareMode::psw ? cfg_.psw_blocks
                   : cfg_.share == ShareMode::dw ? cfg_.stages
                                                 : 1;
    schedule_ = make_weight_schedule(cfg_.share, cfg_.stages, nb);
  }
  int blocks = 1;
  for (int b : schedule_) blocks = std::max(blocks, b + 1);
  if (cfg_.kind == ModelKind::deq4ip && cfg_.share != ShareMode::sw) {
    throw Error("deq4ip is weight-tied; use the shared-weight mode");
  }

  std::mt19937_64 rng(seed);
  if (cfg_.kind == ModelKind::luser) {
    prox_blocks_.reserve(static_cast<std::size_t>(blocks));
    for (int b = 0; b < blocks; ++b) {
      prox_blocks_.emplace_back(cfg_.block, rng);
    }
  } else {
    dncnn_blocks_.reserve(static_cast<std::size_t>(blocks));
    DnCNNConfig<T> dcfg = cfg_.dncnn;
    dcfg.spectral_norm = cfg_.kind == ModelKind::deq4ip;
    for (int b = 0; b < blocks; ++b) {
      dncnn_blocks_.emplace_back(dcfg, rng);
    }
  }

  const int n_lambda =
      (cfg_.share == ShareMode::sw || cfg_.kind == ModelKind::deq4ip)
          ? 1
          : cfg_.stages;
  for (int i = 0; i < n_lambda; ++i) {
    lambdas_.push_back(Tensor<T>::scalar(cfg_.lambda_init));
  }
}

template <typename T>
int UnrolledModel<T>::n_blocks() const {
  return static_cast<int>(cfg_.kind == ModelKind::luser
                              ? prox_blocks_.size()
                              : dncnn_blocks_.size());
}

template <typename T>
Tensor<T> UnrolledModel<T>::forward(const Tensor<T>& x0, const Tensor<T>& y,
                                    bool train,
                                    std::vector<Tensor<T>>* intermediates,
                                    ForwardStats<T>* stats) {
  const std::uint64_t f0 = op_->forward_calls(), a0 = op_->adjoint_calls();
  Tensor<T> out = cfg_.kind == ModelKind::deq4ip
                      ? deq4ip_forward(x0, y, train, stats)
                      : lu_forward(x0, y, train, intermediates, stats);
  if (stats) {
    stats->forward_calls = op_->forward_calls() - f0;
    stats->adjoint_calls = op_->adjoint_calls() - a0;
  }
  return out;
}

template <typename T>
Tensor<T> UnrolledModel<T>::reconstruct(const Tensor<T>& y,
                                        ForwardStats<T>* stats) {
  Tensor<T> x0 = initial_estimate(*op_, y);
  const std::uint64_t f0 = op_->forward_calls(), a0 = op_->adjoint_calls();
  Tensor<T> out = forward(x0, y, /*train=*/false, nullptr, stats);
  if (stats) {
    stats->forward_calls = op_->forward_calls() - f0;
    stats->adjoint_calls = op_->adjoint_calls() - a0;
  }
  return out;
}

template <typename T>
Tensor<T> UnrolledModel<T>::lu_forward(const Tensor<T>& x0, const Tensor<T>& y,
                                       bool train,
                                       std::vector<Tensor<T>>* intermediates,
                                       ForwardStats<T>* stats) {
  Tensor<T> x = x0;
  const Tensor<T>& lam0 = lambdas_.front();
  Tape<T>* tape = lam0.attached() ? lam0.tape() : nullptr;

  EquilibriumOptions<T> opts = cfg_.solver;
  opts.require_convergence = train || !best_effort_;

  for (int k = 0; k < cfg_.stages; ++k) {
    std::optional<typename Tape<T>::Scope> scope;
    if (tape) scope.emplace(*tape, "stage" + std::to_string(k));
    const Tensor<T>& lam =
        lambdas_[lambdas_.size() == 1 ? 0 : static_cast<std::size_t>(k)];
    try {
      Tensor<T> d = gradient_step(x, y, op_, lam);
      const int block = schedule_[static_cast<std::size_t>(k)];
      if (cfg_.kind == ModelKind::luser) {
        FixedPointResult<T> st;
        x = prox_blocks_[static_cast<std::size_t>(block)].forward(d, opts,
                                                                  &st);
        if (stats) {
          stats->solver_iterations += st.iterations;
          stats->degraded |= !st.converged;
          stats->stage_results.push_back(std::move(st));
        }
      } else {
        DnCNN<T>& blk = dncnn_blocks_[static_cast<std::size_t>(block)];
        blk.power_iterate_all();
        x = blk.forward(d, train, /*update_stats=*/train);
      }
    } catch (const SolverError& e) {
      throw SolverError("stage " + std::to_string(k) + ": " + e.what());
    }
    if (intermediates) intermediates->push_back(x);
  }
  return x;
}

template <typename T>
Tensor<T> UnrolledModel<T>::deq4ip_forward(const Tensor<T>& x0,
                                           const Tensor<T>& y, bool train,
                                           ForwardStats<T>* stats) {
  DnCNN<T>& blk = dncnn_blocks_.front();
  blk.power_iterate_all();
  Tensor<T>& lam = lambdas_.front();

  auto body = [&](std::span<const Tensor<T>> ins) {
    Tensor<T> d = gradient_step(ins[0], ins[1], op_, lam);
    return blk.forward(d, train, /*update_stats=*/false);
  };

  EquilibriumOptions<T> opts = cfg_.solver;
  opts.require_convergence = train || !best_effort_;
  std::vector<Tensor<T>*> leaves = blk.param_ptrs();
  leaves.push_back(&lam);
  FixedPointResult<T> st;
  Tensor<T> out;
  try {
    out = equilibrium_layer<T>(body, {y}, leaves, x0, opts, &st);
  } catch (const SolverError& e) {
    throw SolverError(std::string("deq4ip: ") + e.what());
  }
  if (train) {
    // one statistics refresh at the fixed point
    NoGradScope no_grad;
    Tensor<T> d = gradient_step(st.solution.detached(), y.detached(), op_,
                                lam.detached());
    blk.forward(d, /*train=*/true, /*update_stats=*/true);
  }
  if (stats) {
    stats->solver_iterations += st.iterations;
    stats->degraded |= !st.converged;
    stats->stage_results.push_back(std::move(st));
  }
  return out;
}

template <typename T>
void UnrolledModel<T>::params(NamedTensors<T>& out) {
  for (std::size_t i = 0; i < lambdas_.size(); ++i) {
    out.emplace_back("lambda" + std::to_string(i), &lambdas_[i]);
  }
  for (std::size_t b = 0; b < prox_blocks_.size(); ++b) {
    prox_blocks_[b].params(out, "stage" + std::to_string(b));
  }
  for (std::size_t b = 0; b < dncnn_blocks_.size(); ++b) {
    dncnn_blocks_[b].params(out, "stage" + std::to_string(b));
  }
}

template <typename T>
void UnrolledModel<T>::buffers(NamedTensors<T>& out) {
  for (std::size_t b = 0; b < prox_blocks_.size(); ++b) {
    prox_blocks_[b].buffers(out, "stage" + std::to_string(b));
  }
  for (std::size_t b = 0; b < dncnn_blocks_.size(); ++b) {
    dncnn_blocks_[b].buffers(out, "stage" + std::to_string(b));
  }
}

template <typename T>
std::size_t UnrolledModel<T>::param_count() const {
  std::size_t n = lambdas_.size();
  for (const auto& b : prox_blocks_) n += b.param_count();
  for (const auto& b : dncnn_blocks_) n += b.param_count();
  return n;
}

template <typename T>
void UnrolledModel<T>::zero_block_outputs() {
  for (auto& b : prox_blocks_) b.zero_output_layer();
  for (auto& b : dncnn_blocks_) b.zero_output_layer();
}

template Tensor<float> gradient_step(const Tensor<float>&,
                                     const Tensor<float>&,
                                     const OperatorPtr<float>&,
                                     const Tensor<float>&);
template Tensor<double> gradient_step(const Tensor<double>&,
                                      const Tensor<double>&,
                                      const OperatorPtr<double>&,
                                      const Tensor<double>&);
template class UnrolledModel<float>;
template class UnrolledModel<double>;

}  // namespace luser
