#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "luser/tape.hpp"
#include "luser/tensor.hpp"

namespace luser {

struct SolverError : Error {
  explicit SolverError(const std::string& msg) : Error(msg) {}
};

/// Raised when an iterate turns non-finite or blows up; carries the last
/// finite iterate so callers can salvage it.
template <typename T>
struct DivergedError : SolverError {
  DivergedError(const std::string& msg, Tensor<T> last)
      : SolverError(msg), last_finite(std::move(last)) {}
  Tensor<T> last_finite;
};

template <typename T>
struct AdjointSolveError : SolverError {
  AdjointSolveError(const std::string& msg, T residual_)
      : SolverError(msg), residual(residual_) {}
  T residual;
};

template <typename T>
struct FixedPointConfig {
  int max_iters = 30;
  T tol = static_cast<T>(1e-3);  // relative residual threshold
  int anderson_m = 5;
  T anderson_reg = static_cast<T>(1e-4);
  T damping = T(1);  // beta in (0,1]

  void validate() const {
    if (max_iters < 1) throw Error("fixed_point: max_iters must be >= 1");
    if (!(tol > T(0))) throw Error("fixed_point: tol must be positive");
    if (anderson_m < 1) throw Error("fixed_point: anderson memory must be >= 1");
    if (!(damping > T(0) && damping <= T(1))) {
      throw Error("fixed_point: damping must lie in (0,1]");
    }
  }
};

/// Relative residual floor; handles the zero-initialized residual entering
/// an equilibrium block.
template <typename T>
inline constexpr T kResidualEps = static_cast<T>(1e-8);

template <typename T>
struct FixedPointResult {
  Tensor<T> solution;
  Tensor<T> map_at_solution;       // f evaluated at the reported solution
  int iterations = 0;
  std::vector<T> residual_history;  // |f(z)-z| / (|z|+eps) per iteration
  bool converged = false;
  /// |sum(alpha)-1| at every step that took the least-squares path.
  std::vector<T> mixing_defects;
};

template <typename T>
using FixedPointMap = std::function<Tensor<T>(const Tensor<T>&)>;

/// Repeats z <- f(z) until the relative residual drops below tol. Never
/// records onto a tape.
template <typename T>
FixedPointResult<T> plain_iterate(const FixedPointMap<T>& f,
                                  const Tensor<T>& z0,
                                  const FixedPointConfig<T>& cfg);

/// Anderson acceleration with memory m: mixing coefficients solve a
/// regularized constrained least-squares over the residual history, combined
/// with damping; falls back to a plain step when the system degenerates.
template <typename T>
FixedPointResult<T> anderson_solve(const FixedPointMap<T>& f,
                                   const Tensor<T>& z0,
                                   const FixedPointConfig<T>& cfg);

template <typename T>
struct ImplicitGrads {
  /// Gradients for the recorded leaves: inputs first, then params, in the
  /// order the RecordedApplication saw them. Empty tensor = zero.
  std::vector<Tensor<T>> leaf_grads;
  FixedPointResult<T> adjoint_result;
};

/// Gradients at a fixed point by solving the adjoint equation
/// u = g + J^T u with anderson_solve, then one weighted application of the
/// recorded map. `rec` must be recorded at the fixed point.
template <typename T>
ImplicitGrads<T> implicit_vjp(RecordedApplication<T>& rec,
                              const Tensor<T>& upstream_grad,
                              const FixedPointConfig<T>& cfg);

/// Equilibrium layer: solves z* = body(z*, extra_inputs...) without
/// recording, then records a single application at z* on the enclosing tape
/// so that backward runs the implicit adjoint solve. Returns f(z*) (residual
/// <= tol). `stats_out`, when given, receives the forward solver result.
template <typename T>
struct EquilibriumOptions {
  FixedPointConfig<T> forward;
  FixedPointConfig<T> backward;
  bool use_anderson = true;
  /// When false, a non-converged forward solve returns the last iterate and
  /// flags it instead of throwing (inference best-effort mode).
  bool require_convergence = true;
};

template <typename T>
Tensor<T> equilibrium_layer(
    const std::function<Tensor<T>(std::span<const Tensor<T>>)>& body,
    const std::vector<Tensor<T>>& extra_inputs,
    const std::vector<Tensor<T>*>& params, const Tensor<T>& z0,
    const EquilibriumOptions<T>& opts, FixedPointResult<T>* stats_out);

#define LUSER_FIXED_POINT_EXTERN(T)                                          \
  extern template struct DivergedError<T>;                                    \
  extern template FixedPointResult<T> plain_iterate(                          \
      const FixedPointMap<T>&, const Tensor<T>&, const FixedPointConfig<T>&); \
  extern template FixedPointResult<T> anderson_solve(                         \
      const FixedPointMap<T>&, const Tensor<T>&, const FixedPointConfig<T>&); \
  extern template ImplicitGrads<T> implicit_vjp(                              \
      RecordedApplication<T>&, const Tensor<T>&, const FixedPointConfig<T>&); \
  extern template Tensor<T> equilibrium_layer(                                \
      const std::function<Tensor<T>(std::span<const Tensor<T>>)>&,            \
      const std::vector<Tensor<T>>&, const std::vector<Tensor<T>*>&,          \
      const Tensor<T>&, const EquilibriumOptions<T>&, FixedPointResult<T>*);

LUSER_FIXED_POINT_EXTERN(float)
LUSER_FIXED_POINT_EXTERN(double)
#undef LUSER_FIXED_POINT_EXTERN

}  // namespace luser
