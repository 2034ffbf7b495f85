#include "luser/fixed_point.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "luser/ops.hpp"

namespace luser {

namespace {

template <typename T>
T rel_residual(const Tensor<T>& fz, const Tensor<T>& z) {
  Tensor<T> diff(z.shape());
  T* dp = diff.mutable_data();
  const T* fp = fz.data();
  const T* zp = z.data();
  T acc = 0, znorm = 0;
  const std::size_t n = z.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T d = fp[i] - zp[i];
    dp[i] = d;
    acc += d * d;
    znorm += zp[i] * zp[i];
  }
  return std::sqrt(acc) / (std::sqrt(znorm) + kResidualEps<T>);
}

template <typename T>
void guard_finite(const Tensor<T>& z, const Tensor<T>& last_good, T scale0,
                  int iter) {
  const T guard = static_cast<T>(1e12) * std::max(T(1), scale0);
  if (!all_finite(z) || norm2(z) > guard) {
    throw DivergedError<T>(
        "fixed-point iteration diverged at iteration " + std::to_string(iter),
        last_good);
  }
}

/// Gaussian elimination with partial pivoting on a dense (n x n) system.
/// Returns false when a pivot vanishes.
template <typename T>
bool solve_dense(std::vector<T>& a, std::vector<T>& b, std::size_t n) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    T best = std::abs(a[col * n + col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const T v = std::abs(a[r * n + col]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (!(best > static_cast<T>(1e-30))) return false;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(a[col * n + c], a[piv * n + c]);
      }
      std::swap(b[col], b[piv]);
    }
    const T inv = T(1) / a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const T factor = a[r * n + col] * inv;
      if (factor == T(0)) continue;
      for (std::size_t c = col; c < n; ++c) {
        a[r * n + c] -= factor * a[col * n + c];
      }
      b[r] -= factor * b[col];
    }
  }
  for (std::size_t r = n; r-- > 0;) {
    T acc = b[r];
    for (std::size_t c = r + 1; c < n; ++c) acc -= a[r * n + c] * b[c];
    b[r] = acc / a[r * n + r];
  }
  return true;
}

}  // namespace

template <typename T>
FixedPointResult<T> plain_iterate(const FixedPointMap<T>& f,
                                  const Tensor<T>& z0,
                                  const FixedPointConfig<T>& cfg) {
  cfg.validate();
  NoGradScope no_grad;
  FixedPointResult<T> res;
  Tensor<T> z = z0.detached();
  const T scale0 = norm2(z0);
  for (int k = 0; k < cfg.max_iters; ++k) {
    Tensor<T> fz = f(z);
    check_same_shape(fz, z, "plain_iterate map");
    guard_finite(fz, z, scale0, k);
    const T r = rel_residual(fz, z);
    res.residual_history.push_back(r);
    res.iterations = k + 1;
    if (r <= cfg.tol) {
      res.converged = true;
      res.solution = z;
      res.map_at_solution = fz;
      return res;
    }
    z = std::move(fz);
  }
  res.solution = z;
  res.map_at_solution = f(z);
  return res;
}

template <typename T>
FixedPointResult<T> anderson_solve(const FixedPointMap<T>& f,
                                   const Tensor<T>& z0,
                                   const FixedPointConfig<T>& cfg) {
  cfg.validate();
  NoGradScope no_grad;
  FixedPointResult<T> res;
  const std::size_t m = static_cast<std::size_t>(cfg.anderson_m);
  const T beta = cfg.damping;
  const T scale0 = norm2(z0);

  struct Entry {
    Tensor<T> z, fz, g;
  };
  std::deque<Entry> hist;

  Tensor<T> z = z0.detached();
  for (int k = 0; k < cfg.max_iters; ++k) {
    Tensor<T> fz = f(z);
    check_same_shape(fz, z, "anderson_solve map");
    guard_finite(fz, z, scale0, k);
    const T r = rel_residual(fz, z);
    res.residual_history.push_back(r);
    res.iterations = k + 1;
    if (r <= cfg.tol) {
      res.converged = true;
      res.solution = z;
      res.map_at_solution = fz;
      return res;
    }

    Tensor<T> g(z.shape());
    {
      T* gp = g.mutable_data();
      const T* fp = fz.data();
      const T* zp = z.data();
      for (std::size_t i = 0; i < z.size(); ++i) gp[i] = fp[i] - zp[i];
    }
    hist.push_back({z, fz, std::move(g)});
    if (hist.size() > m) hist.pop_front();

    const std::size_t h = hist.size();
    bool mixed = false;
    if (h > 1) {
      // Constrained least squares over residuals:
      //   min |G a|^2 + reg |a|^2  s.t.  sum(a) = 1
      // via its KKT system of size h+1. The regularizer is scaled by the
      // Gram trace so it stays proportionate as residuals shrink.
      const std::size_t dim = h + 1;
      std::vector<T> A(dim * dim, T(0)), rhs(dim, T(0));
      T trace = 0;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = i; j < h; ++j) {
          const T v = dot(hist[i].g, hist[j].g);
          A[i * dim + j] = T(2) * v;
          A[j * dim + i] = T(2) * v;
          if (i == j) trace += v;
        }
        A[i * dim + h] = T(1);
        A[h * dim + i] = T(1);
      }
      const T reg = cfg.anderson_reg * trace / static_cast<T>(h);
      for (std::size_t i = 0; i < h; ++i) A[i * dim + i] += T(2) * reg;
      rhs[h] = T(1);
      if (solve_dense(A, rhs, dim)) {
        T alpha_sum = 0;
        bool finite = true;
        for (std::size_t i = 0; i < h; ++i) {
          if (!std::isfinite(rhs[i])) finite = false;
          alpha_sum += rhs[i];
        }
        if (finite) {
          res.mixing_defects.push_back(std::abs(alpha_sum - T(1)));
          Tensor<T> znew = Tensor<T>::zeros(z.shape());
          T* zp = znew.mutable_data();
          for (std::size_t i = 0; i < h; ++i) {
            const T ai = rhs[i];
            const T* zi = hist[i].z.data();
            const T* fi = hist[i].fz.data();
            const T w_z = ai * (T(1) - beta);
            const T w_f = ai * beta;
            for (std::size_t e = 0; e < znew.size(); ++e) {
              zp[e] += w_z * zi[e] + w_f * fi[e];
            }
          }
          z = std::move(znew);
          mixed = true;
        }
      }
    }
    if (!mixed) {
      // plain (damped) step
      if (beta == T(1)) {
        z = hist.back().fz;
      } else {
        Tensor<T> znew(z.shape());
        T* zp = znew.mutable_data();
        const T* zold = hist.back().z.data();
        const T* fp = hist.back().fz.data();
        for (std::size_t e = 0; e < znew.size(); ++e) {
          zp[e] = (T(1) - beta) * zold[e] + beta * fp[e];
        }
        z = std::move(znew);
      }
    }
  }
  res.solution = z;
  res.map_at_solution = f(z);
  return res;
}

template <typename T>
ImplicitGrads<T> implicit_vjp(RecordedApplication<T>& rec,
                              const Tensor<T>& upstream_grad,
                              const FixedPointConfig<T>& cfg) {
  check_same_shape(rec.output(), upstream_grad, "implicit_vjp upstream");
  // Adjoint fixed point u = g + J^T u, solved with the same accelerator.
  FixedPointMap<T> adjoint_map = [&](const Tensor<T>& u) {
    Tensor<T> ju = rec.vjp_state(u);
    Tensor<T> out(u.shape());
    T* op = out.mutable_data();
    const T* gp = upstream_grad.data();
    const T* jp = ju.data();
    for (std::size_t i = 0; i < u.size(); ++i) op[i] = gp[i] + jp[i];
    return out;
  };
  ImplicitGrads<T> result;
  result.adjoint_result = anderson_solve(adjoint_map, upstream_grad, cfg);
  if (!result.adjoint_result.converged) {
    throw AdjointSolveError<T>(
        "implicit adjoint solve did not converge (residual " +
            std::to_string(static_cast<double>(
                result.adjoint_result.residual_history.back())) +
            " after " + std::to_string(result.adjoint_result.iterations) +
            " iterations)",
        result.adjoint_result.residual_history.back());
  }
  result.leaf_grads = rec.vjp_all(result.adjoint_result.solution);
  return result;
}

template <typename T>
Tensor<T> equilibrium_layer(
    const std::function<Tensor<T>(std::span<const Tensor<T>>)>& body,
    const std::vector<Tensor<T>>& extra_inputs,
    const std::vector<Tensor<T>*>& params, const Tensor<T>& z0,
    const EquilibriumOptions<T>& opts, FixedPointResult<T>* stats_out) {
  // Detached copies drive the unrecorded forward solve.
  std::vector<Tensor<T>> extras_detached;
  extras_detached.reserve(extra_inputs.size());
  for (const Tensor<T>& e : extra_inputs) extras_detached.push_back(e.detached());

  FixedPointMap<T> f = [&](const Tensor<T>& z) {
    std::vector<Tensor<T>> args;
    args.reserve(1 + extras_detached.size());
    args.push_back(z);
    for (const Tensor<T>& e : extras_detached) args.push_back(e);
    return body(std::span<const Tensor<T>>(args.data(), args.size()));
  };

  FixedPointResult<T> fwd;
  {
    NoGradScope no_grad;
    fwd = opts.use_anderson ? anderson_solve(f, z0, opts.forward)
                            : plain_iterate(f, z0, opts.forward);
  }
  if (!fwd.converged && opts.require_convergence) {
    throw SolverError("equilibrium forward solve did not converge (residual " +
                      std::to_string(static_cast<double>(
                          fwd.residual_history.back())) +
                      " after " + std::to_string(fwd.iterations) +
                      " iterations)");
  }
  if (stats_out) *stats_out = fwd;

  bool any_attached = false;
  for (const Tensor<T>& e : extra_inputs) any_attached |= e.attached();
  for (const Tensor<T>* p : params) any_attached |= p->attached();
  if (!GradMode::enabled() || !any_attached) {
    return fwd.map_at_solution;
  }

  Tape<T>* tape = nullptr;
  for (const Tensor<T>& e : extra_inputs) {
    if (e.attached()) tape = e.tape();
  }
  for (const Tensor<T>* p : params) {
    if (p->attached()) tape = p->tape();
  }

  // One recorded application at the fixed point; this is the only activation
  // storage the layer contributes.
  std::vector<Tensor<T>> rec_inputs;
  rec_inputs.reserve(1 + extra_inputs.size());
  rec_inputs.push_back(fwd.solution.detached());
  for (const Tensor<T>& e : extra_inputs) rec_inputs.push_back(e.detached());
  auto rec = std::make_shared<RecordedApplication<T>>(std::move(rec_inputs),
                                                      params, body);

  Tensor<T> out = rec->output().detached();
  TapeNode<T> node;
  node.op = "equilibrium";
  node.inputs.reserve(extra_inputs.size() + params.size());
  for (const Tensor<T>& e : extra_inputs) {
    node.inputs.push_back(e.attached() ? e.tape_id() : -1);
  }
  for (const Tensor<T>* p : params) {
    node.inputs.push_back(p->attached() ? p->tape_id() : -1);
  }
  node.extra_elements = [rec]() { return rec->saved_elements(); };
  const FixedPointConfig<T> backward_cfg = opts.backward;
  node.backward = [rec, backward_cfg](const TapeNode<T>& n, const Tensor<T>& g,
                                      GradMap<T>& grads) {
    ImplicitGrads<T> ig = implicit_vjp(*rec, g, backward_cfg);
    // leaf_grads[0] is the state gradient, consumed by the adjoint solve.
    for (std::size_t i = 0; i + 1 < ig.leaf_grads.size(); ++i) {
      if (n.inputs[i] >= 0 && !ig.leaf_grads[i + 1].empty()) {
        grads.accumulate(n.inputs[i], ig.leaf_grads[i + 1]);
      }
    }
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

#define LUSER_FIXED_POINT_INSTANTIATE(T)                                      \
  template struct DivergedError<T>;                                           \
  template FixedPointResult<T> plain_iterate(                                 \
      const FixedPointMap<T>&, const Tensor<T>&, const FixedPointConfig<T>&); \
  template FixedPointResult<T> anderson_solve(                                \
      const FixedPointMap<T>&, const Tensor<T>&, const FixedPointConfig<T>&); \
  template ImplicitGrads<T> implicit_vjp(                                     \
      RecordedApplication<T>&, const Tensor<T>&, const FixedPointConfig<T>&); \
  template Tensor<T> equilibrium_layer(                                       \
      const std::function<Tensor<T>(std::span<const Tensor<T>>)>&,            \
      const std::vector<Tensor<T>>&, const std::vector<Tensor<T>*>&,          \
      const Tensor<T>&, const EquilibriumOptions<T>&, FixedPointResult<T>*);

LUSER_FIXED_POINT_INSTANTIATE(float)
LUSER_FIXED_POINT_INSTANTIATE(double)
#undef LUSER_FIXED_POINT_INSTANTIATE

}  // namespace luser
