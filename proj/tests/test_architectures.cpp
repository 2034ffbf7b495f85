#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "luser/architectures.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace luser;

namespace {

template <typename T>
ModelConfig<T> small_luser(int stages, ShareMode share) {
  ModelConfig<T> cfg;
  cfg.kind = ModelKind::luser;
  cfg.share = share;
  cfg.stages = stages;
  cfg.block.channels = 1;
  cfg.block.width = 8;
  cfg.block.gn_groups = 4;
  cfg.solver.forward.max_iters = 30;
  cfg.solver.forward.tol = static_cast<T>(1e-3);
  cfg.solver.require_convergence = false;
  return cfg;
}

}  // namespace

TEST_CASE("weight schedules: sw, dw, psw") {
  CHECK(make_weight_schedule(ShareMode::psw, 8, 4) ==
        std::vector<int>{0, 0, 1, 1, 2, 2, 3, 3});
  CHECK(make_weight_schedule(ShareMode::sw, 8, 1) ==
        std::vector<int>{0, 0, 0, 0, 0, 0, 0, 0});
  CHECK(make_weight_schedule(ShareMode::dw, 8, 8) ==
        std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK_THROWS_AS(make_weight_schedule(ShareMode::psw, 8, 3), Error);
}

TEST_CASE("gradient_step: consistent point, zero step, identity one-shot") {
  std::mt19937_64 rng(5);
  auto blur = build_gaussian_blur<double>(5, 2.0, 1, 12, 12);
  TensorD x = uniform<double>({1, 1, 12, 12}, 0, 1, rng);
  TensorD y = blur->apply(x);

  // consistent: y = A x -> d = x for any lambda
  TensorD d = gradient_step(x, y, blur, TensorD::scalar(1.7));
  CHECK(oracles::max_abs_diff(d, x) < 1e-14);

  // lambda = 0 -> d = x
  TensorD y2 = uniform<double>({1, 1, 12, 12}, 0, 1, rng);
  TensorD d0 = gradient_step(x, y2, blur, TensorD::scalar(0.0));
  CHECK(oracles::max_abs_diff(d0, x) == 0.0);

  // identity operator, lambda 1 -> d = y exactly (from x = 0)
  auto ident = build_identity<double>({1, 12, 12});
  TensorD zero = TensorD::zeros({1, 1, 12, 12});
  TensorD dy = gradient_step(zero, y2, ident, TensorD::scalar(1.0));
  CHECK(std::equal(y2.data(), y2.data() + y2.size(), dy.data()));
}

TEST_CASE("lu model with identity blocks and identity operator returns y after stage 1") {
  std::mt19937_64 rng(7);
  auto ident = build_identity<float>({1, 8, 8});
  ModelConfig<float> cfg = small_luser<float>(4, ShareMode::dw);
  UnrolledModel<float> model(cfg, ident, 3);
  model.zero_block_outputs();

  TensorF y = uniform<float>({2, 1, 8, 8}, 0, 1, rng);
  TensorF x0 = TensorF::zeros({2, 1, 8, 8});
  std::vector<TensorF> inter;
  TensorF out = model.forward(x0, y, false, &inter);
  REQUIRE(inter.size() == 4);
  for (const TensorF& xk : inter) {
    CHECK(std::equal(y.data(), y.data() + y.size(), xk.data()));
  }
  CHECK(std::equal(y.data(), y.data() + y.size(), out.data()));
}

TEST_CASE("zero-stage model returns the initialization") {
  auto ident = build_identity<float>({1, 8, 8});
  ModelConfig<float> cfg = small_luser<float>(0, ShareMode::sw);
  UnrolledModel<float> model(cfg, ident, 3);
  std::mt19937_64 rng(2);
  TensorF y = uniform<float>({1, 1, 8, 8}, 0, 1, rng);
  TensorF x0 = uniform<float>({1, 1, 8, 8}, 0, 1, rng);
  TensorF out = model.forward(x0, y, false);
  CHECK(out.shares_buffer(x0));
}

TEST_CASE("lu kinds invoke the operator exactly K times forward and adjoint") {
  std::mt19937_64 rng(9);
  auto blur = build_gaussian_blur<float>(5, 2.0f, 1, 12, 12);

  ModelConfig<float> cfg = small_luser<float>(8, ShareMode::sw);
  UnrolledModel<float> model(cfg, blur, 11);
  TensorF y = uniform<float>({1, 1, 12, 12}, 0, 1, rng);
  ForwardStats<float> stats;
  model.reconstruct(y, &stats);
  CHECK(stats.forward_calls == 8);
  CHECK(stats.adjoint_calls == 8);

  ModelConfig<float> dcfg;
  dcfg.kind = ModelKind::lu_dncnn;
  dcfg.share = ShareMode::sw;
  dcfg.stages = 8;
  dcfg.dncnn.channels = 1;
  dcfg.dncnn.layers = 4;
  dcfg.dncnn.width = 8;
  UnrolledModel<float> dmodel(dcfg, blur, 13);
  ForwardStats<float> dstats;
  dmodel.reconstruct(y, &dstats);
  CHECK(dstats.forward_calls == 8);
  CHECK(dstats.adjoint_calls == 8);
}

TEST_CASE("deq4ip with identity block and identity operator solves to y") {
  std::mt19937_64 rng(4);
  auto ident = build_identity<float>({1, 8, 8});
  ModelConfig<float> cfg;
  cfg.kind = ModelKind::deq4ip;
  cfg.share = ShareMode::sw;
  cfg.dncnn.channels = 1;
  cfg.dncnn.layers = 3;
  cfg.dncnn.width = 4;
  cfg.lambda_init = 0.5f;
  cfg.solver.forward.max_iters = 100;
  cfg.solver.forward.tol = 1e-6f;
  UnrolledModel<float> model(cfg, ident, 17);
  model.zero_block_outputs();

  TensorF y = uniform<float>({1, 1, 8, 8}, 0, 1, rng);
  TensorF x0 = TensorF::zeros({1, 1, 8, 8});
  ForwardStats<float> stats;
  TensorF out = model.forward(x0, y, false, nullptr, &stats);
  CHECK(oracles::relative_error(out, y) < 1e-5f);
  REQUIRE(stats.stage_results.size() == 1);
  CHECK(stats.stage_results[0].converged);
  // geometric contraction at rate 1/2
  CHECK(stats.solver_iterations < 40);
  // one forward and one adjoint application per solver iteration
  CHECK(stats.forward_calls ==
        static_cast<std::uint64_t>(stats.solver_iterations));
  CHECK(stats.adjoint_calls ==
        static_cast<std::uint64_t>(stats.solver_iterations));
}

TEST_CASE("deq4ip operator call count exceeds the unrolled budget on deblurring") {
  std::mt19937_64 rng(14);
  auto blur = build_gaussian_blur<float>(9, 5.0f, 1, 16, 16);
  ModelConfig<float> cfg;
  cfg.kind = ModelKind::deq4ip;
  cfg.share = ShareMode::sw;
  cfg.dncnn.channels = 1;
  cfg.dncnn.layers = 3;
  cfg.dncnn.width = 4;
  cfg.lambda_init = 1.0f;
  cfg.solver.forward.max_iters = 200;
  cfg.solver.forward.tol = 1e-4f;
  UnrolledModel<float> model(cfg, blur, 23);
  model.zero_block_outputs();  // pure data-consistency iteration

  TensorF x = uniform<float>({1, 1, 16, 16}, 0, 1, rng);
  TensorF y = blur->apply(x);
  ForwardStats<float> stats;
  model.reconstruct(y, &stats);
  CHECK(stats.forward_calls > 8);
  CHECK(stats.forward_calls ==
        static_cast<std::uint64_t>(stats.solver_iterations));
}

TEST_CASE("deq4ip reconstruction is stable across solver tolerances") {
  // well-posed equilibrium: unitary operator keeps the update a uniform
  // contraction, standing in for a trained regularizer
  std::mt19937_64 rng(31);
  auto op = build_fourier_mask<float>(16, 16, 1, MaskAxis::rows, 3, 1);
  ModelConfig<float> cfg;
  cfg.kind = ModelKind::deq4ip;
  cfg.share = ShareMode::sw;
  cfg.dncnn.channels = 1;
  cfg.dncnn.layers = 3;
  cfg.dncnn.width = 4;
  cfg.lambda_init = 0.8f;
  cfg.solver.forward.max_iters = 400;
  UnrolledModel<float> model(cfg, op, 29);
  model.zero_block_outputs();

  TensorF x = uniform<float>({1, 1, 16, 16}, 0, 1, rng);
  TensorF y = op->apply(x);
  cfg.solver.forward.tol = 1e-3f;
  model.solver_options() = cfg.solver;
  TensorF loose = model.reconstruct(y);
  cfg.solver.forward.tol = 1e-6f;
  model.solver_options() = cfg.solver;
  TensorF tight = model.reconstruct(y);
  CHECK(oracles::relative_error(loose, tight) < 1e-2f);
}

TEST_CASE("lu forward reproduces plain data-consistency iteration when blocks are identity") {
  std::mt19937_64 rng(41);
  auto blur = build_gaussian_blur<double>(9, 5.0, 1, 16, 16);
  ModelConfig<double> cfg = small_luser<double>(6, ShareMode::sw);
  UnrolledModel<double> model(cfg, blur, 31);
  model.zero_block_outputs();

  TensorD x = uniform<double>({1, 1, 16, 16}, 0, 1, rng);
  TensorD y = blur->apply(x);
  TensorD out = model.forward(y, y, false);

  // oracle: the same update sequence written directly
  TensorD z = y;
  for (int k = 0; k < 6; ++k) {
    TensorD resid = sub(y, blur->apply(z));
    z = add(z, blur->adjoint(resid));
  }
  CHECK(std::equal(z.data(), z.data() + z.size(), out.data()));
}

TEST_CASE("model parameter counts include the step sizes") {
  std::mt19937_64 rng(3);
  auto blur = build_gaussian_blur<float>(9, 5.0f, 1, 16, 16);

  // single-channel shared-weight models match the published totals
  ModelConfig<float> lu;
  lu.kind = ModelKind::lu_dncnn;
  lu.share = ShareMode::sw;
  lu.stages = 8;
  UnrolledModel<float> m1(lu, blur, 1);
  CHECK(m1.param_count() == 556033);

  ModelConfig<float> ls;
  ls.kind = ModelKind::luser;
  ls.share = ShareMode::sw;
  ls.stages = 8;
  UnrolledModel<float> m2(ls, blur, 1);
  CHECK(m2.param_count() == 93954);

  // dw: eight blocks, one step size per stage
  ModelConfig<float> ld = ls;
  ld.share = ShareMode::dw;
  UnrolledModel<float> m3(ld, blur, 1);
  CHECK(m3.param_count() == 8 * 93953 + 8);

  // psw repeats four blocks over eight stages
  ModelConfig<float> lp = ls;
  lp.share = ShareMode::psw;
  lp.psw_blocks = 4;
  UnrolledModel<float> m4(lp, blur, 1);
  CHECK(m4.param_count() == 4 * 93953 + 8);
  CHECK(m4.schedule() == std::vector<int>{0, 0, 1, 1, 2, 2, 3, 3});
}

TEST_CASE("stage errors carry the stage index") {
  std::mt19937_64 rng(8);
  auto ident = build_identity<float>({1, 8, 8});
  ModelConfig<float> cfg = small_luser<float>(3, ShareMode::sw);
  cfg.solver.forward.max_iters = 1;
  cfg.solver.forward.tol = 1e-20f;  // unreachable
  cfg.solver.require_convergence = true;
  UnrolledModel<float> model(cfg, ident, 5);
  test_util::make_contractive(model.proximal_block(0), 42, 0.25f);

  TensorF y = uniform<float>({1, 1, 8, 8}, 0, 1, rng);
  try {
    model.forward(y, y, /*train=*/false);
    FAIL("expected a solver error");
  } catch (const SolverError& e) {
    CHECK(std::string(e.what()).find("stage 0") != std::string::npos);
  }

  // best-effort inference instead returns the last iterate with a flag
  model.set_best_effort(true);
  ForwardStats<float> stats;
  TensorF out = model.forward(y, y, false, nullptr, &stats);
  CHECK(stats.degraded);
  CHECK(out.size() == y.size());
}
