#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "luser/networks.hpp"
#include "luser/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace luser;

TEST_CASE("spectral_scale leaves a unit-norm weight nearly unchanged") {
  // diagonal construction with known singular values <= 1, largest exactly 1
  std::mt19937_64 rng(4);
  const std::size_t n = 6;
  TensorD w = TensorD::zeros({n, n, 1, 1});
  for (std::size_t i = 0; i < n; ++i) {
    w.mutable_data()[(i * n + i)] = 1.0 - 0.1 * static_cast<double>(i);
  }
  SNConv<double> conv(n, n, 1, false, true, rng);
  conv.weight() = w;
  for (int i = 0; i < 20; ++i) conv.power_iterate();
  CHECK(conv.sigma_estimate() == doctest::Approx(1.0).epsilon(1e-3));
  TensorD wbar = conv.effective_weight();
  CHECK(oracles::max_abs_diff(wbar, w) < 1e-2);
}

TEST_CASE("rank-1 weight: sigma estimate reaches |u||v| within 5 iterations") {
  std::mt19937_64 rng(8);
  const std::size_t rows = 5, cols = 12;
  TensorD u = uniform<double>({rows}, -1, 1, rng);
  TensorD v = uniform<double>({cols}, -1, 1, rng);
  const double target = 5.0;
  const double scale_f = target / (norm2(u) * norm2(v));
  TensorD w({rows, cols / 4, 2, 2});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      w.mutable_data()[r * cols + c] = scale_f * u[r] * v[c];
    }
  }
  SNConv<double> conv(cols / 4, rows, 2 /*unused shape detail*/, false, true,
                      rng);
  conv.weight() = w;
  // fresh random vectors; rank-1 convergence is immediate
  conv.power_iterate(5);
  CHECK(conv.sigma_estimate() == doctest::Approx(target).epsilon(1e-6));
  TensorD wbar = conv.effective_weight();
  const double post = oracles::largest_singular_value(
      std::vector<double>(wbar.data(), wbar.data() + wbar.size()), rows, cols);
  CHECK(post == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("normalized weights have largest singular value at most 1+1e-2 after warm-up") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t cin = 3 + trial, cout = 8;
    SNConv<double> conv(cin, cout, 3, true, true, rng);
    // random rescale so sigma is far from 1 initially
    double* wp = conv.weight().mutable_data();
    for (std::size_t i = 0; i < conv.weight().size(); ++i) wp[i] *= 7.5;
    for (int i = 0; i < 20; ++i) conv.power_iterate();
    TensorD wbar = conv.effective_weight();
    const double smax = oracles::largest_singular_value(
        std::vector<double>(wbar.data(), wbar.data() + wbar.size()), cout,
        cin * 9);
    CHECK(smax <= 1.0 + 1e-2);
  }
}

TEST_CASE("spectral_scale gradient matches finite differences") {
  std::mt19937_64 rng(13);
  TensorD w = uniform<double>({4, 3, 3, 3}, -0.5, 0.5, rng);
  TensorD u = uniform<double>({4}, -1, 1, rng);
  TensorD v = uniform<double>({27}, -1, 1, rng);
  // normalize the direction estimates as the layer would
  {
    double nu = norm2(u), nv = norm2(v);
    for (std::size_t i = 0; i < 4; ++i) u.mutable_data()[i] /= nu;
    for (std::size_t i = 0; i < 27; ++i) v.mutable_data()[i] /= nv;
  }
  TensorD mix = uniform<double>({4, 3, 3, 3}, -1, 1, rng);

  Tape<double> tape;
  tape.attach_leaf(w);
  TensorD out = spectral_scale(w, u, v);
  GradMap<double> g = tape.backward_from(out, mix);
  auto fd = oracles::finite_difference_grad<double>(
      [&](const TensorD& wt) {
        NoGradScope ng;
        return dot(spectral_scale(wt.detached(), u, v), mix);
      },
      w.detached());
  CHECK(oracles::relative_error(g.of(w), fd) < 1e-4);
}

TEST_CASE("dncnn: residual form, shape contract, zeroed output = identity") {
  std::mt19937_64 rng(3);
  DnCNNConfig<double> cfg;
  cfg.channels = 1;
  cfg.layers = 5;
  cfg.width = 8;
  DnCNN<double> net(cfg, rng);

  TensorD x = uniform<double>({1, 1, 16, 16}, 0, 1, rng);
  TensorD out = net.forward(x, /*train=*/false, /*update_stats=*/false);
  CHECK(out.shape() == x.shape());

  TensorD x2 = uniform<double>({2, 1, 12, 12}, 0, 1, rng);
  CHECK(net.forward(x2, false, false).shape() == x2.shape());

  net.zero_output_layer();
  TensorD same = net.forward(x, false, false);
  CHECK(oracles::max_abs_diff(same, x) == 0.0);

  TensorD bad({1, 2, 16, 16});
  CHECK_THROWS_AS(net.forward(bad, false, false), ShapeError);
}

TEST_CASE("dncnn parameter count matches the published 17-layer single-channel size") {
  std::mt19937_64 rng(1);
  DnCNNConfig<float> cfg;
  cfg.channels = 1;
  cfg.layers = 17;
  cfg.width = 64;
  DnCNN<float> net(cfg, rng);
  // 556,033 with the model-level step-size scalar; the block itself is one
  // parameter short of that
  CHECK(net.param_count() == 556032);

  DnCNNConfig<float> cfg2 = cfg;
  cfg2.channels = 2;
  DnCNN<float> net2(cfg2, rng);
  CHECK(net2.param_count() == 557184);
}

TEST_CASE("proximal block parameter count matches the published single-channel size") {
  std::mt19937_64 rng(1);
  ProximalBlockConfig<float> cfg;  // width 32, table layout
  ProximalBlock<float> block(cfg, rng);
  CHECK(block.param_count() == 93953);

  ProximalBlockConfig<float> cfg2;
  cfg2.channels = 2;
  ProximalBlock<float> block2(cfg2, rng);
  CHECK(block2.param_count() == 95106);

  ProximalBlockConfig<float> cfg3;
  cfg3.channels = 3;
  ProximalBlock<float> block3(cfg3, rng);
  CHECK(block3.param_count() == 96259);
}

TEST_CASE("proximal block with zeroed output layer is the identity, bit-exact") {
  std::mt19937_64 rng(6);
  ProximalBlockConfig<double> cfg;
  cfg.width = 8;
  cfg.gn_groups = 4;
  ProximalBlock<double> block(cfg, rng);
  block.zero_output_layer();

  TensorD d = uniform<double>({2, 1, 12, 12}, -1, 1, rng);
  EquilibriumOptions<double> opts;
  FixedPointResult<double> st;
  TensorD out = block.forward(d, opts, &st);
  CHECK(st.converged);
  CHECK(st.iterations == 1);
  CHECK(std::equal(d.data(), d.data() + d.size(), out.data()));
}

TEST_CASE("injection runs exactly once per forward regardless of solver iterations") {
  std::mt19937_64 rng(21);
  ProximalBlockConfig<double> cfg;
  cfg.width = 8;
  cfg.gn_groups = 4;
  ProximalBlock<double> block(cfg, rng);
  test_util::make_contractive(block, 77);

  TensorD d = uniform<double>({1, 1, 12, 12}, 0, 1, rng);
  EquilibriumOptions<double> opts;
  opts.forward.max_iters = 37;
  opts.forward.tol = 1e-14;  // force many iterations
  opts.require_convergence = false;
  const auto before = block.injection_calls();
  FixedPointResult<double> st;
  block.forward(d, opts, &st);
  CHECK(st.iterations > 5);
  CHECK(block.injection_calls() == before + 1);
}

TEST_CASE("proximal block outputs agree across solver tolerances") {
  // well-posedness smoke check on a contractive toy block
  std::mt19937_64 rng(99);
  ProximalBlockConfig<double> cfg;
  cfg.width = 8;
  cfg.gn_groups = 4;
  ProximalBlock<double> block(cfg, rng);
  test_util::make_contractive(block, 100);

  TensorD d = uniform<double>({1, 1, 16, 16}, 0, 1, rng);
  EquilibriumOptions<double> loose;
  loose.forward.tol = 1e-3;
  EquilibriumOptions<double> tight;
  tight.forward.tol = 1e-10;
  tight.forward.max_iters = 200;
  TensorD out_loose = block.forward(d, loose, nullptr);
  TensorD out_tight = block.forward(d, tight, nullptr);
  CHECK(oracles::relative_error(out_loose, out_tight) < 1e-2);
}

TEST_CASE("checkpoint names cover every parameter and buffer") {
  std::mt19937_64 rng(2);
  ProximalBlockConfig<float> cfg;
  ProximalBlock<float> block(cfg, rng);
  NamedTensors<float> params, buffers;
  block.params(params, "stage3");
  block.buffers(buffers, "stage3");
  bool found = false;
  for (auto& [name, ptr] : params) {
    if (name == "stage3.mix.conv2.weight") found = true;
  }
  CHECK(found);
  CHECK(buffers.size() == 14);  // u and v per wrapped conv
  std::size_t total = 0;
  for (auto& [name, ptr] : params) total += ptr->size();
  CHECK(total == block.param_count());
}
