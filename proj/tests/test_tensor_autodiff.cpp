#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "luser/io.hpp"
#include "luser/ops.hpp"
#include "luser/tape.hpp"
#include "luser/tensor.hpp"
#include "oracles.hpp"

using namespace luser;

namespace {

// Scalar probe: sum of c * op_output with fixed random mix c so the FD check
// exercises every output element.
template <typename T>
T mixed_sum(const Tensor<T>& out, const Tensor<T>& mix) {
  return dot(out, mix);
}

template <typename T>
Tensor<T> rand_t(Shape s, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
  return uniform<T>(std::move(s), lo, hi, rng);
}

}  // namespace

TEST_CASE("tensor basics and shape errors") {
  TensorF t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.shape() == Shape{2, 3});
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK(TensorF::scalar(2.5f).item() == 2.5f);

  TensorF a({1, 2, 3, 4});
  TensorF b({1, 2, 4, 3});
  CHECK_THROWS_WITH_AS(check_same_shape(a, b, "t"),
                       doctest::Contains("axis 2"), ShapeError);

  TensorF r = reshape(a, {2, 12});
  CHECK(r.shares_buffer(a));
  CHECK_THROWS_AS(reshape(a, {5, 5}), ShapeError);
}

TEST_CASE("conv2d full-overlap center value is 9") {
  TensorD x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  TensorD w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  TensorD out = conv2d_raw(x, w, TensorD(), 1);
  CHECK(out.shape() == Shape{1, 1, 3, 3});
  CHECK(out.at4(0, 0, 1, 1) == doctest::Approx(9.0));
  CHECK(out.at4(0, 0, 0, 0) == doctest::Approx(4.0));
}

TEST_CASE("conv2d identity kernel reproduces the input") {
  std::mt19937_64 rng(7);
  TensorD x = rand_t<double>({2, 3, 5, 6}, rng);
  TensorD w = Tensor<double>::zeros({3, 3, 3, 3});
  // one centered 1 per matching in/out channel pair
  for (std::size_t c = 0; c < 3; ++c) {
    w.mutable_data()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
  }
  TensorD out = conv2d_raw(x, w, TensorD(), 1);
  CHECK(oracles::max_abs_diff(out, x) == 0.0);
}

TEST_CASE("conv2d matches the dense-matrix oracle") {
  std::mt19937_64 rng(42);
  const std::size_t h = 8, w = 8;
  TensorD x = rand_t<double>({2, 3, h, w}, rng);
  TensorD kw = rand_t<double>({4, 3, 3, 3}, rng);
  TensorD out = conv2d_raw(x, kw, TensorD(), 1);

  const auto m = oracles::conv_as_matrix(kw, h, w, 1);
  const std::size_t rows = 4 * h * w, cols = 3 * h * w;
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> want(rows, 0.0);
    const double* xb = x.data() + b * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0;
      for (std::size_t c = 0; c < cols; ++c) acc += m[r * cols + c] * xb[c];
      want[r] = acc;
    }
    const double* got = out.data() + b * rows;
    for (std::size_t r = 0; r < rows; ++r) {
      CHECK(got[r] == doctest::Approx(want[r]).epsilon(1e-10));
    }
  }
}

TEST_CASE("conv2d shape errors name the offending axis") {
  TensorD x({1, 2, 4, 4});
  TensorD w({1, 3, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d_raw(x, w, TensorD(), 1),
                       doctest::Contains("axis 1"), ShapeError);
  TensorD w2({2, 2, 3, 3});
  TensorD bias({3});
  CHECK_THROWS_WITH_AS(conv2d_raw(x, w2, bias, 1),
                       doctest::Contains("axis 0"), ShapeError);
  TensorD weven({2, 2, 2, 2});
  CHECK_THROWS_AS(conv2d_raw(x, weven, TensorD(), 1), ShapeError);
}

TEST_CASE("conv2d linearity") {
  std::mt19937_64 rng(3);
  TensorF x = rand_t<float>({1, 2, 6, 6}, rng);
  TensorF y = rand_t<float>({1, 2, 6, 6}, rng);
  TensorF w = rand_t<float>({3, 2, 3, 3}, rng);
  const float a = 0.7f, b = -1.3f;
  TensorF lhs = conv2d_raw(add_scaled(scale(x, a), y, b), w, TensorF(), 1);
  TensorF rhs =
      add(scale(conv2d_raw(x, w, TensorF(), 1), a),
          scale(conv2d_raw(y, w, TensorF(), 1), b));
  CHECK(oracles::max_abs_diff(lhs, rhs) < 1e-6f);
}

TEST_CASE("leaky_relu values and gradient") {
  TensorD x({3}, {-1.0, 0.0, 2.0});
  TensorD out = leaky_relu(x, 0.1);
  CHECK(out[0] == doctest::Approx(-0.1));
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 2.0);

  TensorD pos({4}, {0.5, 1.0, 2.0, 0.0});
  CHECK(oracles::max_abs_diff(leaky_relu(pos, 0.3), pos) == 0.0);

  CHECK_THROWS_AS(leaky_relu(x, 1.5), Error);

  // gradient at x = -3 is the slope, against central differences
  Tape<double> tape;
  TensorD p = TensorD::scalar(-3.0);
  tape.attach_leaf(p);
  GradMap<double> g = tape.backward(sum_all(leaky_relu(p, 0.01)));
  CHECK(g.of(p)[0] == doctest::Approx(0.01));
  auto fd = oracles::finite_difference_grad<double>(
      [](const TensorD& v) {
        return sum_all(leaky_relu(v, 0.01)).item();
      },
      p.detached());
  CHECK(g.of(p)[0] == doctest::Approx(fd[0]).epsilon(1e-4));
}

TEST_CASE("group_norm: constant input and per-channel statistics") {
  std::mt19937_64 rng(5);
  TensorD gamma = TensorD::full({8}, 1.0);
  TensorD beta = TensorD::zeros({8});

  TensorD cst = TensorD::full({2, 8, 4, 4}, 3.7);
  TensorD out = group_norm(cst, 4, gamma, beta, 1e-5);
  CHECK(max_abs(out) < 1e-6);

  // groups == C: per-channel normalization
  TensorD x = rand_t<double>({2, 8, 6, 6}, rng);
  TensorD norm = group_norm(x, 8, gamma, beta, 1e-12);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 0; c < 8; ++c) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < 36; ++i) {
        mean += norm.data()[(b * 8 + c) * 36 + i];
      }
      mean /= 36;
      for (std::size_t i = 0; i < 36; ++i) {
        const double d = norm.data()[(b * 8 + c) * 36 + i] - mean;
        var += d * d;
      }
      var /= 36;
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(var - 1.0) < 1e-5);
    }
  }

  CHECK_THROWS_AS(group_norm(x, 3, gamma, beta, 1e-5), ShapeError);
}

TEST_CASE("group_norm matches brute-force recomputation") {
  std::mt19937_64 rng(11);
  const std::size_t B = 2, C = 6, H = 5, W = 4, G = 3;
  TensorD x = rand_t<double>({B, C, H, W}, rng);
  TensorD gamma = rand_t<double>({C}, rng, 0.5, 1.5);
  TensorD beta = rand_t<double>({C}, rng, -0.5, 0.5);
  const double eps = 1e-5;
  TensorD out = group_norm(x, G, gamma, beta, eps);

  const std::size_t cg = C / G, hw = H * W;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < G; ++g) {
      double mean = 0, var = 0;
      for (std::size_t cc = 0; cc < cg; ++cc) {
        for (std::size_t i = 0; i < hw; ++i) {
          mean += x.data()[(b * C + g * cg + cc) * hw + i];
        }
      }
      mean /= static_cast<double>(cg * hw);
      for (std::size_t cc = 0; cc < cg; ++cc) {
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = x.data()[(b * C + g * cg + cc) * hw + i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(cg * hw);
      for (std::size_t cc = 0; cc < cg; ++cc) {
        const std::size_t c = g * cg + cc;
        for (std::size_t i = 0; i < hw; ++i) {
          const double want =
              gamma[c] * (x.data()[(b * C + c) * hw + i] - mean) /
                  std::sqrt(var + eps) +
              beta[c];
          CHECK(out.data()[(b * C + c) * hw + i] ==
                doctest::Approx(want).epsilon(1e-6));
        }
      }
    }
  }
}

TEST_CASE("batch_norm eval identity and train constant batch") {
  TensorD gamma = TensorD::full({3}, 1.0);
  TensorD beta = TensorD::zeros({3});
  auto state = BatchNormState<double>::init(3);

  std::mt19937_64 rng(2);
  TensorD x = rand_t<double>({2, 3, 4, 4}, rng);
  TensorD out = batch_norm(x, gamma, beta, state, /*train=*/false, 0.1, 1e-5);
  CHECK(oracles::max_abs_diff(out, x) < 1e-4);  // eps effect only

  TensorD cst = TensorD::full({4, 3, 2, 2}, 5.0);
  TensorD beta2({3}, {0.1, 0.2, 0.3});
  auto state2 = BatchNormState<double>::init(3);
  TensorD out2 = batch_norm(cst, gamma, beta2, state2, true, 0.1, 1e-5);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(out2.at4(0, c, 0, 0) == doctest::Approx(beta2[c]).epsilon(1e-9));
  }
}

TEST_CASE("batch_norm running state follows the two-step moving average") {
  TensorD gamma = TensorD::full({1}, 1.0);
  TensorD beta = TensorD::zeros({1});
  auto state = BatchNormState<double>::init(1);
  const double momentum = 0.1;

  // batch of known mean/var: values {0,2} -> mean 1, biased var 1,
  // unbiased var 2
  TensorD batch1({2, 1, 1, 1}, {0.0, 2.0});
  batch_norm(batch1, gamma, beta, state, true, momentum, 1e-5);
  double rm = 0.9 * 0.0 + 0.1 * 1.0;
  double rv = 0.9 * 1.0 + 0.1 * 2.0;
  CHECK(state.running_mean[0] == doctest::Approx(rm).epsilon(1e-12));
  CHECK(state.running_var[0] == doctest::Approx(rv).epsilon(1e-12));

  // second step: values {4,8} -> mean 6, unbiased var 8
  TensorD batch2({2, 1, 1, 1}, {4.0, 8.0});
  batch_norm(batch2, gamma, beta, state, true, momentum, 1e-5);
  rm = 0.9 * rm + 0.1 * 6.0;
  rv = 0.9 * rv + 0.1 * 8.0;
  CHECK(state.running_mean[0] == doctest::Approx(rm).epsilon(1e-12));
  CHECK(state.running_var[0] == doctest::Approx(rv).epsilon(1e-12));
}

TEST_CASE("concat_channels widths, empty side, and slicing round trip") {
  std::mt19937_64 rng(9);
  TensorF a = rand_t<float>({2, 32, 4, 4}, rng);
  TensorF b = rand_t<float>({2, 32, 4, 4}, rng);
  TensorF cat = concat_channels(a, b);
  CHECK(cat.shape() == Shape{2, 64, 4, 4});

  TensorF back_a = slice_channels(cat, 0, 32);
  TensorF back_b = slice_channels(cat, 32, 64);
  CHECK(oracles::max_abs_diff(back_a, a) == 0.0f);
  CHECK(oracles::max_abs_diff(back_b, b) == 0.0f);

  TensorF empty({2, 0, 4, 4});
  TensorF same = concat_channels(a, empty);
  CHECK(same.shape() == a.shape());
  CHECK(oracles::max_abs_diff(same, a) == 0.0f);

  TensorF c({2, 32, 5, 4});
  CHECK_THROWS_WITH_AS(concat_channels(a, c), doctest::Contains("axis 2"),
                       ShapeError);
}

TEST_CASE("backward: linear probe, disconnected leaf, non-scalar loss") {
  std::mt19937_64 rng(1);
  Tape<double> tape;
  TensorD w = rand_t<double>({6}, rng);
  TensorD unused = rand_t<double>({3}, rng);
  tape.attach_leaf(w);
  tape.attach_leaf(unused);

  TensorD x = rand_t<double>({6}, rng);
  TensorD loss = sum_all(mul(w, x));
  CHECK_THROWS_AS(tape.backward(mul(w, x)), ShapeError);
  GradMap<double> g = tape.backward(loss);
  CHECK(oracles::max_abs_diff(g.of(w), x) < 1e-12);
  CHECK(max_abs(g.of(unused)) == 0.0);
}

TEST_CASE("backward through conv -> leaky_relu -> mse matches finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    TensorD x = rand_t<double>({1, 2, 5, 5}, rng);
    TensorD w = rand_t<double>({3, 2, 3, 3}, rng, -0.5, 0.5);
    TensorD bias = rand_t<double>({3}, rng, -0.1, 0.1);
    TensorD target = rand_t<double>({1, 3, 5, 5}, rng);

    Tape<double> tape;
    tape.attach_leaf(x);
    tape.attach_leaf(w);
    tape.attach_leaf(bias);
    TensorD loss = mse(leaky_relu(conv2d(x, w, bias, 1), 0.01), target);
    GradMap<double> g = tape.backward(loss);

    auto probe = [&](Tensor<double>* slot, const TensorD& at) {
      const TensorD orig = *slot;
      auto f = [&](const TensorD& v) {
        NoGradScope ng;
        TensorD xx = slot == &x ? v : x.detached();
        TensorD ww = slot == &w ? v : w.detached();
        TensorD bb = slot == &bias ? v : bias.detached();
        return mse(leaky_relu(conv2d_raw(xx, ww, bb, 1), 0.01), target)
            .item();
      };
      return oracles::finite_difference_grad<double>(f, at.detached());
    };
    CHECK(oracles::relative_error(g.of(x), probe(&x, x)) < 1e-4);
    CHECK(oracles::relative_error(g.of(w), probe(&w, w)) < 1e-4);
    CHECK(oracles::relative_error(g.of(bias), probe(&bias, bias)) < 1e-4);
  }
}

TEST_CASE("every primitive passes central finite differences over 20 seeds") {
  int seeds_run = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(3777 + seed);
    const std::size_t B = 1, C = 4, H = 5, W = 5;
    TensorD mix_in = rand_t<double>({B, C, H, W}, rng);
    TensorD gamma = rand_t<double>({C}, rng, 0.5, 1.5);
    TensorD beta = rand_t<double>({C}, rng, -0.3, 0.3);
    TensorD s = TensorD::scalar(0.8 + 0.4 * (seed % 3));
    auto bn_state = BatchNormState<double>::init(C);

    struct Case {
      const char* name;
      std::function<TensorD()> run;        // recorded path
      std::function<double(const TensorD&)> fd;  // detached scalar probe
      TensorD* leaf;
    };

    TensorD x = rand_t<double>({B, C, H, W}, rng);
    {
      // keep inputs away from the relu kink, where central differences
      // straddle the non-smooth point
      double* xp = x.mutable_data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::abs(xp[i]) < 0.05) xp[i] += xp[i] >= 0 ? 0.05 : -0.05;
      }
    }
    TensorD mixw = rand_t<double>({B, C, H, W}, rng);

    Tape<double> tape;
    tape.attach_leaf(x);

    std::vector<Case> cases;
    cases.push_back({"leaky_relu",
                     [&] { return leaky_relu(x, 0.2); },
                     [&](const TensorD& v) {
                       NoGradScope ng;
                       return dot(leaky_relu(v.detached(), 0.2), mixw);
                     },
                     &x});
    cases.push_back({"relu",
                     [&] { return relu(x); },
                     [&](const TensorD& v) {
                       NoGradScope ng;
                       return dot(relu(v.detached()), mixw);
                     },
                     &x});
    cases.push_back({"group_norm",
                     [&] { return group_norm(x, 2, gamma, beta, 1e-5); },
                     [&](const TensorD& v) {
                       NoGradScope ng;
                       return dot(
                           group_norm(v.detached(), 2, gamma, beta, 1e-5),
                           mixw);
                     },
                     &x});
    cases.push_back(
        {"batch_norm",
         [&] { return batch_norm(x, gamma, beta, bn_state, true, 0.1, 1e-5); },
         [&](const TensorD& v) {
           NoGradScope ng;
           auto st = BatchNormState<double>::init(C);
           return dot(
               batch_norm(v.detached(), gamma, beta, st, true, 0.1, 1e-5),
               mixw);
         },
         &x});
    cases.push_back({"mul_scalar_param",
                     [&] { return mul_scalar_param(x, s); },
                     [&](const TensorD& v) {
                       NoGradScope ng;
                       return dot(mul_scalar_param(v.detached(), s), mixw);
                     },
                     &x});
    cases.push_back({"mse",
                     [&] { return mse(x, mix_in); },
                     [&](const TensorD& v) {
                       NoGradScope ng;
                       return mse(v.detached(), mix_in).item() * dot(mixw, mixw);
                     },
                     &x});

    for (auto& c : cases) {
      TensorD out = c.run();
      TensorD cot = out.size() == 1
                        ? TensorD::scalar(dot(mixw, mixw))
                        : mixw;
      GradMap<double> g = tape.backward_from(out, cot, /*retain=*/false);
      auto fd = oracles::finite_difference_grad<double>(c.fd, c.leaf->detached());
      const double err = oracles::relative_error(g.of(*c.leaf), fd);
      CAPTURE(c.name);
      CHECK(err < 1e-4);
      tape.clear_nodes();
    }
    ++seeds_run;
  }
  CHECK(seeds_run == 20);
}

TEST_CASE("vjp: linear map, elementwise square, small cnn jacobian") {
  std::mt19937_64 rng(21);

  // linear f(x) = Mx via conv with 1x1 kernel: vjp must be M^T c
  const std::size_t cin = 3, cout = 4;
  TensorD m = rand_t<double>({cout, cin, 1, 1}, rng);
  TensorD at = rand_t<double>({1, cin, 1, 1}, rng);
  TensorD cot = rand_t<double>({1, cout, 1, 1}, rng);
  TensorD got = vjp<double>(
      [&](const TensorD& v) { return conv2d(v, m, TensorD(), 0); }, at, cot);
  for (std::size_t i = 0; i < cin; ++i) {
    double want = 0;
    for (std::size_t o = 0; o < cout; ++o) {
      want += m.at4(o, i, 0, 0) * cot[o];
    }
    CHECK(got[i] == doctest::Approx(want).epsilon(1e-10));
  }

  // elementwise square: vjp = 2 x . c
  TensorD x = rand_t<double>({2, 2, 3, 3}, rng);
  TensorD c2 = rand_t<double>({2, 2, 3, 3}, rng);
  TensorD sq = vjp<double>([](const TensorD& v) { return mul(v, v); }, x, c2);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(sq[i] == doctest::Approx(2.0 * x[i] * c2[i]).epsilon(1e-12));
  }

  // random small cnn block: columns of J^T against finite differences
  TensorD w1 = rand_t<double>({4, 1, 3, 3}, rng, -0.5, 0.5);
  TensorD w2 = rand_t<double>({1, 4, 3, 3}, rng, -0.5, 0.5);
  auto f = [&](const TensorD& v) {
    return conv2d(leaky_relu(conv2d(v, w1, TensorD(), 1), 0.05), w2,
                  TensorD(), 1);
  };
  TensorD at2 = rand_t<double>({1, 1, 6, 6}, rng);  // 36 input dims
  TensorD cot2 = rand_t<double>({1, 1, 6, 6}, rng);
  TensorD got2 = vjp<double>(f, at2, cot2);
  auto fd = oracles::finite_difference_grad<double>(
      [&](const TensorD& v) {
        NoGradScope ng;
        return dot(f(v.detached()), cot2);
      },
      at2.detached());
  CHECK(oracles::relative_error(got2, fd) < 1e-4);
}

TEST_CASE("no gradient flows from a no-record scope") {
  std::mt19937_64 rng(8);
  Tape<double> tape;
  TensorD w = rand_t<double>({1, 1, 3, 3}, rng);
  tape.attach_leaf(w);
  TensorD x = rand_t<double>({1, 1, 4, 4}, rng);

  const std::size_t before = tape.n_nodes();
  {
    NoGradScope ng;
    TensorD h = conv2d(x, w, TensorD(), 1);
    TensorD h2 = leaky_relu(h, 0.1);
    CHECK(!h.attached());
    CHECK(!h2.attached());
  }
  CHECK(tape.n_nodes() == before);
  CHECK(tape.saved_elements() == 0);

  // and the recorded path does store activations
  TensorD out = conv2d(x, w, TensorD(), 1);
  CHECK(out.attached());
  CHECK(tape.saved_elements() > 0);
}

TEST_CASE("ult1 tensor format round trips bit-exactly") {
  std::mt19937_64 rng(123);
  const std::string dir = std::filesystem::temp_directory_path().string();
  const std::string path = dir + "/luser_test_tensor.ult1";

  TensorF tf = uniform<float>({3, 4, 5}, -2.f, 2.f, rng);
  save_tensor(tf, path);
  TensorF back = load_tensor<float>(path);
  CHECK(back.shape() == tf.shape());
  CHECK(std::equal(tf.data(), tf.data() + tf.size(), back.data()));

  TensorD td = uniform<double>({7}, -1.0, 1.0, rng);
  save_tensor(td, path);
  TensorD backd = load_tensor<double>(path);
  CHECK(std::equal(td.data(), td.data() + td.size(), backd.data()));
  // cross-precision load converts
  TensorF asf = load_tensor<float>(path);
  CHECK(asf.size() == td.size());

  std::filesystem::remove(path);
}

TEST_CASE("checkpoint container round trips names and payloads") {
  std::mt19937_64 rng(5);
  const std::string path =
      std::filesystem::temp_directory_path().string() + "/luser_test.ckpt";
  std::vector<std::pair<std::string, TensorF>> entries;
  entries.emplace_back("stage3.mix.conv2.weight",
                       uniform<float>({4, 4, 3, 3}, -1.f, 1.f, rng));
  entries.emplace_back("lambda0", TensorF::scalar(1.0f));
  save_checkpoint(entries, path);
  auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.size() == 2);
  CHECK(loaded.count("stage3.mix.conv2.weight") == 1);
  CHECK(std::equal(entries[0].second.data(),
                   entries[0].second.data() + entries[0].second.size(),
                   loaded.at("stage3.mix.conv2.weight").data()));
  std::filesystem::remove(path);
}
