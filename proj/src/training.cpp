#include "luser/training.hpp"

#include <algorithm>
#include <cmath>

#include "luser/io.hpp"
#include "luser/ops.hpp"

namespace luser {

template <typename T>
Tensor<T> loss_final(const Tensor<T>& x_k, const Tensor<T>& x_true) {
  return mse(x_k, x_true);
}

template <typename T>
Tensor<T> loss_aux(std::span<const Tensor<T>> intermediates,
                   const Tensor<T>& x_true) {
  if (intermediates.empty()) {
    throw Error("loss_aux: no intermediate reconstructions");
  }
  Tensor<T> acc = mse(intermediates[0], x_true);
  for (std::size_t k = 1; k < intermediates.size(); ++k) {
    acc = add(acc, mse(intermediates[k], x_true));
  }
  return scale(acc, T(1) / static_cast<T>(intermediates.size()));
}

// ---- datasets -----------------------------------------------------------------

template <typename T>
Tensor<T> random_smooth_field(std::size_t h, std::size_t w, T smooth_sigma,
                              std::mt19937_64& rng) {
  Tensor<T> noise = uniform<T>({1, 1, h, w}, T(0), T(1), rng);
  if (smooth_sigma > T(0)) {
    const std::size_t half =
        static_cast<std::size_t>(std::ceil(2.0 * smooth_sigma));
    const std::size_t k = 2 * half + 1;
    Tensor<T> kernel({1, 1, k, k});
    T* kp = kernel.mutable_data();
    T sum = 0;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const T di = static_cast<T>(i) - static_cast<T>(half);
        const T dj = static_cast<T>(j) - static_cast<T>(half);
        const T v =
            std::exp(-(di * di + dj * dj) / (T(2) * smooth_sigma * smooth_sigma));
        kp[i * k + j] = v;
        sum += v;
      }
    }
    for (std::size_t i = 0; i < k * k; ++i) kp[i] /= sum;
    noise = conv2d_raw(noise, kernel, Tensor<T>(), static_cast<int>(half));
  }
  T lo = noise[0], hi = noise[0];
  const T* p = noise.data();
  for (std::size_t i = 0; i < noise.size(); ++i) {
    lo = std::min(lo, p[i]);
    hi = std::max(hi, p[i]);
  }
  const T span = std::max(hi - lo, static_cast<T>(1e-9));
  Tensor<T> out(noise.shape());
  T* op = out.mutable_data();
  for (std::size_t i = 0; i < noise.size(); ++i) op[i] = (p[i] - lo) / span;
  return out;
}

template <typename T>
Tensor<T> ellipse_phantom(std::size_t n, int n_ellipses, std::mt19937_64& rng) {
  Tensor<T> img = Tensor<T>::zeros({1, 1, n, n});
  T* p = img.mutable_data();
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  struct Ellipse {
    double cx, cy, ax, ay, phi, val;
  };
  std::vector<Ellipse> es;
  es.push_back({0.0, 0.0, 0.82, 0.88, 0.0, 0.7});  // body
  for (int i = 0; i < n_ellipses; ++i) {
    es.push_back({(u01(rng) - 0.5) * 1.1, (u01(rng) - 0.5) * 1.1,
                  0.08 + 0.32 * u01(rng), 0.08 + 0.32 * u01(rng),
                  u01(rng) * 3.14159265358979, -0.35 + 0.85 * u01(rng)});
  }
  const double half = (static_cast<double>(n) - 1.0) / 2.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      // normalized coordinates in [-1, 1]
      const double x = (static_cast<double>(c) - half) / half;
      const double y = (static_cast<double>(r) - half) / half;
      double v = 0;
      for (const auto& e : es) {
        const double dx = x - e.cx, dy = y - e.cy;
        const double cs = std::cos(e.phi), sn = std::sin(e.phi);
        const double xr = (dx * cs + dy * sn) / e.ax;
        const double yr = (-dx * sn + dy * cs) / e.ay;
        if (xr * xr + yr * yr <= 1.0) v += e.val;
      }
      p[r * n + c] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

template <typename T>
Dataset<T> make_synthetic_dataset(const OperatorPtr<T>& op,
                                  const SyntheticSpec<T>& spec) {
  Dataset<T> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  const Shape& sig = op->signal_shape();
  std::mt19937_64 rng(spec.seed);
  for (int i = 0; i < spec.count; ++i) {
    Sample<T> s;
    if (op->task() == TaskKind::ct) {
      s.x_true = ellipse_phantom<T>(sig[1], spec.phantom_ellipses, rng);
    } else {
      Tensor<T> field = random_smooth_field<T>(sig[1], sig[2],
                                               spec.field_sigma, rng);
      if (sig[0] > 1) {
        // extra channels (e.g. the imaginary part) start at zero
        Tensor<T> multi = Tensor<T>::zeros({1, sig[0], sig[1], sig[2]});
        std::copy(field.data(), field.data() + field.size(),
                  multi.mutable_data());
        field = multi;
      }
      s.x_true = field;
    }
    NoiseModel<T> noise{spec.noise_sigma, spec.seed * 0x9e3779b9ull + 1000003ull * static_cast<std::uint64_t>(i) + 17ull};
    s.y = add_noise(op->apply(s.x_true), noise);
    s.x0 = initial_estimate(*op, s.y);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
Dataset<T> make_directory_dataset(const OperatorPtr<T>& op,
                                  const std::string& dir, T noise_sigma,
                                  std::uint64_t seed) {
  Dataset<T> out;
  const Shape& sig = op->signal_shape();
  std::uint64_t i = 0;
  for (const std::string& path : list_images(dir)) {
    Tensor<T> img = load_image<T>(path);
    if (img.dim(1) != sig[0] || img.dim(2) != sig[1] || img.dim(3) != sig[2]) {
      throw IoError(path + ": image shape " + shape_str(img.shape()) +
                    " does not match operator signal [1," +
                    std::to_string(sig[0]) + "," + std::to_string(sig[1]) +
                    "," + std::to_string(sig[2]) + "]");
    }
    Sample<T> s;
    s.x_true = std::move(img);
    NoiseModel<T> noise{noise_sigma, seed + 7919ull * i++};
    s.y = add_noise(op->apply(s.x_true), noise);
    s.x0 = initial_estimate(*op, s.y);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError(dir + ": no readable images");
  return out;
}

template <typename T>
Tensor<T> stack_batch(const std::vector<const Tensor<T>*>& items) {
  if (items.empty()) throw Error("stack_batch: empty batch");
  const Shape& s0 = items.front()->shape();
  Tensor<T> out({items.size() * s0[0], s0[1], s0[2], s0[3]});
  T* op = out.mutable_data();
  std::size_t off = 0;
  for (const Tensor<T>* t : items) {
    check_same_shape(*t, *items.front(), "stack_batch");
    std::copy(t->data(), t->data() + t->size(), op + off);
    off += t->size();
  }
  return out;
}

// ---- optimizer -----------------------------------------------------------------

template <typename T>
void AdamOptimizer<T>::step(const std::vector<Tensor<T>*>& params,
                            const std::vector<Tensor<T>>& grads) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = Tensor<T>::zeros(params[i]->shape());
      v_[i] = Tensor<T>::zeros(params[i]->shape());
    }
  }
  if (params.size() != grads.size()) {
    throw Error("optimizer: param/grad count mismatch");
  }
  ++t_;
  const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
  const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].empty()) continue;
    T* m = m_[i].mutable_data();
    T* v = v_[i].mutable_data();
    T* p = params[i]->mutable_data();
    const T* g = grads[i].data();
    const std::size_t n = params[i]->size();
    for (std::size_t e = 0; e < n; ++e) {
      m[e] = beta1_ * m[e] + (T(1) - beta1_) * g[e];
      v[e] = beta2_ * v[e] + (T(1) - beta2_) * g[e] * g[e];
      const T mhat = m[e] / bc1;
      const T vhat = v[e] / bc2;
      p[e] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

// ---- training loop ---------------------------------------------------------------

namespace {

template <typename T>
struct AttachedParams {
  Tape<T> tape;
  NamedTensors<T> named;
  std::vector<Tensor<T>*> ptrs;

  explicit AttachedParams(UnrolledModel<T>& model) {
    model.params(named);
    for (auto& [name, ptr] : named) {
      tape.attach_leaf(*ptr);
      ptrs.push_back(ptr);
    }
  }
  ~AttachedParams() {
    for (auto& [name, ptr] : named) ptr->detach_inplace();
  }
  AttachedParams(const AttachedParams&) = delete;
  AttachedParams& operator=(const AttachedParams&) = delete;
};

}  // namespace

template <typename T>
std::pair<T, T> evaluate(UnrolledModel<T>& model, const Dataset<T>& set) {
  if (set.empty()) throw Error("evaluate: empty dataset");
  NoGradScope no_grad;
  double psnr_sum = 0, ssim_sum = 0;
  for (const Sample<T>& s : set) {
    Tensor<T> xhat = model.forward(s.x0, s.y, /*train=*/false);
    psnr_sum += static_cast<double>(psnr(s.x_true, xhat));
    ssim_sum += static_cast<double>(ssim(s.x_true, xhat));
  }
  const double n = static_cast<double>(set.size());
  return {static_cast<T>(psnr_sum / n), static_cast<T>(ssim_sum / n)};
}

template <typename T>
TrainResult<T> train(UnrolledModel<T>& model, const Dataset<T>& train_set,
                     const Dataset<T>& val_set, const TrainConfig<T>& cfg) {
  cfg.validate();
  if (train_set.empty()) throw Error("train: empty dataset");
  if (cfg.loss == LossMode::aux && model.config().kind == ModelKind::deq4ip) {
    throw Error("train: auxiliary loss needs an unrolled (lu) model");
  }

  AttachedParams<T> attached(model);
  AdamOptimizer<T> opt(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                       cfg.adam_eps);
  TrainResult<T> result;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(cfg.seed * 1000003ull +
                                static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    model.op()->reset_counters();

    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Tensor<T>*> xs, ys, x0s;
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(&train_set[order[i]].x_true);
        ys.push_back(&train_set[order[i]].y);
        x0s.push_back(&train_set[order[i]].x0);
      }
      Tensor<T> xt = stack_batch(xs);
      Tensor<T> y = stack_batch(ys);
      Tensor<T> x0 = stack_batch(x0s);

      std::vector<Tensor<T>> intermediates;
      Tensor<T> out = model.forward(
          x0, y, /*train=*/true,
          cfg.loss == LossMode::aux ? &intermediates : nullptr);
      Tensor<T> loss =
          cfg.loss == LossMode::aux
              ? loss_aux<T>(std::span<const Tensor<T>>(intermediates.data(),
                                                       intermediates.size()),
                            xt)
              : loss_final(out, xt);
      loss_sum += static_cast<double>(loss.item());
      ++batches;

      GradMap<T> grads = attached.tape.backward(loss);
      std::vector<Tensor<T>> grad_list;
      grad_list.reserve(attached.ptrs.size());
      for (Tensor<T>* p : attached.ptrs) {
        grad_list.push_back(grads.has(p->tape_id()) ? grads.at(p->tape_id())
                                                    : Tensor<T>());
      }
      {
        NoGradScope no_grad;
        opt.step(attached.ptrs, grad_list);
      }
    }

    EpochLog<T> log;
    log.epoch = epoch;
    log.train_loss = static_cast<T>(loss_sum / std::max<std::size_t>(1, batches));
    log.fwd_calls = model.op()->forward_calls();
    log.adj_calls = model.op()->adjoint_calls();
    if (!val_set.empty()) {
      auto [p, s] = evaluate(model, val_set);
      log.val_psnr = p;
      log.val_ssim = s;
    }
    result.epochs.push_back(log);
  }
  return result;
}

// ---- memory accounting ---------------------------------------------------------------

template <typename T>
MemoryReport memory_report(UnrolledModel<T>& model, const Tensor<T>& x0,
                           const Tensor<T>& y) {
  AttachedParams<T> attached(model);
  MemoryReport report;
  report.parameter_count = model.param_count();

  model.op()->reset_counters();
  Tensor<T> out = model.forward(x0, y, /*train=*/true);
  report.forward_calls = model.op()->forward_calls();
  report.adjoint_calls = model.op()->adjoint_calls();

  report.peak_recorded_elements = attached.tape.saved_elements();
  for (auto& [scope, n] : attached.tape.saved_elements_by_scope()) {
    report.per_stage.emplace_back(scope, n);
  }

  GradMap<T> grads =
      attached.tape.backward_from(out, Tensor<T>::full(out.shape(), T(1)));
  for (Tensor<T>* p : attached.ptrs) {
    if (grads.has(p->tape_id())) {
      report.param_grad_elements += grads.at(p->tape_id()).size();
    }
  }
  return report;
}

#define LUSER_TRAINING_INSTANTIATE(T)                                         \
  template Tensor<T> loss_final(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> loss_aux(std::span<const Tensor<T>>, const Tensor<T>&);  \
  template Tensor<T> random_smooth_field(std::size_t, std::size_t, T,         \
                                         std::mt19937_64&);                   \
  template Tensor<T> ellipse_phantom(std::size_t, int, std::mt19937_64&);     \
  template Dataset<T> make_synthetic_dataset(const OperatorPtr<T>&,           \
                                             const SyntheticSpec<T>&);        \
  template Dataset<T> make_directory_dataset(const OperatorPtr<T>&,           \
                                             const std::string&, T,           \
                                             std::uint64_t);                  \
  template Tensor<T> stack_batch(const std::vector<const Tensor<T>*>&);       \
  template class AdamOptimizer<T>;                                            \
  template TrainResult<T> train(UnrolledModel<T>&, const Dataset<T>&,         \
                                const Dataset<T>&, const TrainConfig<T>&);    \
  template std::pair<T, T> evaluate(UnrolledModel<T>&, const Dataset<T>&);    \
  template MemoryReport memory_report(UnrolledModel<T>&, const Tensor<T>&,    \
                                      const Tensor<T>&);

LUSER_TRAINING_INSTANTIATE(float)
LUSER_TRAINING_INSTANTIATE(double)
#undef LUSER_TRAINING_INSTANTIATE

}  // namespace luser
