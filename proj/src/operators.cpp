#include "luser/operators.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "luser/ops.hpp"

namespace luser {

std::string task_name(TaskKind k) {
  switch (k) {
    case TaskKind::deblur: return "deblur";
    case TaskKind::ct: return "ct";
    case TaskKind::mri: return "mri";
  }
  return "?";
}

namespace {

template <typename T>
void check_batched(const Tensor<T>& x, const Shape& per_sample,
                   const char* what) {
  if (x.rank() != 4 || x.dim(1) != per_sample[0] ||
      x.dim(2) != per_sample[1] || x.dim(3) != per_sample[2]) {
    throw ShapeError(std::string(what) + ": expected [B," +
                     std::to_string(per_sample[0]) + "," +
                     std::to_string(per_sample[1]) + "," +
                     std::to_string(per_sample[2]) + "], got " +
                     shape_str(x.shape()));
  }
}

// ---- gaussian blur ---------------------------------------------------------

template <typename T>
class GaussianBlurOperator final : public LinearOperator<T> {
 public:
  GaussianBlurOperator(std::size_t size, T variance, std::size_t channels,
                       std::size_t h, std::size_t w)
      : LinearOperator<T>(TaskKind::deblur, {channels, h, w},
                          {channels, h, w}),
        size_(size) {
    if (size % 2 == 0) throw Error("blur: kernel size must be odd");
    if (!(variance > T(0))) throw Error("blur: variance must be positive");
    kernel_ = Tensor<T>({1, 1, size, size});
    T* kp = kernel_.mutable_data();
    const long c = static_cast<long>(size) / 2;
    T sum = 0;
    for (long i = 0; i < static_cast<long>(size); ++i) {
      for (long j = 0; j < static_cast<long>(size); ++j) {
        const T r2 = static_cast<T>((i - c) * (i - c) + (j - c) * (j - c));
        const T v = std::exp(-r2 / (T(2) * variance));
        kp[i * size + j] = v;
        sum += v;
      }
    }
    for (std::size_t i = 0; i < size * size; ++i) kp[i] /= sum;
    // True convolution = correlation with the flipped kernel.
    flipped_ = Tensor<T>({1, 1, size, size});
    T* fp = flipped_.mutable_data();
    for (std::size_t i = 0; i < size; ++i) {
      for (std::size_t j = 0; j < size; ++j) {
        fp[i * size + j] = kp[(size - 1 - i) * size + (size - 1 - j)];
      }
    }
  }

  std::string describe() const override {
    return "gaussian_blur(size=" + std::to_string(size_) + ")";
  }

  const Tensor<T>& kernel() const { return kernel_; }

 protected:
  Tensor<T> apply_impl(const Tensor<T>& x) const override {
    return per_channel(x, flipped_, "blur apply");
  }
  Tensor<T> adjoint_impl(const Tensor<T>& y) const override {
    return per_channel(y, kernel_, "blur adjoint");
  }

 private:
  Tensor<T> per_channel(const Tensor<T>& x, const Tensor<T>& k,
                        const char* what) const {
    check_batched(x, this->signal_shape_, what);
    // Identical kernel on every channel: fold channels into the batch axis.
    const Shape orig = x.shape();
    Tensor<T> view = reshape(x, {orig[0] * orig[1], 1, orig[2], orig[3]});
    Tensor<T> out =
        conv2d_raw(view, k, Tensor<T>(), static_cast<int>(size_ / 2));
    return reshape(out, orig);
  }

  std::size_t size_;
  Tensor<T> kernel_;
  Tensor<T> flipped_;
};

// ---- radon -----------------------------------------------------------------

template <typename T>
class RadonOperator final : public LinearOperator<T> {
 public:
  RadonOperator(std::size_t n, std::size_t n_full, std::size_t n_sel,
                std::size_t n_det)
      : LinearOperator<T>(TaskKind::ct, {1, n, n}, {1, n_sel, n_det}),
        n_(n) {
    if (n_sel == 0 || n_full % n_sel != 0) {
      throw Error("radon: selected angle count " + std::to_string(n_sel) +
                  " must divide the full count " + std::to_string(n_full));
    }
    if (n_det < 2) throw Error("radon: need at least 2 detectors");
    const std::size_t stride = n_full / n_sel;
    const double diag = static_cast<double>(n) * std::numbers::sqrt2;
    const double step = 0.5;  // half a pixel along the ray
    // detectors span the image diagonal
    spacing_ = diag / static_cast<double>(n_det - 1);
    const std::size_t n_steps = static_cast<std::size_t>(diag / step) + 1;
    const double half = (static_cast<double>(n) - 1.0) / 2.0;
    const double det_half = (static_cast<double>(n_det) - 1.0) / 2.0;

    std::vector<std::vector<std::pair<std::uint32_t, T>>> rows(n_sel * n_det);
    for (std::size_t a = 0; a < n_sel; ++a) {
      const double theta = std::numbers::pi *
                           static_cast<double>(a * stride) /
                           static_cast<double>(n_full);
      const double ct = std::cos(theta), st = std::sin(theta);
      for (std::size_t j = 0; j < n_det; ++j) {
        const double s = (static_cast<double>(j) - det_half) * spacing_;
        auto& row = rows[a * n_det + j];
        for (std::size_t k = 0; k < n_steps; ++k) {
          const double t =
              -diag / 2.0 + (static_cast<double>(k) + 0.5) * step;
          const double px = s * ct - t * st + half;
          const double py = s * st + t * ct + half;
          const long c0 = static_cast<long>(std::floor(px));
          const long r0 = static_cast<long>(std::floor(py));
          const double fx = px - static_cast<double>(c0);
          const double fy = py - static_cast<double>(r0);
          const long nn = static_cast<long>(n);
          auto push = [&](long r, long c, double w) {
            if (r < 0 || r >= nn || c < 0 || c >= nn || w == 0.0) return;
            row.emplace_back(static_cast<std::uint32_t>(r * nn + c),
                             static_cast<T>(w * step));
          };
          push(r0, c0, (1.0 - fx) * (1.0 - fy));
          push(r0, c0 + 1, fx * (1.0 - fy));
          push(r0 + 1, c0, (1.0 - fx) * fy);
          push(r0 + 1, c0 + 1, fx * fy);
        }
        std::sort(row.begin(), row.end(), [](const auto& x, const auto& y) {
          return x.first < y.first;
        });
        std::size_t out = 0;
        for (std::size_t i = 0; i < row.size(); ++i) {
          if (out > 0 && row[out - 1].first == row[i].first) {
            row[out - 1].second += row[i].second;
          } else {
            row[out++] = row[i];
          }
        }
        row.resize(out);
      }
    }
    n_rows_ = n_sel * n_det;
    row_ptr_.assign(n_rows_ + 1, 0);
    for (std::size_t r = 0; r < n_rows_; ++r) {
      row_ptr_[r + 1] = row_ptr_[r] + rows[r].size();
    }
    cols_.reserve(row_ptr_.back());
    vals_.reserve(row_ptr_.back());
    for (const auto& row : rows) {
      for (const auto& [c, v] : row) {
        cols_.push_back(c);
        vals_.push_back(v);
      }
    }
  }

  std::string describe() const override {
    return "radon(side=" + std::to_string(n_) + ")";
  }

 protected:
  Tensor<T> apply_impl(const Tensor<T>& x) const override {
    check_batched(x, this->signal_shape_, "radon apply");
    const std::size_t B = x.dim(0);
    Tensor<T> out(
        {B, 1, this->measurement_shape_[1], this->measurement_shape_[2]});
    T* op = out.mutable_data();
    const T* xp = x.data();
    const std::size_t npix = n_ * n_;
    for (std::size_t b = 0; b < B; ++b) {
      const T* img = xp + b * npix;
      T* dst = op + b * n_rows_;
      for (std::size_t r = 0; r < n_rows_; ++r) {
        T acc = 0;
        for (std::size_t i = row_ptr_[r]; i < row_ptr_[r + 1]; ++i) {
          acc += vals_[i] * img[cols_[i]];
        }
        dst[r] = acc;
      }
    }
    return out;
  }

  Tensor<T> adjoint_impl(const Tensor<T>& y) const override {
    check_batched(y, this->measurement_shape_, "radon adjoint");
    const std::size_t B = y.dim(0);
    Tensor<T> out({B, 1, n_, n_});
    T* op = out.mutable_data();
    const T* yp = y.data();
    const std::size_t npix = n_ * n_;
    for (std::size_t b = 0; b < B; ++b) {
      const T* src = yp + b * n_rows_;
      T* img = op + b * npix;
      for (std::size_t r = 0; r < n_rows_; ++r) {
        const T v = src[r];
        if (v == T(0)) continue;
        for (std::size_t i = row_ptr_[r]; i < row_ptr_[r + 1]; ++i) {
          img[cols_[i]] += vals_[i] * v;
        }
      }
    }
    return out;
  }

 private:
  std::size_t n_, n_rows_ = 0;
  double spacing_ = 1.0;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::uint32_t> cols_;
  std::vector<T> vals_;
};

// ---- masked fourier ----------------------------------------------------------

template <typename T>
class FourierMaskOperator final : public LinearOperator<T> {
 public:
  FourierMaskOperator(std::size_t h, std::size_t w, std::size_t acc,
                      MaskAxis axis, std::uint64_t seed, std::size_t channels,
                      double center_fraction)
      : LinearOperator<T>(TaskKind::mri, {channels, h, w}, {2, h, w}),
        h_(h),
        w_(w),
        axis_(axis),
        channels_(channels) {
    if (channels != 1 && channels != 2) {
      throw Error("fourier: signal must have 1 or 2 channels");
    }
    const std::size_t n = axis == MaskAxis::rows ? h : w;
    if (acc == 0 || n % acc != 0) {
      throw Error("fourier: acceleration " + std::to_string(acc) +
                  " does not divide the masked axis length " +
                  std::to_string(n));
    }
    keep_.assign(n, 0);
    const std::size_t n_keep = n / acc;
    std::size_t already = 0;
    if (center_fraction > 0.0) {
      const std::size_t band = std::min(
          n_keep,
          static_cast<std::size_t>(std::llround(center_fraction * n)));
      const std::size_t lo = (n - band) / 2;
      for (std::size_t i = lo; i < lo + band; ++i) keep_[i] = 1;
      already = band;
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < n && already < n_keep; ++i) {
      if (!keep_[order[i]]) {
        keep_[order[i]] = 1;
        ++already;
      }
    }
    build_tables();
  }

  std::string describe() const override {
    return "fourier_mask(" + std::to_string(h_) + "x" + std::to_string(w_) +
           ")";
  }

  Tensor<T> mask_tensor() const {
    Tensor<T> m({1, 1, h_, w_});
    T* p = m.mutable_data();
    for (std::size_t r = 0; r < h_; ++r) {
      for (std::size_t c = 0; c < w_; ++c) {
        p[r * w_ + c] = kept(r, c) ? T(1) : T(0);
      }
    }
    return m;
  }

  std::size_t kept_lines() const {
    std::size_t k = 0;
    for (auto v : keep_) k += v;
    return k;
  }

 protected:
  Tensor<T> apply_impl(const Tensor<T>& x) const override {
    check_batched(x, this->signal_shape_, "fourier apply");
    const std::size_t B = x.dim(0);
    const std::size_t hw = h_ * w_;
    Tensor<T> out({B, 2, h_, w_});
    std::vector<T> re(hw), im(hw);
    for (std::size_t b = 0; b < B; ++b) {
      const T* xre = x.data() + (b * channels_) * hw;
      const T* xim = channels_ == 2 ? xre + hw : nullptr;
      dft2(xre, xim, re.data(), im.data(), /*inverse=*/false);
      T* ore = out.mutable_data() + (b * 2) * hw;
      T* oim = ore + hw;
      for (std::size_t r = 0; r < h_; ++r) {
        for (std::size_t c = 0; c < w_; ++c) {
          const std::size_t i = r * w_ + c;
          const bool k = kept(r, c);
          ore[i] = k ? re[i] : T(0);
          oim[i] = k ? im[i] : T(0);
        }
      }
    }
    return out;
  }

  Tensor<T> adjoint_impl(const Tensor<T>& y) const override {
    check_batched(y, this->measurement_shape_, "fourier adjoint");
    const std::size_t B = y.dim(0);
    const std::size_t hw = h_ * w_;
    Tensor<T> out({B, channels_, h_, w_});
    std::vector<T> re(hw), im(hw), mre(hw), mim(hw);
    for (std::size_t b = 0; b < B; ++b) {
      const T* yre = y.data() + (b * 2) * hw;
      const T* yim = yre + hw;
      for (std::size_t r = 0; r < h_; ++r) {
        for (std::size_t c = 0; c < w_; ++c) {
          const std::size_t i = r * w_ + c;
          const bool k = kept(r, c);
          mre[i] = k ? yre[i] : T(0);
          mim[i] = k ? yim[i] : T(0);
        }
      }
      dft2(mre.data(), mim.data(), re.data(), im.data(), /*inverse=*/true);
      T* ore = out.mutable_data() + (b * channels_) * hw;
      std::copy(re.begin(), re.end(), ore);
      if (channels_ == 2) std::copy(im.begin(), im.end(), ore + hw);
    }
    return out;
  }

 private:
  bool kept(std::size_t r, std::size_t c) const {
    return axis_ == MaskAxis::rows ? keep_[r] != 0 : keep_[c] != 0;
  }

  void build_tables() {
    auto fill = [](std::vector<T>& cr, std::vector<T>& ci, std::size_t n) {
      cr.resize(n * n);
      ci.resize(n * n);
      const double scale = 1.0 / std::sqrt(static_cast<double>(n));
      for (std::size_t u = 0; u < n; ++u) {
        for (std::size_t k = 0; k < n; ++k) {
          const double ang = -2.0 * std::numbers::pi *
                             static_cast<double>((u * k) % n) /
                             static_cast<double>(n);
          cr[u * n + k] = static_cast<T>(std::cos(ang) * scale);
          ci[u * n + k] = static_cast<T>(std::sin(ang) * scale);
        }
      }
    };
    fill(fh_re_, fh_im_, h_);
    fill(fw_re_, fw_im_, w_);
  }

  // Orthonormal 2-d DFT (or its inverse = conjugate tables) of a complex
  // image; xim may be null for a real input.
  void dft2(const T* xre, const T* xim, T* ore, T* oim, bool inverse) const {
    const T s = inverse ? T(-1) : T(1);
    std::vector<T> tre(h_ * w_), tim(h_ * w_);
    for (std::size_t r = 0; r < h_; ++r) {
      for (std::size_t v = 0; v < w_; ++v) {
        T ar = 0, ai = 0;
        const T* cr = fw_re_.data() + v * w_;
        const T* ci = fw_im_.data() + v * w_;
        if (xim) {
          for (std::size_t k = 0; k < w_; ++k) {
            const T xr = xre[r * w_ + k], xi = xim[r * w_ + k];
            ar += cr[k] * xr - s * ci[k] * xi;
            ai += s * ci[k] * xr + cr[k] * xi;
          }
        } else {
          for (std::size_t k = 0; k < w_; ++k) {
            const T xr = xre[r * w_ + k];
            ar += cr[k] * xr;
            ai += s * ci[k] * xr;
          }
        }
        tre[r * w_ + v] = ar;
        tim[r * w_ + v] = ai;
      }
    }
    for (std::size_t u = 0; u < h_; ++u) {
      const T* cr = fh_re_.data() + u * h_;
      const T* ci = fh_im_.data() + u * h_;
      for (std::size_t v = 0; v < w_; ++v) {
        T ar = 0, ai = 0;
        for (std::size_t k = 0; k < h_; ++k) {
          const T xr = tre[k * w_ + v], xi = tim[k * w_ + v];
          ar += cr[k] * xr - s * ci[k] * xi;
          ai += s * ci[k] * xr + cr[k] * xi;
        }
        ore[u * w_ + v] = ar;
        oim[u * w_ + v] = ai;
      }
    }
  }

  std::size_t h_, w_;
  MaskAxis axis_;
  std::size_t channels_;
  std::vector<std::uint8_t> keep_;
  std::vector<T> fh_re_, fh_im_, fw_re_, fw_im_;
};

// ---- identity / corrupted ------------------------------------------------------

template <typename T>
class IdentityOperator final : public LinearOperator<T> {
 public:
  explicit IdentityOperator(Shape shape)
      : LinearOperator<T>(TaskKind::deblur, shape, shape) {}
  std::string describe() const override { return "identity"; }

 protected:
  Tensor<T> apply_impl(const Tensor<T>& x) const override { return x; }
  Tensor<T> adjoint_impl(const Tensor<T>& y) const override { return y; }
};

template <typename T>
class CorruptAdjointOperator final : public LinearOperator<T> {
 public:
  CorruptAdjointOperator(OperatorPtr<T> inner, T epsilon)
      : LinearOperator<T>(inner->task(), inner->signal_shape(),
                          inner->measurement_shape()),
        inner_(std::move(inner)),
        eps_(epsilon) {}
  std::string describe() const override {
    return inner_->describe() + "+corrupt_adjoint";
  }

 protected:
  Tensor<T> apply_impl(const Tensor<T>& x) const override {
    return inner_->apply(x);
  }
  Tensor<T> adjoint_impl(const Tensor<T>& y) const override {
    // a rolled copy breaks the transpose identity by O(eps)
    Tensor<T> a = inner_->adjoint(y);
    Tensor<T> out(a.shape());
    T* op = out.mutable_data();
    const T* ap = a.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
      op[i] = ap[i] + eps_ * ap[(i + 1) % n];
    }
    return out;
  }

 private:
  OperatorPtr<T> inner_;
  T eps_;
};

}  // namespace

template <typename T>
OperatorPtr<T> build_gaussian_blur(std::size_t size, T variance,
                                   std::size_t channels, std::size_t height,
                                   std::size_t width) {
  return std::make_shared<GaussianBlurOperator<T>>(size, variance, channels,
                                                   height, width);
}

template <typename T>
OperatorPtr<T> build_radon(std::size_t image_side, std::size_t n_angles_full,
                           std::size_t n_selected, std::size_t n_detectors) {
  return std::make_shared<RadonOperator<T>>(image_side, n_angles_full,
                                            n_selected, n_detectors);
}

template <typename T>
OperatorPtr<T> build_fourier_mask(std::size_t height, std::size_t width,
                                  std::size_t acceleration, MaskAxis axis,
                                  std::uint64_t seed,
                                  std::size_t signal_channels,
                                  double center_fraction) {
  return std::make_shared<FourierMaskOperator<T>>(
      height, width, acceleration, axis, seed, signal_channels,
      center_fraction);
}

template <typename T>
OperatorPtr<T> build_identity(Shape shape) {
  return std::make_shared<IdentityOperator<T>>(std::move(shape));
}

template <typename T>
OperatorPtr<T> corrupt_adjoint(OperatorPtr<T> inner, T epsilon) {
  return std::make_shared<CorruptAdjointOperator<T>>(std::move(inner),
                                                     epsilon);
}

template <typename T>
Tensor<T> add_noise(const Tensor<T>& y, const NoiseModel<T>& model) {
  if (model.sigma == T(0)) return y;
  std::mt19937_64 rng(model.seed);
  std::normal_distribution<T> dist(T(0), model.sigma);
  Tensor<T> out(y.shape());
  T* op = out.mutable_data();
  const T* yp = y.data();
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) op[i] = yp[i] + dist(rng);
  return out;
}

template <typename T>
Tensor<T> initial_estimate(const LinearOperator<T>& op, const Tensor<T>& y) {
  if (op.task() == TaskKind::deblur) return y;
  return op.adjoint(y);
}

template <typename T>
T adjoint_test(const LinearOperator<T>& op, int trials, std::uint64_t seed) {
  if (trials < 1) throw Error("adjoint_test: trials must be >= 1");
  std::mt19937_64 rng(seed);
  const Shape xs = {1, op.signal_shape()[0], op.signal_shape()[1],
                    op.signal_shape()[2]};
  const Shape ys = {1, op.measurement_shape()[0], op.measurement_shape()[1],
                    op.measurement_shape()[2]};
  T worst = 0;
  for (int t = 0; t < trials; ++t) {
    Tensor<T> x = uniform<T>(xs, T(-1), T(1), rng);
    Tensor<T> y = uniform<T>(ys, T(-1), T(1), rng);
    Tensor<T> ax = op.apply(x);
    Tensor<T> aty = op.adjoint(y);
    const T lhs = dot(ax, y);
    const T rhs = dot(x, aty);
    const T denom = norm2(ax) * norm2(y) + static_cast<T>(1e-30);
    worst = std::max(worst, std::abs(lhs - rhs) / denom);
  }
  return worst;
}

template <typename T>
Tensor<T> apply_linop(const OperatorPtr<T>& op, const Tensor<T>& x) {
  Tensor<T> out = op->apply(x);
  if (!GradMode::enabled() || !x.attached()) return out;
  Tape<T>* tape = x.tape();
  TapeNode<T> node;
  node.op = "apply_linop";
  node.inputs = {x.tape_id()};
  node.backward = [op](const TapeNode<T>& n, const Tensor<T>& g,
                       GradMap<T>& grads) {
    grads.accumulate(n.inputs[0], op->adjoint(g));
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> apply_linop_adjoint(const OperatorPtr<T>& op, const Tensor<T>& y) {
  Tensor<T> out = op->adjoint(y);
  if (!GradMode::enabled() || !y.attached()) return out;
  Tape<T>* tape = y.tape();
  TapeNode<T> node;
  node.op = "apply_linop_adjoint";
  node.inputs = {y.tape_id()};
  node.backward = [op](const TapeNode<T>& n, const Tensor<T>& g,
                       GradMap<T>& grads) {
    grads.accumulate(n.inputs[0], op->apply(g));
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> operator_stencil(const LinearOperator<T>& op) {
  if (const auto* blur = dynamic_cast<const GaussianBlurOperator<T>*>(&op)) {
    return blur->kernel();
  }
  if (const auto* fm = dynamic_cast<const FourierMaskOperator<T>*>(&op)) {
    return fm->mask_tensor();
  }
  return Tensor<T>();
}

#define LUSER_OPERATORS_INSTANTIATE(T)                                        \
  template class LinearOperator<T>;                                           \
  template OperatorPtr<T> build_gaussian_blur(std::size_t, T, std::size_t,    \
                                              std::size_t, std::size_t);      \
  template OperatorPtr<T> build_radon(std::size_t, std::size_t, std::size_t,  \
                                      std::size_t);                           \
  template OperatorPtr<T> build_fourier_mask(std::size_t, std::size_t,        \
                                             std::size_t, MaskAxis,           \
                                             std::uint64_t, std::size_t,      \
                                             double);                         \
  template OperatorPtr<T> build_identity(Shape);                              \
  template OperatorPtr<T> corrupt_adjoint(OperatorPtr<T>, T);                 \
  template Tensor<T> add_noise(const Tensor<T>&, const NoiseModel<T>&);       \
  template Tensor<T> initial_estimate(const LinearOperator<T>&,               \
                                      const Tensor<T>&);                      \
  template T adjoint_test(const LinearOperator<T>&, int, std::uint64_t);      \
  template Tensor<T> apply_linop(const OperatorPtr<T>&, const Tensor<T>&);    \
  template Tensor<T> apply_linop_adjoint(const OperatorPtr<T>&,               \
                                         const Tensor<T>&);                   \
  template Tensor<T> operator_stencil(const LinearOperator<T>&);

LUSER_OPERATORS_INSTANTIATE(float)
LUSER_OPERATORS_INSTANTIATE(double)
#undef LUSER_OPERATORS_INSTANTIATE

}  // namespace luser
