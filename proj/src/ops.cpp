#include "luser/ops.hpp"

#include <algorithm>
#include <cmath>

namespace luser {

namespace {

template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradMode::enabled()) return nullptr;
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : inputs) {
    if (!t->attached()) continue;
    if (tape && tape != t->tape()) {
      throw Error("op inputs live on different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

template <typename T>
int id_of(const Tensor<T>& t) {
  return t.attached() ? t.tape_id() : -1;
}

void check_4d(const Shape& s, const char* where) {
  if (s.size() != 4) {
    throw ShapeError(std::string(where) + ": expected rank-4 tensor, got " +
                     shape_str(s));
  }
}

}  // namespace

// ---- convolution kernels --------------------------------------------------

template <typename T>
Tensor<T> conv2d_raw(const Tensor<T>& input, const Tensor<T>& weight,
                     const Tensor<T>& bias, int pad) {
  check_4d(input.shape(), "conv2d input");
  check_4d(weight.shape(), "conv2d weight");
  const std::size_t B = input.dim(0), Ci = input.dim(1), H = input.dim(2),
                    W = input.dim(3);
  const std::size_t Co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != Ci) {
    throw ShapeError("conv2d: axis 1 (input channels) mismatch, input has " +
                     std::to_string(Ci) + ", weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("conv2d: kernel extents must be odd, got " +
                     std::to_string(kh) + "x" + std::to_string(kw));
  }
  if (pad < 0) throw ShapeError("conv2d: negative padding");
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != Co)) {
    throw ShapeError("conv2d: axis 0 (bias channels) mismatch, got " +
                     shape_str(bias.shape()) + " for " + std::to_string(Co) +
                     " output channels");
  }
  const std::size_t p = static_cast<std::size_t>(pad);
  if (H + 2 * p < kh || W + 2 * p < kw) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  const std::size_t Ho = H + 2 * p - kh + 1, Wo = W + 2 * p - kw + 1;

  Tensor<T> out({B, Co, Ho, Wo});
  T* out_base = out.mutable_data();
  const T* in_base = input.data();
  const T* w_base = weight.data();
  const T* b_base = bias.empty() ? nullptr : bias.data();
  const long ip = static_cast<long>(p);

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      T* outp = out_base + (b * Co + co) * Ho * Wo;
      if (b_base) {
        std::fill(outp, outp + Ho * Wo, b_base[co]);
      }
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const T* inp = in_base + (b * Ci + ci) * H * W;
        const T* wrow = w_base + (co * Ci + ci) * kh * kw;
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t j = 0; j < kw; ++j) {
            const T wv = wrow[i * kw + j];
            if (wv == T(0)) continue;
            const long di = static_cast<long>(i) - ip;
            const long dj = static_cast<long>(j) - ip;
            const long h_lo = std::max<long>(0, -di);
            const long h_hi =
                std::min<long>(static_cast<long>(Ho) - 1,
                               static_cast<long>(H) - 1 - di);
            const long w_lo = std::max<long>(0, -dj);
            const long w_hi =
                std::min<long>(static_cast<long>(Wo) - 1,
                               static_cast<long>(W) - 1 - dj);
            const long n = w_hi - w_lo + 1;
            if (n <= 0) continue;
            for (long h = h_lo; h <= h_hi; ++h) {
              T* dst = outp + h * static_cast<long>(Wo) + w_lo;
              const T* src = inp + (h + di) * static_cast<long>(W) + w_lo + dj;
              for (long k = 0; k < n; ++k) dst[k] += wv * src[k];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& weight,
                            int pad, std::size_t in_h, std::size_t in_w) {
  const std::size_t B = grad_out.dim(0), Co = grad_out.dim(1),
                    Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  const std::size_t Ci = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  Tensor<T> gin({B, Ci, in_h, in_w});
  T* gin_base = gin.mutable_data();
  const T* g_base = grad_out.data();
  const T* w_base = weight.data();
  const long ip = pad;

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      const T* gp = g_base + (b * Co + co) * Ho * Wo;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        T* gip = gin_base + (b * Ci + ci) * in_h * in_w;
        const T* wrow = w_base + (co * Ci + ci) * kh * kw;
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t j = 0; j < kw; ++j) {
            const T wv = wrow[i * kw + j];
            if (wv == T(0)) continue;
            const long di = static_cast<long>(i) - ip;
            const long dj = static_cast<long>(j) - ip;
            const long h_lo = std::max<long>(0, -di);
            const long h_hi =
                std::min<long>(static_cast<long>(Ho) - 1,
                               static_cast<long>(in_h) - 1 - di);
            const long w_lo = std::max<long>(0, -dj);
            const long w_hi =
                std::min<long>(static_cast<long>(Wo) - 1,
                               static_cast<long>(in_w) - 1 - dj);
            const long n = w_hi - w_lo + 1;
            if (n <= 0) continue;
            for (long h = h_lo; h <= h_hi; ++h) {
              const T* src = gp + h * static_cast<long>(Wo) + w_lo;
              T* dst = gip + (h + di) * static_cast<long>(in_w) + w_lo + dj;
              for (long k = 0; k < n; ++k) dst[k] += wv * src[k];
            }
          }
        }
      }
    }
  }
  return gin;
}

template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& input,
                             int pad, std::size_t kh, std::size_t kw) {
  const std::size_t B = grad_out.dim(0), Co = grad_out.dim(1),
                    Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  const std::size_t Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor<T> gw({Co, Ci, kh, kw});
  T* gw_base = gw.mutable_data();
  const T* g_base = grad_out.data();
  const T* in_base = input.data();
  const long ip = pad;

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      const T* gp = g_base + (b * Co + co) * Ho * Wo;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const T* inp = in_base + (b * Ci + ci) * H * W;
        T* gwrow = gw_base + (co * Ci + ci) * kh * kw;
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t j = 0; j < kw; ++j) {
            const long di = static_cast<long>(i) - ip;
            const long dj = static_cast<long>(j) - ip;
            const long h_lo = std::max<long>(0, -di);
            const long h_hi =
                std::min<long>(static_cast<long>(Ho) - 1,
                               static_cast<long>(H) - 1 - di);
            const long w_lo = std::max<long>(0, -dj);
            const long w_hi =
                std::min<long>(static_cast<long>(Wo) - 1,
                               static_cast<long>(W) - 1 - dj);
            const long n = w_hi - w_lo + 1;
            if (n <= 0) continue;
            T acc = 0;
            for (long h = h_lo; h <= h_hi; ++h) {
              const T* gs = gp + h * static_cast<long>(Wo) + w_lo;
              const T* is = inp + (h + di) * static_cast<long>(W) + w_lo + dj;
              for (long k = 0; k < n; ++k) acc += gs[k] * is[k];
            }
            gwrow[i * kw + j] += acc;
          }
        }
      }
    }
  }
  return gw;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int pad) {
  Tensor<T> out = conv2d_raw(input, weight, bias, pad);
  Tape<T>* tape = recording_tape<T>({&input, &weight, &bias});
  if (!tape) return out;

  const std::size_t H = input.dim(2), W = input.dim(3);
  const std::size_t kh = weight.dim(2), kw = weight.dim(3);
  TapeNode<T> node;
  node.op = "conv2d";
  node.inputs = {id_of(input), id_of(weight), id_of(bias)};
  node.saved = {input.detached(), weight.detached()};
  node.backward = [pad, H, W, kh, kw](const TapeNode<T>& n, const Tensor<T>& g,
                                      GradMap<T>& grads) {
    const Tensor<T>& x = n.saved[0];
    const Tensor<T>& w = n.saved[1];
    if (n.inputs[0] >= 0) {
      grads.accumulate(n.inputs[0], conv2d_grad_input(g, w, pad, H, W));
    }
    if (n.inputs[1] >= 0) {
      grads.accumulate(n.inputs[1], conv2d_grad_weight(g, x, pad, kh, kw));
    }
    if (n.inputs[2] >= 0) {
      const std::size_t Co = g.dim(1), Ho = g.dim(2), Wo = g.dim(3);
      Tensor<T> gb({Co});
      T* gbp = gb.mutable_data();
      const T* gp = g.data();
      for (std::size_t b = 0; b < g.dim(0); ++b) {
        for (std::size_t c = 0; c < Co; ++c) {
          T acc = 0;
          const T* row = gp + (b * Co + c) * Ho * Wo;
          for (std::size_t k = 0; k < Ho * Wo; ++k) acc += row[k];
          gbp[c] += acc;
        }
      }
      grads.accumulate(n.inputs[2], gb);
    }
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

// ---- activations -----------------------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  if (!(slope > T(0) && slope < T(1))) {
    throw Error("leaky_relu: slope must lie in (0,1)");
  }
  Tensor<T> out(x.shape());
  T* op = out.mutable_data();
  const T* xp = x.data();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    op[i] = xp[i] >= T(0) ? xp[i] : slope * xp[i];
  }
  Tape<T>* tape = recording_tape<T>({&x});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "leaky_relu";
  node.inputs = {id_of(x)};
  node.saved = {x.detached()};
  node.backward = [slope](const TapeNode<T>& n, const Tensor<T>& g,
                          GradMap<T>& grads) {
    const T* xp = n.saved[0].data();
    const T* gp = g.data();
    Tensor<T> gx(n.saved[0].shape());
    T* gxp = gx.mutable_data();
    const std::size_t m = gx.size();
    for (std::size_t i = 0; i < m; ++i) {
      gxp[i] = xp[i] >= T(0) ? gp[i] : slope * gp[i];
    }
    grads.accumulate(n.inputs[0], gx);
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  T* op = out.mutable_data();
  const T* xp = x.data();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) op[i] = xp[i] >= T(0) ? xp[i] : T(0);
  Tape<T>* tape = recording_tape<T>({&x});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "relu";
  node.inputs = {id_of(x)};
  node.saved = {x.detached()};
  node.backward = [](const TapeNode<T>& n, const Tensor<T>& g,
                     GradMap<T>& grads) {
    const T* xp = n.saved[0].data();
    const T* gp = g.data();
    Tensor<T> gx(n.saved[0].shape());
    T* gxp = gx.mutable_data();
    const std::size_t m = gx.size();
    for (std::size_t i = 0; i < m; ++i) gxp[i] = xp[i] >= T(0) ? gp[i] : T(0);
    grads.accumulate(n.inputs[0], gx);
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

// ---- normalization ---------------------------------------------------------

namespace {

// Shared normalization backward: x_hat stored, per-slice inv_std, channel
// affine. Slices are (batch, group) for group norm.
template <typename T>
void norm_backward_grouped(const Tensor<T>& xhat, const Tensor<T>& inv_std,
                           const Tensor<T>& gamma, std::size_t groups,
                           const Tensor<T>& g, Tensor<T>* gx, Tensor<T>* ggamma,
                           Tensor<T>* gbeta) {
  const std::size_t B = xhat.dim(0), C = xhat.dim(1), H = xhat.dim(2),
                    W = xhat.dim(3);
  const std::size_t cg = C / groups;
  const std::size_t hw = H * W;
  const std::size_t m = cg * hw;
  const T* xh = xhat.data();
  const T* gp = g.data();
  const T* gam = gamma.data();
  const T* istd = inv_std.data();

  if (ggamma) {
    T* gg = ggamma->mutable_data();
    T* gb = gbeta->mutable_data();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const T* xrow = xh + (b * C + c) * hw;
        const T* grow = gp + (b * C + c) * hw;
        T sg = 0, sb = 0;
        for (std::size_t k = 0; k < hw; ++k) {
          sg += grow[k] * xrow[k];
          sb += grow[k];
        }
        gg[c] += sg;
        gb[c] += sb;
      }
    }
  }
  if (gx) {
    T* gxp = gx->mutable_data();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t grp = 0; grp < groups; ++grp) {
        T mean_gy = 0, mean_gy_xhat = 0;
        for (std::size_t cc = 0; cc < cg; ++cc) {
          const std::size_t c = grp * cg + cc;
          const T* xrow = xh + (b * C + c) * hw;
          const T* grow = gp + (b * C + c) * hw;
          const T gc = gam[c];
          for (std::size_t k = 0; k < hw; ++k) {
            const T gyv = grow[k] * gc;
            mean_gy += gyv;
            mean_gy_xhat += gyv * xrow[k];
          }
        }
        mean_gy /= static_cast<T>(m);
        mean_gy_xhat /= static_cast<T>(m);
        const T is = istd[b * groups + grp];
        for (std::size_t cc = 0; cc < cg; ++cc) {
          const std::size_t c = grp * cg + cc;
          const T* xrow = xh + (b * C + c) * hw;
          const T* grow = gp + (b * C + c) * hw;
          T* gxrow = gxp + (b * C + c) * hw;
          const T gc = gam[c];
          for (std::size_t k = 0; k < hw; ++k) {
            gxrow[k] +=
                is * (grow[k] * gc - mean_gy - xrow[k] * mean_gy_xhat);
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups,
                     const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  check_4d(x.shape(), "group_norm");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (groups == 0 || C % groups != 0) {
    throw ShapeError("group_norm: channel count " + std::to_string(C) +
                     " not divisible by " + std::to_string(groups) +
                     " groups");
  }
  if (gamma.size() != C || beta.size() != C) {
    throw ShapeError("group_norm: affine parameters must have C=" +
                     std::to_string(C) + " entries");
  }
  const std::size_t cg = C / groups, hw = H * W, m = cg * hw;
  Tensor<T> xhat(x.shape());
  Tensor<T> inv_std({B, groups});
  Tensor<T> out(x.shape());
  {
    const T* xp = x.data();
    T* xhp = xhat.mutable_data();
    T* isp = inv_std.mutable_data();
    T* op = out.mutable_data();
    const T* gam = gamma.data();
    const T* bet = beta.data();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t grp = 0; grp < groups; ++grp) {
        const T* base = xp + (b * C + grp * cg) * hw;
        T mean = 0;
        for (std::size_t k = 0; k < m; ++k) mean += base[k];
        mean /= static_cast<T>(m);
        T var = 0;
        for (std::size_t k = 0; k < m; ++k) {
          const T d = base[k] - mean;
          var += d * d;
        }
        var /= static_cast<T>(m);
        const T is = T(1) / std::sqrt(var + eps);
        isp[b * groups + grp] = is;
        for (std::size_t cc = 0; cc < cg; ++cc) {
          const std::size_t c = grp * cg + cc;
          const T* xrow = xp + (b * C + c) * hw;
          T* xhrow = xhp + (b * C + c) * hw;
          T* orow = op + (b * C + c) * hw;
          for (std::size_t k = 0; k < hw; ++k) {
            const T v = (xrow[k] - mean) * is;
            xhrow[k] = v;
            orow[k] = gam[c] * v + bet[c];
          }
        }
      }
    }
  }
  Tape<T>* tape = recording_tape<T>({&x, &gamma, &beta});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "group_norm";
  node.inputs = {id_of(x), id_of(gamma), id_of(beta)};
  node.saved = {xhat, inv_std, gamma.detached()};
  node.backward = [groups](const TapeNode<T>& n, const Tensor<T>& g,
                           GradMap<T>& grads) {
    const Tensor<T>& xh = n.saved[0];
    Tensor<T> gx = Tensor<T>::zeros(xh.shape());
    Tensor<T> gg = Tensor<T>::zeros(n.saved[2].shape());
    Tensor<T> gb = Tensor<T>::zeros(n.saved[2].shape());
    norm_backward_grouped(xh, n.saved[1], n.saved[2], groups, g,
                          n.inputs[0] >= 0 ? &gx : nullptr, &gg, &gb);
    grads.accumulate(n.inputs[0], gx);
    grads.accumulate(n.inputs[1], gg);
    grads.accumulate(n.inputs[2], gb);
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormState<T>& state,
                     bool train, T momentum, T eps) {
  check_4d(x.shape(), "batch_norm");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t hw = H * W, m = B * hw;
  Tensor<T> mean({C}), var({C});
  if (train) {
    T* mp = mean.mutable_data();
    T* vp = var.mutable_data();
    const T* xp = x.data();
    for (std::size_t c = 0; c < C; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* row = xp + (b * C + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) s += row[k];
      }
      const T mu = s / static_cast<T>(m);
      T v = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* row = xp + (b * C + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          const T d = row[k] - mu;
          v += d * d;
        }
      }
      mp[c] = mu;
      vp[c] = v / static_cast<T>(m);
    }
    // Exponential moving average; unbiased variance enters the running state.
    T* rm = state.running_mean.mutable_data();
    T* rv = state.running_var.mutable_data();
    const T unbias =
        m > 1 ? static_cast<T>(m) / static_cast<T>(m - 1) : T(1);
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mp[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * vp[c] * unbias;
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> inv_std({C});
  Tensor<T> out(x.shape());
  {
    const T* xp = x.data();
    const T* mp = mean.data();
    const T* vp = var.data();
    const T* gam = gamma.data();
    const T* bet = beta.data();
    T* xhp = xhat.mutable_data();
    T* isp = inv_std.mutable_data();
    T* op = out.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      isp[c] = T(1) / std::sqrt(vp[c] + eps);
    }
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const T* xrow = xp + (b * C + c) * hw;
        T* xhrow = xhp + (b * C + c) * hw;
        T* orow = op + (b * C + c) * hw;
        const T is = isp[c], mu = mp[c], gc = gam[c], bc = bet[c];
        for (std::size_t k = 0; k < hw; ++k) {
          const T v = (xrow[k] - mu) * is;
          xhrow[k] = v;
          orow[k] = gc * v + bc;
        }
      }
    }
  }
  Tape<T>* tape = recording_tape<T>({&x, &gamma, &beta});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "batch_norm";
  node.inputs = {id_of(x), id_of(gamma), id_of(beta)};
  node.saved = {xhat, inv_std, gamma.detached()};
  node.backward = [train, B, hw](const TapeNode<T>& n, const Tensor<T>& g,
                                 GradMap<T>& grads) {
    const Tensor<T>& xh = n.saved[0];
    const Tensor<T>& istd = n.saved[1];
    const Tensor<T>& gam = n.saved[2];
    const std::size_t C = xh.dim(1);
    const std::size_t m = B * hw;
    Tensor<T> gg = Tensor<T>::zeros({C});
    Tensor<T> gb = Tensor<T>::zeros({C});
    const T* xhp = xh.data();
    const T* gp = g.data();
    {
      T* ggp = gg.mutable_data();
      T* gbp = gb.mutable_data();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          const T* xrow = xhp + (b * C + c) * hw;
          const T* grow = gp + (b * C + c) * hw;
          T sg = 0, sb = 0;
          for (std::size_t k = 0; k < hw; ++k) {
            sg += grow[k] * xrow[k];
            sb += grow[k];
          }
          ggp[c] += sg;
          gbp[c] += sb;
        }
      }
    }
    if (n.inputs[0] >= 0) {
      Tensor<T> gx(xh.shape());
      T* gxp = gx.mutable_data();
      const T* ggp = gg.data();
      const T* gbp = gb.data();
      const T* isp = istd.data();
      const T* gmp = gam.data();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          const T* xrow = xhp + (b * C + c) * hw;
          const T* grow = gp + (b * C + c) * hw;
          T* gxrow = gxp + (b * C + c) * hw;
          const T is = isp[c], gc = gmp[c];
          if (train) {
            const T mg = gbp[c] / static_cast<T>(m);
            const T mgx = ggp[c] / static_cast<T>(m);
            for (std::size_t k = 0; k < hw; ++k) {
              gxrow[k] = is * gc * (grow[k] - mg - xrow[k] * mgx);
            }
          } else {
            for (std::size_t k = 0; k < hw; ++k) {
              gxrow[k] = is * gc * grow[k];
            }
          }
        }
      }
      grads.accumulate(n.inputs[0], gx);
    }
    grads.accumulate(n.inputs[1], gg);
    grads.accumulate(n.inputs[2], gb);
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> spectral_scale(const Tensor<T>& weight, const Tensor<T>& u,
                         const Tensor<T>& v) {
  const std::size_t rows = weight.dim(0);
  const std::size_t cols = weight.size() / rows;
  if (u.size() != rows || v.size() != cols) {
    throw ShapeError("spectral_scale: singular vector extents do not match "
                     "the matricized weight");
  }
  // sigma = u^T W v on the [rows, cols] matricization.
  const T* wp = weight.data();
  const T* up = u.data();
  const T* vp = v.data();
  T sigma = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* wrow = wp + r * cols;
    T acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += wrow[c] * vp[c];
    sigma += up[r] * acc;
  }
  if (sigma == T(0)) sigma = T(1);

  Tensor<T> out(weight.shape());
  T* op = out.mutable_data();
  const T inv = T(1) / sigma;
  const std::size_t n = weight.size();
  for (std::size_t i = 0; i < n; ++i) op[i] = wp[i] * inv;

  Tape<T>* tape = recording_tape<T>({&weight});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "spectral_scale";
  node.inputs = {id_of(weight)};
  node.saved = {weight.detached(), u.detached(), v.detached(),
                Tensor<T>::scalar(sigma)};
  node.backward = [rows, cols](const TapeNode<T>& n, const Tensor<T>& g,
                               GradMap<T>& grads) {
    const Tensor<T>& w = n.saved[0];
    const T* up = n.saved[1].data();
    const T* vp = n.saved[2].data();
    const T sigma = n.saved[3].item();
    const T gw_dot = dot(g, w);
    Tensor<T> gx(w.shape());
    T* gxp = gx.mutable_data();
    const T* gp = g.data();
    const T inv = T(1) / sigma;
    const T coef = gw_dot * inv * inv;
    for (std::size_t r = 0; r < rows; ++r) {
      const T ur = up[r];
      T* grow = gxp + r * cols;
      const T* gsrc = gp + r * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        grow[c] = gsrc[c] * inv - coef * ur * vp[c];
      }
    }
    grads.accumulate(n.inputs[0], gx);
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

// ---- structure --------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  check_4d(a.shape(), "concat_channels");
  check_4d(b.shape(), "concat_channels");
  for (std::size_t ax : {std::size_t(0), std::size_t(2), std::size_t(3)}) {
    if (a.shape()[ax] != b.shape()[ax]) {
      throw ShapeError("concat_channels: axis " + std::to_string(ax) +
                       " mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  const std::size_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1),
                    hw = a.dim(2) * a.dim(3);
  Tensor<T> out({B, Ca + Cb, a.dim(2), a.dim(3)});
  T* op = out.mutable_data();
  const T* ap = a.data();
  const T* bp = b.data();
  for (std::size_t n = 0; n < B; ++n) {
    if (Ca > 0) {
      std::copy(ap + n * Ca * hw, ap + (n + 1) * Ca * hw,
                op + n * (Ca + Cb) * hw);
    }
    if (Cb > 0) {
      std::copy(bp + n * Cb * hw, bp + (n + 1) * Cb * hw,
                op + (n * (Ca + Cb) + Ca) * hw);
    }
  }
  Tape<T>* tape = recording_tape<T>({&a, &b});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "concat_channels";
  node.inputs = {id_of(a), id_of(b)};
  node.backward = [B, Ca, Cb, hw](const TapeNode<T>& n, const Tensor<T>& g,
                                  GradMap<T>& grads) {
    const T* gp = g.data();
    if (n.inputs[0] >= 0) {
      Tensor<T> ga({B, Ca, g.dim(2), g.dim(3)});
      T* gap = ga.mutable_data();
      for (std::size_t b = 0; b < B; ++b) {
        std::copy(gp + b * (Ca + Cb) * hw, gp + (b * (Ca + Cb) + Ca) * hw,
                  gap + b * Ca * hw);
      }
      grads.accumulate(n.inputs[0], ga);
    }
    if (n.inputs[1] >= 0) {
      Tensor<T> gb({B, Cb, g.dim(2), g.dim(3)});
      T* gbp = gb.mutable_data();
      for (std::size_t b = 0; b < B; ++b) {
        std::copy(gp + (b * (Ca + Cb) + Ca) * hw,
                  gp + (b + 1) * (Ca + Cb) * hw, gbp + b * Cb * hw);
      }
      grads.accumulate(n.inputs[1], gb);
    }
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  check_4d(x.shape(), "slice_channels");
  const std::size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c0 > c1 || c1 > C) {
    throw ShapeError("slice_channels: range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") out of " + std::to_string(C) +
                     " channels");
  }
  const std::size_t Cs = c1 - c0;
  Tensor<T> out({B, Cs, x.dim(2), x.dim(3)});
  T* op = out.mutable_data();
  const T* xp = x.data();
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(xp + (b * C + c0) * hw, xp + (b * C + c1) * hw,
              op + b * Cs * hw);
  }
  Tape<T>* tape = recording_tape<T>({&x});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "slice_channels";
  node.inputs = {id_of(x)};
  node.backward = [B, C, c0, hw, Cs](const TapeNode<T>& n, const Tensor<T>& g,
                                     GradMap<T>& grads) {
    Tensor<T> gx = Tensor<T>::zeros({B, C, g.dim(2), g.dim(3)});
    T* gxp = gx.mutable_data();
    const T* gp = g.data();
    for (std::size_t b = 0; b < B; ++b) {
      std::copy(gp + b * Cs * hw, gp + (b + 1) * Cs * hw,
                gxp + (b * C + c0) * hw);
    }
    grads.accumulate(n.inputs[0], gx);
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

// ---- arithmetic --------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return add_scaled(a, b, T(1));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add_scaled(a, b, T(-1));
}

template <typename T>
Tensor<T> add_scaled(const Tensor<T>& a, const Tensor<T>& b, T c) {
  check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  T* op = out.mutable_data();
  const T* ap = a.data();
  const T* bp = b.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) op[i] = ap[i] + c * bp[i];
  Tape<T>* tape = recording_tape<T>({&a, &b});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "add_scaled";
  node.inputs = {id_of(a), id_of(b)};
  node.backward = [c](const TapeNode<T>& n, const Tensor<T>& g,
                      GradMap<T>& grads) {
    grads.accumulate(n.inputs[0], g);
    if (n.inputs[1] >= 0) {
      if (c == T(1)) {
        grads.accumulate(n.inputs[1], g);
      } else {
        Tensor<T> gb(g.shape());
        T* gbp = gb.mutable_data();
        const T* gp = g.data();
        for (std::size_t i = 0; i < g.size(); ++i) gbp[i] = c * gp[i];
        grads.accumulate(n.inputs[1], gb);
      }
    }
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  T* op = out.mutable_data();
  const T* xp = x.data();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) op[i] = c * xp[i];
  Tape<T>* tape = recording_tape<T>({&x});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "scale";
  node.inputs = {id_of(x)};
  node.backward = [c](const TapeNode<T>& n, const Tensor<T>& g,
                      GradMap<T>& grads) {
    Tensor<T> gx(g.shape());
    T* gxp = gx.mutable_data();
    const T* gp = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) gxp[i] = c * gp[i];
    grads.accumulate(n.inputs[0], gx);
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  T* op = out.mutable_data();
  const T* ap = a.data();
  const T* bp = b.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
  Tape<T>* tape = recording_tape<T>({&a, &b});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "mul";
  node.inputs = {id_of(a), id_of(b)};
  node.saved = {a.detached(), b.detached()};
  node.backward = [](const TapeNode<T>& n, const Tensor<T>& g,
                     GradMap<T>& grads) {
    const T* gp = g.data();
    if (n.inputs[0] >= 0) {
      Tensor<T> ga(g.shape());
      T* gap = ga.mutable_data();
      const T* bp = n.saved[1].data();
      for (std::size_t i = 0; i < g.size(); ++i) gap[i] = gp[i] * bp[i];
      grads.accumulate(n.inputs[0], ga);
    }
    if (n.inputs[1] >= 0) {
      Tensor<T> gb(g.shape());
      T* gbp = gb.mutable_data();
      const T* ap = n.saved[0].data();
      for (std::size_t i = 0; i < g.size(); ++i) gbp[i] = gp[i] * ap[i];
      grads.accumulate(n.inputs[1], gb);
    }
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> mul_scalar_param(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1) {
    throw ShapeError("mul_scalar_param: scale must be a single element");
  }
  const T sv = s[0];
  Tensor<T> out(x.shape());
  T* op = out.mutable_data();
  const T* xp = x.data();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) op[i] = sv * xp[i];
  Tape<T>* tape = recording_tape<T>({&x, &s});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "mul_scalar_param";
  node.inputs = {id_of(x), id_of(s)};
  node.saved = {x.detached(), s.detached()};
  node.backward = [](const TapeNode<T>& n, const Tensor<T>& g,
                     GradMap<T>& grads) {
    if (n.inputs[0] >= 0) {
      const T sv = n.saved[1][0];
      Tensor<T> gx(g.shape());
      T* gxp = gx.mutable_data();
      const T* gp = g.data();
      for (std::size_t i = 0; i < g.size(); ++i) gxp[i] = sv * gp[i];
      grads.accumulate(n.inputs[0], gx);
    }
    if (n.inputs[1] >= 0) {
      grads.accumulate(n.inputs[1],
                       Tensor<T>::scalar(dot(g, n.saved[0])));
    }
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const T* xp = x.data();
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += xp[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  Tape<T>* tape = recording_tape<T>({&x});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "sum_all";
  node.inputs = {id_of(x)};
  Shape xshape = x.shape();
  node.backward = [xshape](const TapeNode<T>& n, const Tensor<T>& g,
                           GradMap<T>& grads) {
    grads.accumulate(n.inputs[0], Tensor<T>::full(xshape, g[0]));
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mse");
  const std::size_t n = a.size();
  Tensor<T> diff(a.shape());
  T* dp = diff.mutable_data();
  const T* ap = a.data();
  const T* bp = b.data();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = ap[i] - bp[i];
    dp[i] = d;
    acc += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
  Tape<T>* tape = recording_tape<T>({&a, &b});
  if (!tape) return out;
  TapeNode<T> node;
  node.op = "mse";
  node.inputs = {id_of(a), id_of(b)};
  node.saved = {diff};
  node.backward = [](const TapeNode<T>& n, const Tensor<T>& g,
                     GradMap<T>& grads) {
    const Tensor<T>& d = n.saved[0];
    const T coef = T(2) * g[0] / static_cast<T>(d.size());
    Tensor<T> ga(d.shape());
    T* gap = ga.mutable_data();
    const T* dpp = d.data();
    for (std::size_t i = 0; i < d.size(); ++i) gap[i] = coef * dpp[i];
    if (n.inputs[0] >= 0) grads.accumulate(n.inputs[0], ga);
    if (n.inputs[1] >= 0) {
      Tensor<T> gb(d.shape());
      T* gbp = gb.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) gbp[i] = -gap[i];
      grads.accumulate(n.inputs[1], gb);
    }
  };
  out.attach(tape, tape->record(std::move(node), out));
  return out;
}

template <typename T>
Tensor<T> conv_weight_init(std::size_t cout, std::size_t cin, std::size_t k,
                           std::mt19937_64& rng) {
  const T bound = T(1) / std::sqrt(static_cast<T>(cin * k * k));
  return uniform<T>({cout, cin, k, k}, -bound, bound, rng);
}

#define LUSER_OPS_INSTANTIATE(T)                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,               \
                            const Tensor<T>&, int);                           \
  template Tensor<T> conv2d_raw(const Tensor<T>&, const Tensor<T>&,           \
                                const Tensor<T>&, int);                       \
  template Tensor<T> conv2d_grad_input(const Tensor<T>&, const Tensor<T>&,    \
                                       int, std::size_t, std::size_t);        \
  template Tensor<T> conv2d_grad_weight(const Tensor<T>&, const Tensor<T>&,   \
                                        int, std::size_t, std::size_t);       \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                         \
  template Tensor<T> relu(const Tensor<T>&);                                  \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t,                \
                                const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&,           \
                                const Tensor<T>&, BatchNormState<T>&, bool,   \
                                T, T);                                        \
  template Tensor<T> spectral_scale(const Tensor<T>&, const Tensor<T>&,       \
                                    const Tensor<T>&);                        \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t,            \
                                    std::size_t);                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> add_scaled(const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> scale(const Tensor<T>&, T);                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> mul_scalar_param(const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> sum_all(const Tensor<T>&);                               \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> conv_weight_init(std::size_t, std::size_t, std::size_t,  \
                                      std::mt19937_64&);

LUSER_OPS_INSTANTIATE(float)
LUSER_OPS_INSTANTIATE(double)
#undef LUSER_OPS_INSTANTIATE

}  // namespace luser
