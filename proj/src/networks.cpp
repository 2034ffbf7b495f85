#include "luser/networks.hpp"

#include <cmath>

namespace luser {

namespace {

template <typename T>
void normalize_inplace(Tensor<T>& v) {
  const T n = norm2(v) + static_cast<T>(1e-12);
  T* p = v.mutable_data();
  for (std::size_t i = 0; i < v.size(); ++i) p[i] /= n;
}

}  // namespace

// ---- SNConv -----------------------------------------------------------------

template <typename T>
SNConv<T>::SNConv(std::size_t cin, std::size_t cout, std::size_t ksize,
                  bool with_bias, bool with_sn, std::mt19937_64& rng)
    : use_sn_(with_sn), pad_(static_cast<int>(ksize / 2)) {
  weight_ = conv_weight_init<T>(cout, cin, ksize, rng);
  if (with_bias) bias_ = Tensor<T>::zeros({cout});
  if (use_sn_) {
    u_ = gaussian<T>({cout}, T(1), rng);
    v_ = gaussian<T>({cin * ksize * ksize}, T(1), rng);
    normalize_inplace(u_);
    normalize_inplace(v_);
  }
}

template <typename T>
void SNConv<T>::power_iterate(int steps) {
  if (!use_sn_ || !update_enabled_) return;
  NoGradScope no_grad;
  const std::size_t rows = weight_.dim(0);
  const std::size_t cols = weight_.size() / rows;
  const T* wp = weight_.data();
  for (int s = 0; s < steps; ++s) {
    // v <- normalize(W^T u); u <- normalize(W v). A vanishing weight (the
    // zero-initialized output layer) leaves the estimates untouched so they
    // stay unit-norm until the weight grows.
    Tensor<T> v_new({cols});
    T* vp = v_new.mutable_data();
    const T* up = u_.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T ur = up[r];
      const T* wrow = wp + r * cols;
      for (std::size_t c = 0; c < cols; ++c) vp[c] += ur * wrow[c];
    }
    if (norm2(v_new) < static_cast<T>(1e-20)) return;
    normalize_inplace(v_new);
    Tensor<T> u_new({rows});
    T* up2 = u_new.mutable_data();
    const T* vp2 = v_new.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* wrow = wp + r * cols;
      T acc = 0;
      for (std::size_t c = 0; c < cols; ++c) acc += wrow[c] * vp2[c];
      up2[r] = acc;
    }
    if (norm2(u_new) < static_cast<T>(1e-20)) return;
    normalize_inplace(u_new);
    v_ = std::move(v_new);
    u_ = std::move(u_new);
  }
}

template <typename T>
T SNConv<T>::sigma_estimate() const {
  if (!use_sn_) return T(1);
  const std::size_t rows = weight_.dim(0);
  const std::size_t cols = weight_.size() / rows;
  const T* wp = weight_.data();
  const T* up = u_.data();
  const T* vp = v_.data();
  T sigma = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* wrow = wp + r * cols;
    T acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += wrow[c] * vp[c];
    sigma += up[r] * acc;
  }
  return sigma;
}

template <typename T>
Tensor<T> SNConv<T>::apply(const Tensor<T>& x) const {
  if (!use_sn_) return conv2d(x, weight_, bias_, pad_);
  Tensor<T> w_bar = spectral_scale(weight_, u_, v_);
  return conv2d(x, w_bar, bias_, pad_);
}

template <typename T>
Tensor<T> SNConv<T>::effective_weight() const {
  NoGradScope no_grad;
  if (!use_sn_) return weight_.detached();
  return spectral_scale(weight_, u_, v_);
}

template <typename T>
void SNConv<T>::params(NamedTensors<T>& out, const std::string& prefix) {
  out.emplace_back(prefix + ".weight", &weight_);
  if (!bias_.empty()) out.emplace_back(prefix + ".bias", &bias_);
}

template <typename T>
void SNConv<T>::buffers(NamedTensors<T>& out, const std::string& prefix) {
  if (use_sn_) {
    out.emplace_back(prefix + ".sn_u", &u_);
    out.emplace_back(prefix + ".sn_v", &v_);
  }
}

template <typename T>
std::size_t SNConv<T>::param_count() const {
  return weight_.size() + bias_.size();
}

// ---- DnCNN ------------------------------------------------------------------

template <typename T>
DnCNN<T>::DnCNN(const DnCNNConfig<T>& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (cfg.layers < 2) throw Error("dncnn: need at least 2 layers");
  convs_.reserve(cfg.layers);
  convs_.emplace_back(cfg.channels, cfg.width, 3, /*bias=*/false,
                      cfg.spectral_norm, rng);
  for (std::size_t l = 1; l + 1 < cfg.layers; ++l) {
    convs_.emplace_back(cfg.width, cfg.width, 3, false, cfg.spectral_norm,
                        rng);
    bn_gamma_.push_back(Tensor<T>::full({cfg.width}, T(1)));
    bn_beta_.push_back(Tensor<T>::zeros({cfg.width}));
    bn_state_.push_back(BatchNormState<T>::init(cfg.width));
  }
  convs_.emplace_back(cfg.width, cfg.channels, 3, false, cfg.spectral_norm,
                      rng);
  // zero-initialized output layer: the block starts as the identity map, so
  // the unrolled model begins at plain data-consistency iteration and the
  // equilibrium solves stay contractive early in training
  convs_.back().weight().fill(T(0));
}

template <typename T>
Tensor<T> DnCNN<T>::forward(const Tensor<T>& x, bool train,
                            bool update_stats) {
  if (x.dim(1) != cfg_.channels) {
    throw ShapeError("dncnn: axis 1 expects " + std::to_string(cfg_.channels) +
                     " channels, got " + std::to_string(x.dim(1)));
  }
  Tensor<T> h = relu(convs_.front().apply(x));
  for (std::size_t l = 0; l + 2 < cfg_.layers; ++l) {
    h = convs_[l + 1].apply(h);
    if (update_stats) {
      h = batch_norm(h, bn_gamma_[l], bn_beta_[l], bn_state_[l], train,
                     cfg_.bn_momentum, cfg_.bn_eps);
    } else {
      // same statistics source, no state mutation
      BatchNormState<T> scratch = bn_state_[l];
      h = batch_norm(h, bn_gamma_[l], bn_beta_[l], scratch, train,
                     cfg_.bn_momentum, cfg_.bn_eps);
    }
    h = relu(h);
  }
  Tensor<T> r = convs_.back().apply(h);
  return add(x, r);
}

template <typename T>
void DnCNN<T>::power_iterate_all() {
  for (auto& c : convs_) c.power_iterate();
}

template <typename T>
void DnCNN<T>::params(NamedTensors<T>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].params(out, prefix + ".conv" + std::to_string(i + 1));
  }
  for (std::size_t i = 0; i < bn_gamma_.size(); ++i) {
    out.emplace_back(prefix + ".bn" + std::to_string(i + 2) + ".gamma",
                     &bn_gamma_[i]);
    out.emplace_back(prefix + ".bn" + std::to_string(i + 2) + ".beta",
                     &bn_beta_[i]);
  }
}

template <typename T>
void DnCNN<T>::buffers(NamedTensors<T>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].buffers(out, prefix + ".conv" + std::to_string(i + 1));
  }
  for (std::size_t i = 0; i < bn_state_.size(); ++i) {
    const std::string bn = prefix + ".bn" + std::to_string(i + 2);
    out.emplace_back(bn + ".running_mean", &bn_state_[i].running_mean);
    out.emplace_back(bn + ".running_var", &bn_state_[i].running_var);
  }
}

template <typename T>
std::size_t DnCNN<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& c : convs_) n += c.param_count();
  for (const auto& g : bn_gamma_) n += g.size() * 2;
  return n;
}

template <typename T>
void DnCNN<T>::zero_output_layer() {
  convs_.back().weight().fill(T(0));
  if (!convs_.back().bias().empty()) convs_.back().bias().fill(T(0));
}

template <typename T>
std::vector<Tensor<T>*> DnCNN<T>::param_ptrs() {
  NamedTensors<T> named;
  params(named, "b");
  std::vector<Tensor<T>*> out;
  out.reserve(named.size());
  for (auto& [name, ptr] : named) out.push_back(ptr);
  return out;
}

// ---- ProximalBlock -----------------------------------------------------------

template <typename T>
ProximalBlock<T>::ProximalBlock(const ProximalBlockConfig<T>& cfg,
                                std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels, w = cfg.width, m = 2 * cfg.width;
  inject1_ = SNConv<T>(c, w, 3, true, true, rng);
  inject2_ = SNConv<T>(w, w, 3, true, true, rng);
  data1_ = SNConv<T>(c, w, 3, true, true, rng);
  data2_ = SNConv<T>(w, w, 3, true, true, rng);
  mix1_ = SNConv<T>(m, m, 3, true, true, rng);
  mix2_ = SNConv<T>(m, m, 3, true, true, rng);
  mix3_ = SNConv<T>(m, c, 3, true, true, rng);
  data1_gamma_ = Tensor<T>::full({w}, T(1));
  data1_beta_ = Tensor<T>::zeros({w});
  data2_gamma_ = Tensor<T>::full({w}, T(1));
  data2_beta_ = Tensor<T>::zeros({w});
  mix1_gamma_ = Tensor<T>::full({m}, T(1));
  mix1_beta_ = Tensor<T>::zeros({m});
  mix2_gamma_ = Tensor<T>::full({m}, T(1));
  mix2_beta_ = Tensor<T>::zeros({m});
  // zero residual at initialization (see DnCNN): the skip connection makes
  // the fresh block exactly the identity
  mix3_.weight().fill(T(0));
}

template <typename T>
Tensor<T> ProximalBlock<T>::inject(const Tensor<T>& d) {
  ++injection_calls_;
  Tensor<T> h = leaky_relu(inject1_.apply(d), cfg_.leaky_slope);
  return leaky_relu(inject2_.apply(h), cfg_.leaky_slope);
}

template <typename T>
Tensor<T> ProximalBlock<T>::residual_map(const Tensor<T>& r,
                                         const Tensor<T>& e) {
  Tensor<T> h = data1_.apply(r);
  h = group_norm(h, cfg_.gn_groups, data1_gamma_, data1_beta_, cfg_.gn_eps);
  h = leaky_relu(h, cfg_.leaky_slope);
  h = data2_.apply(h);
  h = group_norm(h, cfg_.gn_groups, data2_gamma_, data2_beta_, cfg_.gn_eps);
  h = leaky_relu(h, cfg_.leaky_slope);

  Tensor<T> z = concat_channels(h, e);
  z = mix1_.apply(z);
  z = group_norm(z, cfg_.gn_groups, mix1_gamma_, mix1_beta_, cfg_.gn_eps);
  z = leaky_relu(z, cfg_.leaky_slope);
  z = mix2_.apply(z);
  z = group_norm(z, cfg_.gn_groups, mix2_gamma_, mix2_beta_, cfg_.gn_eps);
  z = leaky_relu(z, cfg_.leaky_slope);
  return mix3_.apply(z);
}

template <typename T>
Tensor<T> ProximalBlock<T>::forward(const Tensor<T>& d,
                                    const EquilibriumOptions<T>& opts,
                                    FixedPointResult<T>* stats) {
  power_iterate_all();
  Tensor<T> e = inject(d);
  auto body = [this](std::span<const Tensor<T>> ins) {
    return residual_map(ins[0], ins[1]);
  };
  Tensor<T> z0 = Tensor<T>::zeros(d.shape());
  Tensor<T> r = equilibrium_layer<T>(body, {e}, param_ptrs(), z0, opts, stats);
  return add(d, r);
}

template <typename T>
void ProximalBlock<T>::power_iterate_all() {
  inject1_.power_iterate();
  inject2_.power_iterate();
  data1_.power_iterate();
  data2_.power_iterate();
  mix1_.power_iterate();
  mix2_.power_iterate();
  mix3_.power_iterate();
}

template <typename T>
void ProximalBlock<T>::params(NamedTensors<T>& out,
                              const std::string& prefix) {
  inject1_.params(out, prefix + ".inject.conv1");
  inject2_.params(out, prefix + ".inject.conv2");
  data1_.params(out, prefix + ".data.conv1");
  out.emplace_back(prefix + ".data.gn1.gamma", &data1_gamma_);
  out.emplace_back(prefix + ".data.gn1.beta", &data1_beta_);
  data2_.params(out, prefix + ".data.conv2");
  out.emplace_back(prefix + ".data.gn2.gamma", &data2_gamma_);
  out.emplace_back(prefix + ".data.gn2.beta", &data2_beta_);
  mix1_.params(out, prefix + ".mix.conv1");
  out.emplace_back(prefix + ".mix.gn1.gamma", &mix1_gamma_);
  out.emplace_back(prefix + ".mix.gn1.beta", &mix1_beta_);
  mix2_.params(out, prefix + ".mix.conv2");
  out.emplace_back(prefix + ".mix.gn2.gamma", &mix2_gamma_);
  out.emplace_back(prefix + ".mix.gn2.beta", &mix2_beta_);
  mix3_.params(out, prefix + ".mix.conv3");
}

template <typename T>
void ProximalBlock<T>::buffers(NamedTensors<T>& out,
                               const std::string& prefix) {
  inject1_.buffers(out, prefix + ".inject.conv1");
  inject2_.buffers(out, prefix + ".inject.conv2");
  data1_.buffers(out, prefix + ".data.conv1");
  data2_.buffers(out, prefix + ".data.conv2");
  mix1_.buffers(out, prefix + ".mix.conv1");
  mix2_.buffers(out, prefix + ".mix.conv2");
  mix3_.buffers(out, prefix + ".mix.conv3");
}

template <typename T>
std::size_t ProximalBlock<T>::param_count() const {
  std::size_t n = inject1_.param_count() + inject2_.param_count() +
                  data1_.param_count() + data2_.param_count() +
                  mix1_.param_count() + mix2_.param_count() +
                  mix3_.param_count();
  n += data1_gamma_.size() * 2 + data2_gamma_.size() * 2;
  n += mix1_gamma_.size() * 2 + mix2_gamma_.size() * 2;
  return n;
}

template <typename T>
void ProximalBlock<T>::zero_output_layer() {
  mix3_.weight().fill(T(0));
  if (!mix3_.bias().empty()) mix3_.bias().fill(T(0));
}

template <typename T>
std::vector<Tensor<T>*> ProximalBlock<T>::param_ptrs() {
  NamedTensors<T> named;
  params(named, "b");
  std::vector<Tensor<T>*> out;
  out.reserve(named.size());
  for (auto& [name, ptr] : named) out.push_back(ptr);
  return out;
}

#define LUSER_NETWORKS_INSTANTIATE(T)                                         \
  template class SNConv<T>;                                                   \
  template class DnCNN<T>;                                                    \
  template class ProximalBlock<T>;

LUSER_NETWORKS_INSTANTIATE(float)
LUSER_NETWORKS_INSTANTIATE(double)
#undef LUSER_NETWORKS_INSTANTIATE

}  // namespace luser
