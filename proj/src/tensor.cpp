#include "luser/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace luser {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<T>>(std::move(values))) {
  if (data_->size() != numel(shape_)) {
    throw ShapeError("tensor init: " + std::to_string(data_->size()) +
                     " values for shape " + shape_str(shape_));
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill_value)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<T>>(numel(shape_), fill_value)) {}

template <typename T>
T* Tensor<T>::mutable_data() {
  if (!data_) throw Error("mutable_data on empty tensor");
  if (data_.use_count() > 1) {
    data_ = std::make_shared<std::vector<T>>(*data_);
  }
  return data_->data();
}

template <typename T>
T Tensor<T>::at4(std::size_t a, std::size_t b, std::size_t c,
                 std::size_t d) const {
  return (*data_)[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw ShapeError("item() on non-scalar tensor of shape " +
                     shape_str(shape_));
  }
  return (*data_)[0];
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
  Tensor<T> out = *this;
  out.tape_ = nullptr;
  out.id_ = -1;
  return out;
}

template <typename T>
void Tensor<T>::fill(T v) {
  T* p = mutable_data();
  std::fill(p, p + size(), v);
}

template <typename T>
void Tensor<T>::add_inplace(const Tensor<T>& other, T scale) {
  check_same_shape(*this, other, "add_inplace");
  T* p = mutable_data();
  const T* q = other.data();
  const std::size_t n = size();
  for (std::size_t i = 0; i < n; ++i) p[i] += scale * q[i];
}

template <typename T>
Tensor<double> Tensor<T>::to_f64() const {
  std::vector<double> v(size());
  const T* p = data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(p[i]);
  return Tensor<double>(shape_, std::move(v));
}

template <typename T>
Tensor<float> Tensor<T>::to_f32() const {
  std::vector<float> v(size());
  const T* p = data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(p[i]);
  return Tensor<float>(shape_, std::move(v));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape shape) {
  if (numel(shape) != t.size()) {
    throw ShapeError("reshape: " + shape_str(t.shape()) + " to " +
                     shape_str(shape) + " changes element count");
  }
  Tensor<T> out = t.detached();
  out.set_shape(std::move(shape));
  return out;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* where) {
  if (a.rank() != b.rank()) {
    throw ShapeError(std::string(where) + ": rank mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  for (std::size_t ax = 0; ax < a.rank(); ++ax) {
    if (a.shape()[ax] != b.shape()[ax]) {
      throw ShapeError(std::string(where) + ": axis " + std::to_string(ax) +
                       " mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "dot");
  const T* p = a.data();
  const T* q = b.data();
  T acc = 0;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) acc += p[i] * q[i];
  return acc;
}

template <typename T>
T norm2(const Tensor<T>& t) {
  const T* p = t.data();
  T acc = 0;
  const std::size_t n = t.size();
  for (std::size_t i = 0; i < n; ++i) acc += p[i] * p[i];
  return std::sqrt(acc);
}

template <typename T>
T max_abs(const Tensor<T>& t) {
  const T* p = t.data();
  T m = 0;
  const std::size_t n = t.size();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(p[i]));
  return m;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  const T* p = t.data();
  const std::size_t n = t.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) return false;
  }
  return true;
}

template <typename T>
Tensor<T> uniform(Shape shape, T lo, T hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<T> dist(lo, hi);
  std::vector<T> v(numel(shape));
  for (T& x : v) x = dist(rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> gaussian(Shape shape, T sigma, std::mt19937_64& rng) {
  std::normal_distribution<T> dist(T(0), sigma);
  std::vector<T> v(numel(shape));
  for (T& x : v) x = dist(rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> reshape(const Tensor<float>&, Shape);
template Tensor<double> reshape(const Tensor<double>&, Shape);
template void check_same_shape(const Tensor<float>&, const Tensor<float>&,
                               const char*);
template void check_same_shape(const Tensor<double>&, const Tensor<double>&,
                               const char*);
template float dot(const Tensor<float>&, const Tensor<float>&);
template double dot(const Tensor<double>&, const Tensor<double>&);
template float norm2(const Tensor<float>&);
template double norm2(const Tensor<double>&);
template float max_abs(const Tensor<float>&);
template double max_abs(const Tensor<double>&);
template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);
template Tensor<float> uniform(Shape, float, float, std::mt19937_64&);
template Tensor<double> uniform(Shape, double, double, std::mt19937_64&);
template Tensor<float> gaussian(Shape, float, std::mt19937_64&);
template Tensor<double> gaussian(Shape, double, std::mt19937_64&);

}  // namespace luser
