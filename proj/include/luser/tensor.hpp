#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace luser {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or axis mismatch; the message names the offending axis.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;

/// Dense row-major N-d array. Buffers are shared (copy is cheap); mutation
/// goes through mutable_data(), which unshares first. A tensor may carry a
/// handle into an active differentiation tape; detached tensors never
/// receive gradient.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(numel(shape_), T(0))) {}
  Tensor(Shape shape, std::vector<T> values);
  Tensor(Shape shape, T fill_value);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return size() == 0; }

  const T* data() const { return data_ ? data_->data() : nullptr; }
  T* mutable_data();
  const std::vector<T>& vec() const { return *data_; }

  T operator[](std::size_t i) const { return (*data_)[i]; }
  T at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const;

  /// Scalar value of a single-element tensor.
  T item() const;

  /// The underlying buffer identity, used for aliasing-aware bookkeeping.
  const void* buffer_id() const { return static_cast<const void*>(data_.get()); }
  bool shares_buffer(const Tensor& other) const { return data_ == other.data_; }

  // Tape participation.
  Tape<T>* tape() const { return tape_; }
  int tape_id() const { return id_; }
  bool attached() const { return tape_ != nullptr && id_ >= 0; }
  Tensor detached() const;
  void attach(Tape<T>* tape, int id) {
    tape_ = tape;
    id_ = id;
  }
  void detach_inplace() {
    tape_ = nullptr;
    id_ = -1;
  }
  void set_shape(Shape s) { shape_ = std::move(s); }

  // In-place helpers (detach-safe value edits for optimizer state etc.).
  void fill(T v);
  void add_inplace(const Tensor& other, T scale = T(1));

  Tensor<double> to_f64() const;
  Tensor<float> to_f32() const;

  static constexpr DType dtype() {
    return sizeof(T) == 4 ? DType::f32 : DType::f64;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

/// Same buffer under a new shape (detached view; element count must match).
template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape shape);

/// Throws ShapeError naming the first axis (or rank) that differs.
template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where);

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T norm2(const Tensor<T>& t);

template <typename T>
T max_abs(const Tensor<T>& t);

template <typename T>
bool all_finite(const Tensor<T>& t);

/// Uniform values in [lo, hi).
template <typename T>
Tensor<T> uniform(Shape shape, T lo, T hi, std::mt19937_64& rng);

/// Standard normal scaled by sigma.
template <typename T>
Tensor<T> gaussian(Shape shape, T sigma, std::mt19937_64& rng);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace luser
