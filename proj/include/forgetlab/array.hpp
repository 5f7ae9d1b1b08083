#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <memory>
#include <new>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace forgetlab::numerics {

inline constexpr std::size_t kArrayAlignment = 64;

/// Allocator whose value-initialization is default-initialization, so
/// resizing a buffer of doubles leaves the new elements unwritten. Blocks
/// are 64-byte aligned: vectorized reductions peel to alignment, so a fixed
/// alignment keeps results independent of where the heap places a buffer.
template <class T>
struct DefaultInitAllocator {
  using value_type = T;
  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() noexcept = default;
  template <class U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kArrayAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kArrayAlignment}); }

  template <class U>
  bool operator==(const DefaultInitAllocator<U>&) const noexcept {
    return true;
  }
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Dense row-major array of doubles.
///
/// Every array can be viewed as a matrix whose column count is the last
/// dimension and whose row count is the product of the leading dimensions.
/// A rank-0 array is a scalar with one element.
class Array {
 public:
  using Shape = std::vector<std::size_t>;

  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> values);

  /// Array whose elements are left unwritten; the caller must fill them.
  static Array uninitialized(Shape shape);
  static Array scalar(double value);
  static Array matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Array from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Array vector(std::initializer_list<double> values);
  static Array identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  MatrixMap mat() { return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())}; }
  ConstMatrixMap mat() const {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }

  /// Scalar value of a one-element array.
  double item() const;
  bool all_finite() const noexcept;
  void fill(double value) noexcept;
  /// Same elements, new shape; element counts must agree.
  Array reshaped(Shape shape) const;

  bool operator==(const Array& other) const = default;

 private:
  Shape shape_{0};
  std::vector<double, DefaultInitAllocator<double>> data_;
};

std::size_t element_count(const Array::Shape& shape) noexcept;
std::string shape_string(const Array::Shape& shape);

/// Throws NumericError naming `what` when any element is NaN or infinite.
void require_finite(const Array& a, const std::string& what);

/// Matrix product of a[m×k] and b[k×n].
Array matmul(const Array& a, const Array& b);
/// a[m×k] times the transpose of b[n×k].
Array matmul_nt(const Array& a, const Array& b);
/// Softmax over the last axis with max subtraction.
Array softmax(const Array& x);
/// Log-softmax over the last axis.
Array log_softmax(const Array& x);
/// Per-row standardization over the last axis followed by gamma * x + beta.
Array layer_norm(const Array& x, const Array& gamma, const Array& beta, double eps);
/// Tanh-approximated GELU.
double gelu(double x) noexcept;
Array gelu(const Array& x);
/// Derivative of the tanh-approximated GELU.
double gelu_grad(double x) noexcept;

}  // namespace forgetlab::numerics
