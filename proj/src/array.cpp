#include "forgetlab/array.hpp"

#include "forgetlab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace forgetlab::numerics {

std::size_t element_count(const Array::Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Array::Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  if (data_.size() != element_count(shape_)) {
    throw DimensionError("array of shape " + shape_string(shape_) + " given " + std::to_string(data_.size()) +
                         " elements");
  }
}

Array Array::uninitialized(Shape shape) {
  Array a;
  a.shape_ = std::move(shape);
  a.data_.resize(element_count(a.shape_));
  return a;
}

Array Array::scalar(double value) { return Array(Shape{}, std::vector<double>{value}); }

Array Array::matrix(std::size_t rows, std::size_t cols, double fill) { return Array({rows, cols}, fill); }

Array Array::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Array::from_rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Array({r, c}, std::move(values));
}

Array Array::vector(std::initializer_list<double> values) {
  return Array({values.size()}, std::vector<double>(values));
}

Array Array::identity(std::size_t n) {
  Array a = matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
  return a;
}

std::size_t Array::rows() const noexcept {
  if (shape_.empty()) return 1;
  const std::size_t c = shape_.back();
  return c == 0 ? 0 : data_.size() / c;
}

std::size_t Array::cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

double Array::item() const {
  if (data_.size() != 1) throw ContractError("item() on array of shape " + shape_string(shape_));
  return data_[0];
}

bool Array::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void Array::fill(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

Array Array::reshaped(Shape shape) const {
  if (element_count(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Array out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void require_finite(const Array& a, const std::string& what) {
  if (!a.all_finite()) throw NumericError("non-finite value in " + what);
}

Array matmul(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Array out = Array::uninitialized({a.rows(), b.cols()});
  out.mat().noalias() = a.mat() * b.mat();
  return out;
}

Array matmul_nt(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  Array out = Array::uninitialized({a.rows(), b.rows()});
  out.mat().noalias() = a.mat() * b.mat().transpose();
  return out;
}

Array softmax(const Array& x) {
  require_finite(x, "softmax input");
  Array out = x;
  auto m = out.mat();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return out;
}

Array log_softmax(const Array& x) {
  require_finite(x, "log_softmax input");
  Array out = x;
  auto m = out.mat();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    row.array() -= lse;
  }
  return out;
}

Array layer_norm(const Array& x, const Array& gamma, const Array& beta, double eps) {
  const std::size_t d = x.cols();
  if (d == 0 || gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " with gamma " +
                         shape_string(gamma.shape()) + ", beta " + shape_string(beta.shape()));
  }
  Array out = x;
  auto m = out.mat();
  const Eigen::Map<const Eigen::RowVectorXd> g(gamma.data(), static_cast<Eigen::Index>(d));
  const Eigen::Map<const Eigen::RowVectorXd> b(beta.data(), static_cast<Eigen::Index>(d));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mean = row.mean();
    row.array() -= mean;
    const double var = row.squaredNorm() / static_cast<double>(d);
    row *= 1.0 / std::sqrt(var + eps);
    row = row.cwiseProduct(g) + b;
  }
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) noexcept {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) noexcept {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Array gelu(const Array& x) {
  Array out = x;
  for (double& v : out.values()) v = gelu(v);
  return out;
}

}  // namespace forgetlab::numerics
