#include "movelab/array.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace movelab {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

Array::Array(Shape shape) : shape_(std::move(shape)) {
  for (int64_t d : shape_) {
    if (d <= 0) throw std::invalid_argument("Array: extents must be positive, got " + shape_str(shape_));
  }
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (int64_t d : shape_) {
    if (d <= 0) throw std::invalid_argument("Array: extents must be positive, got " + shape_str(shape_));
  }
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw std::invalid_argument("Array: shape " + shape_str(shape_) + " does not match data length " +
                                std::to_string(data_.size()));
  }
}

Array Array::full(Shape shape, double value) {
  Array a(std::move(shape));
  for (double& x : a.data_) x = value;
  return a;
}

Array Array::row(std::initializer_list<double> values) {
  return Array({static_cast<int64_t>(values.size())}, std::vector<double>(values));
}

int64_t Array::dim(int64_t i) const {
  if (i < 0) i += ndim();
  if (i < 0 || i >= ndim()) throw std::out_of_range("Array::dim index out of range");
  return shape_[static_cast<size_t>(i)];
}

double Array::at(std::span<const int64_t> index) const {
  if (static_cast<int64_t>(index.size()) != ndim()) throw std::invalid_argument("Array::at: rank mismatch");
  int64_t off = 0;
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= shape_[i]) throw std::out_of_range("Array::at: index out of range");
    off = off * shape_[i] + index[i];
  }
  return data_[static_cast<size_t>(off)];
}

double Array::at(std::initializer_list<int64_t> index) const {
  return at(std::span<const int64_t>(index.begin(), index.size()));
}

bool Array::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

double max_abs_diff(const Array& a, const Array& b) {
  if (!shapes_equal(a.shape(), b.shape()))
    throw std::invalid_argument("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

double max_rel_diff(const Array& a, const Array& b, double floor) {
  if (!shapes_equal(a.shape(), b.shape()))
    throw std::invalid_argument("max_rel_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = a.data()[i], y = b.data()[i];
    double den = std::max({std::fabs(x), std::fabs(y), floor});
    m = std::max(m, std::fabs(x - y) / den);
  }
  return m;
}

bool exactly_equal(const Array& a, const Array& b) {
  if (!shapes_equal(a.shape(), b.shape())) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

int64_t argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax: empty input");
  int64_t best = 0;
  for (int64_t i = 1; i < static_cast<int64_t>(values.size()); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace movelab
