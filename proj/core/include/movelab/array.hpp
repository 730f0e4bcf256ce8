#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace movelab {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shapes_equal(const Shape& a, const Shape& b);

/// Dense row-major array of 64-bit floats. All training and verification math
/// runs in double precision; float32 exists only as a checkpoint storage
/// encoding. Arrays are treated as immutable values once handed to the tape
/// or to a parameter record.
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape);  // zero-filled
  Array(Shape shape, std::vector<double> data);

  static Array full(Shape shape, double value);
  static Array row(std::initializer_list<double> values);  // 1-D

  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const;  // negative indices count from the back
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const double* ptr() const { return data_.data(); }
  double* ptr() { return data_.data(); }

  double at(std::span<const int64_t> index) const;
  double at(std::initializer_list<int64_t> index) const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Largest absolute element-wise difference; throws on shape mismatch.
double max_abs_diff(const Array& a, const Array& b);
/// Largest element-wise relative difference with denominator floor.
double max_rel_diff(const Array& a, const Array& b, double floor = 1e-12);
/// Exact numeric equality per element (treats -0.0 == +0.0).
bool exactly_equal(const Array& a, const Array& b);

int64_t argmax(std::span<const double> values);

}  // namespace movelab
