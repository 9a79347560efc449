#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace prag::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major f32 tensor. Value semantics: copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, float value);
  static Tensor identity(std::size_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  /// Rows/cols of a rank-2 tensor; throws ShapeError otherwise.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<float> values() noexcept { return values_; }
  std::span<const float> values() const noexcept { return values_; }
  float* data() noexcept { return values_.data(); }
  const float* data() const noexcept { return values_.data(); }

  float& operator[](std::size_t i) { return values_[i]; }
  float operator[](std::size_t i) const { return values_[i]; }
  float& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  void fill(float value);
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> values_;
};

/// Throws ShapeError unless `t` has exactly the given shape.
void expect_shape(const Tensor& t, const Shape& shape, const char* what);

/// Largest absolute elementwise difference; shapes must match.
float max_abs_diff(const Tensor& a, const Tensor& b);

/// Bitwise equality of values (distinguishes -0.0 and NaN payloads).
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace prag::num
