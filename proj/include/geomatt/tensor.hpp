#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace geomatt {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape &shape);
std::string shape_string(const Shape &shape);

/// Dense row-major tensor of doubles.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);

  const Shape &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  std::span<double> data() & { return data_; }
  std::span<const double> data() const & { return data_; }
  // A span into a temporary would dangle.
  std::span<const double> data() const && = delete;
  std::vector<double> &storage() { return data_; }
  const std::vector<double> &storage() const { return data_; }

  double &operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double &operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double &operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Value of a one-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  void fill(double value);
  void add_inplace(const Tensor &other);

  bool operator==(const Tensor &other) const = default;

private:
  Shape shape_;
  std::vector<double> data_;
};

/// Bitwise equality, NaN payloads included.
bool bit_identical(const Tensor &a, const Tensor &b);
double max_abs_diff(const Tensor &a, const Tensor &b);

} // namespace geomatt
