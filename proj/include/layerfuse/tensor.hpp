// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "layerfuse/error.hpp"

namespace layerfuse {

/// Dense row-major tensor of 64-bit reals.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape product " +
                       std::to_string(element_count(shape_)));
  }

  static Tensor zeros_like(const Tensor &other) { return Tensor(other.shape_); }

  const std::vector<std::size_t> &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double *data() { return data_.data(); }
  const double *data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double &operator[](std::size_t i) { return data_[i]; }
  const double &operator[](std::size_t i) const { return data_[i]; }

  double &at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const double &at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double &at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const double &at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new shape with identical element count.
  Tensor reshaped(std::vector<std::size_t> shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const;

  bool operator==(const Tensor &) const = default;

  static std::size_t element_count(const std::vector<std::size_t> &shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t> &shape);

/// A named reference to a trainable array, used by the optimizer, clipping and gradient checks.
struct ParamRef {
  std::string name;
  Tensor *tensor;
};

struct ConstParamRef {
  std::string name;
  const Tensor *tensor;
};

} // namespace layerfuse
