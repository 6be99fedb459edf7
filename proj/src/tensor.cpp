// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/tensor.hpp"

#include <cmath>

namespace layerfuse {

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<std::size_t> &shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

} // namespace layerfuse
