#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cedc/common.hpp"

namespace cedc::nn {

/// Dense row-major numeric array. The runtime engine instantiates Scalar =
/// float (with 64-bit accumulation inside normalizing reductions); the
/// double instantiation backs precision-sensitive tests.
template <typename Scalar>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<Scalar> data;
  std::optional<std::vector<Scalar>> grad;

  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(numel()), Scalar(0));
  }

  Tensor(std::vector<std::int64_t> s, std::vector<Scalar> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel())
      throw UsageError("Tensor: data size does not match shape");
  }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  std::int64_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  Scalar& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  Scalar at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // 2-D convenience accessors (row-major).
  Scalar& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
  Scalar at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * shape[1] + c)]; }

  void ensure_grad() {
    if (!grad) grad.emplace(data.size(), Scalar(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), Scalar(0));
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

inline std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace cedc::nn
