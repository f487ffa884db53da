// Dense row-major double tensor, the value type of the autodiff tape.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "nk/common.hpp"

namespace nk {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s)
      : shape(std::move(s)), data(numel_of(shape), 0.0) {}
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      throw ConfigError("Tensor: data size does not match shape");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

}  // namespace nk
